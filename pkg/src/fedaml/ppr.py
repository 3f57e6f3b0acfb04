"""Personalized PageRank, prediction-weighted transitions, sweep-cut cluster
extraction, cross-country cluster merging, and the planted-group recovery
harness.

The solver iterates r <- (1-a) P^T r + a v with row-stochastic P; rows with no
outgoing mass teleport fully back to the personalization, which keeps the
score vector a probability distribution. Scores are max-normalized before
thresholding so the hottest account always sits at 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data import SbmSpec, sbm_generate


class PprError(RuntimeError):
    pass


@dataclass(frozen=True)
class PprConfig:
    alpha_ppr: float = 0.15
    tol: float = 1e-10
    max_iters: int = 2000
    score_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.alpha_ppr < 1.0:
            raise ValueError(f"alpha_ppr {self.alpha_ppr} outside (0,1)")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0.0 < self.score_threshold <= 1.0:
            raise ValueError("score_threshold must lie in (0,1]")


@dataclass
class PprResult:
    scores: np.ndarray        # raw distribution, sums to ~1
    normalized: np.ndarray    # scores / max(scores)
    iterations: int
    residual: float


def transition_matrix(adjacency: sp.spmatrix) -> sp.csr_matrix:
    """Row-normalize nonnegative weights; all-zero rows stay zero (dangling)."""
    adjacency = sp.csr_matrix(adjacency, dtype=np.float64)
    if adjacency.nnz and adjacency.data.min() < 0:
        raise ValueError("transition_matrix: negative edge weight")
    deg = np.asarray(adjacency.sum(axis=1)).ravel()
    inv = np.where(deg > 0, 1.0 / np.where(deg > 0, deg, 1.0), 0.0)
    return sp.diags(inv).dot(adjacency).tocsr()


def cross_bank_transition(adjacency: sp.spmatrix, predictions: sp.spmatrix) -> sp.csr_matrix:
    """P = D^-1 (A + A_hat): transitions reweighted by edge suspicion scores.

    ``predictions`` must be zero outside existing-or-flagged account pairs and
    its entries must lie in [0, 1].
    """
    a_hat = sp.csr_matrix(predictions, dtype=np.float64)
    if a_hat.shape != adjacency.shape:
        raise ValueError(f"cross_bank_transition: shape {a_hat.shape} vs {adjacency.shape}")
    if a_hat.nnz and (a_hat.data.min() < 0 or a_hat.data.max() > 1):
        raise ValueError("cross_bank_transition: predictions outside [0,1]")
    return transition_matrix(sp.csr_matrix(adjacency, dtype=np.float64) + a_hat)


def ppr_solve(p: sp.spmatrix, v: np.ndarray, config: PprConfig) -> PprResult:
    """Power iteration for the teleporting random-walk distribution.

    Dangling rows hand their mass back to v, so the L1 norm is conserved.
    Raises on non-convergence within ``config.max_iters``.
    """
    p = sp.csr_matrix(p, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64).ravel()
    n = p.shape[0]
    if p.shape != (n, n) or len(v) != n:
        raise ValueError(f"ppr_solve: P {p.shape} incompatible with v ({len(v)},)")
    if v.min() < 0:
        raise ValueError("ppr_solve: personalization must be nonnegative")
    total = v.sum()
    if total <= 0:
        raise ValueError("ppr_solve: personalization has no mass")
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"ppr_solve: personalization mass {total} != 1")

    alpha = config.alpha_ppr
    pt = p.T.tocsr()
    row_sums = np.asarray(p.sum(axis=1)).ravel()
    dangling = row_sums < 1e-15

    r = v.copy()
    for iteration in range(1, config.max_iters + 1):
        dangling_mass = float(r[dangling].sum()) if dangling.any() else 0.0
        nxt = (1.0 - alpha) * (pt @ r + dangling_mass * v) + alpha * v
        residual = float(np.abs(nxt - r).sum())
        r = nxt
        if residual < config.tol:
            mx = r.max()
            normalized = r / mx if mx > 0 else r.copy()
            return PprResult(scores=r, normalized=normalized,
                             iterations=iteration, residual=residual)
    raise PprError(
        f"ppr_solve: no convergence in {config.max_iters} iterations "
        f"(last residual {residual:.3e})")


def build_personalization(n: int, seed_scores: dict[int, float],
                          cross_scores: dict[int, float] | None = None
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Split teleport mass between internal suspicion and cross-border signal.

    The local component spreads the seed set's detection scores; the cross
    component puts mass on accounts flagged from abroad. When both are present
    each side carries half the mass so their sum is a distribution.
    """
    if not seed_scores:
        raise ValueError("build_personalization: empty seed set")
    v_local = np.zeros(n)
    for node, score in seed_scores.items():
        if score < 0:
            raise ValueError(f"build_personalization: negative score at node {node}")
        v_local[node] = score
    local_total = v_local.sum()
    if local_total <= 0:
        raise ValueError("build_personalization: all-zero seed scores")
    v_local /= local_total

    v_cross = np.zeros(n)
    if cross_scores:
        for node, weight in cross_scores.items():
            v_cross[node] = max(0.0, weight)
        cross_total = v_cross.sum()
        if cross_total > 0:
            v_cross /= cross_total
            v_local *= 0.5
            v_cross *= 0.5
    return v_local, v_cross


def extract_cluster(result: PprResult, threshold: float) -> set[int]:
    """Nodes whose max-normalized score clears the cut; argmax always included."""
    return set(np.flatnonzero(result.normalized >= threshold).tolist())


def conductance(adjacency: sp.spmatrix, node_set: set[int]) -> float:
    """cut(S) / min(vol(S), vol(complement)) on a symmetric weighted graph."""
    adjacency = sp.csr_matrix(adjacency, dtype=np.float64)
    n = adjacency.shape[0]
    mask = np.zeros(n, dtype=bool)
    mask[list(node_set)] = True
    deg = np.asarray(adjacency.sum(axis=1)).ravel()
    vol_s = float(deg[mask].sum())
    vol_rest = float(deg.sum() - vol_s)
    if min(vol_s, vol_rest) <= 0:
        return float("inf")
    internal = float(adjacency[mask][:, mask].sum())
    return (vol_s - internal) / min(vol_s, vol_rest)


def sweep_cut(scores: np.ndarray, degrees: np.ndarray, adjacency: sp.spmatrix,
              max_size: int | None = None) -> tuple[set[int], float, list[int]]:
    """Minimum-conductance prefix of the degree-normalized score ordering.

    Nodes with zero degree cannot be ranked (r/d undefined); they are skipped
    and reported back. Returns (best prefix, its conductance, skipped nodes).
    """
    scores = np.asarray(scores, dtype=np.float64)
    degrees = np.asarray(degrees, dtype=np.float64)
    adjacency = sp.csr_matrix(adjacency, dtype=np.float64)
    n = len(scores)
    skipped = np.flatnonzero(degrees <= 0).tolist()
    active = np.flatnonzero(degrees > 0)
    if len(active) < 2:
        raise PprError("sweep_cut: fewer than two rankable nodes")

    ratio = scores[active] / degrees[active]
    order = active[np.lexsort((active, -ratio))]  # score/deg desc, index asc on ties

    total_vol = float(degrees[active].sum())
    limit = len(order) - 1
    if max_size is not None:
        limit = min(limit, max_size)

    in_set = np.zeros(n, dtype=bool)
    vol = 0.0
    cut = 0.0
    best = (float("inf"), 1)
    for k, node in enumerate(order[:limit], start=1):
        row = adjacency.getrow(node)
        inside = float(row.data[in_set[row.indices]].sum()) if row.nnz else 0.0
        self_w = float(row.data[row.indices == node].sum()) if row.nnz else 0.0
        vol += degrees[node]
        # edges to the inside stop being cut edges; the rest become cut edges
        cut += degrees[node] - 2.0 * inside - self_w
        in_set[node] = True
        denom = min(vol, total_vol - vol)
        if denom <= 0:
            continue
        phi = cut / denom
        if phi < best[0]:
            best = (phi, k)
    prefix = set(int(x) for x in order[:best[1]])
    return prefix, best[0], skipped


def merge_clusters(dictionaries: dict[str, dict[str, set[str]]]) -> "ClusterSet":
    """Union clusters that share accounts, across all country dictionaries.

    Processing starts from the dictionary holding the most accounts and
    repeats until no two clusters overlap, which coincides with connected
    components of the cluster-overlap graph — so the outcome is independent
    of dictionary order.
    """
    order = sorted(dictionaries,
                   key=lambda c: (-sum(len(s) for s in dictionaries[c].values()), c))
    merged: list[tuple[set[str], list[str]]] = []  # accounts, contributing cluster names
    for country in order:
        for name in sorted(dictionaries[country]):
            accounts = set(dictionaries[country][name])
            if not accounts:
                continue
            provenance = [f"{country}/{name}"]
            while True:
                hit = next((i for i, (acc, _) in enumerate(merged) if acc & accounts), None)
                if hit is None:
                    break
                acc, prov = merged.pop(hit)
                accounts |= acc
                provenance = prov + provenance
            merged.append((accounts, provenance))
    clusters = ClusterSet()
    for i, (accounts, provenance) in enumerate(
            sorted(merged, key=lambda item: sorted(item[0]))):
        seed = provenance[0]
        countries = tuple(sorted({a.split(":", 1)[0] for a in accounts}))
        clusters.clusters.append(Cluster(
            cluster_id=f"c{i}", accounts=frozenset(accounts), seed=seed,
            countries=countries, hit_count=0))
    return clusters


@dataclass(frozen=True)
class Cluster:
    cluster_id: str
    accounts: frozenset[str]
    seed: str
    countries: tuple[str, ...]
    hit_count: int


@dataclass
class ClusterSet:
    clusters: list[Cluster] = field(default_factory=list)

    def with_hits(self, malicious_accounts: set[str]) -> "ClusterSet":
        out = ClusterSet()
        for c in self.clusters:
            hits = len(c.accounts & malicious_accounts)
            out.clusters.append(Cluster(c.cluster_id, c.accounts, c.seed,
                                        c.countries, hits))
        return out

    def all_accounts(self) -> set[str]:
        return set().union(*(c.accounts for c in self.clusters)) if self.clusters else set()


# ---------------------------------------------------------------------------
# planted-group recovery harness
# ---------------------------------------------------------------------------

# Empirically calibrated working constant for the recovery condition
# s * (p_in - p_out) >= C * sqrt(n * p_max * log n); see the harness tests.
DETECTABILITY_CONSTANT = 0.2


def signal_p_in(n: int, s: int, p_out: float, multiple: float,
                constant: float = DETECTABILITY_CONSTANT) -> float:
    """Smallest p_in with s(p_in - p_out) = multiple * constant * sqrt(n p_in log n)."""
    c = multiple * constant * np.sqrt(n * np.log(n))
    # solve s(p - p_out) = c * sqrt(p) for p via the quadratic in sqrt(p)
    disc = c * c + 4.0 * s * s * p_out
    root = (c + np.sqrt(disc)) / (2.0 * s)
    p_in = float(root * root)
    if p_in > 1.0:
        raise ValueError(f"signal_p_in: required p_in {p_in:.3f} exceeds 1")
    return p_in


def mean_field_gap(n: int, s: int, p_in: float, p_out: float, alpha_ppr: float) -> float:
    """Expected per-node score difference between the planted block and the rest.

    Uses the two-state block random walk seeded inside the planted group: the
    walk follows edges with probability (1 - alpha_ppr) and teleports home
    otherwise.
    """
    deg_in = s * p_in + (n - s) * p_out
    deg_out = n * p_out
    if deg_in <= 0 or deg_out <= 0:
        return 0.0
    chain = np.array([
        [s * p_in / deg_in, (n - s) * p_out / deg_in],
        [s * p_out / deg_out, (n - s) * p_out / deg_out],
    ])
    follow = 1.0 - alpha_ppr
    block_mass = alpha_ppr * np.linalg.solve(np.eye(2) - follow * chain.T,
                                             np.array([1.0, 0.0]))
    mu_in = block_mass[0] / s
    mu_out = block_mass[1] / (n - s)
    return float(mu_in - mu_out)


@dataclass
class TrialOutcome:
    recovery: float
    separation_gap: float
    separation_holds: bool
    resamples: int


@dataclass
class DetectabilityReport:
    spec: SbmSpec
    alpha_ppr: float
    trials: list[TrialOutcome]
    mean_field: float

    @property
    def mean_recovery(self) -> float:
        return float(np.mean([t.recovery for t in self.trials]))

    @property
    def recovery_rate(self) -> float:
        """Fraction of trials recovering at least 60% of the planted group."""
        return float(np.mean([t.recovery >= 0.6 for t in self.trials]))

    @property
    def separation_rate(self) -> float:
        return float(np.mean([t.separation_holds for t in self.trials]))

    def null_rate(self, bound: float) -> float:
        return float(np.mean([t.recovery <= bound for t in self.trials]))


def _is_connected(adjacency: sp.csr_matrix) -> bool:
    n_components = sp.csgraph.connected_components(adjacency, directed=False,
                                                   return_labels=False)
    return n_components == 1


def detectability_trial(spec: SbmSpec, alpha_ppr: float, trials: int,
                        rng: np.random.Generator | None = None) -> DetectabilityReport:
    """Repeated planted-group recovery: seed inside the group, solve, sweep.

    Each trial draws a fresh graph (disconnected samples are redrawn and
    counted), runs the solver from one random planted seed, and sweeps the
    degree-normalized ordering capped at the planted size. Recovery is the
    recovered fraction of the planted set; the separation check asks the
    empirical block-score gap to clear half the mean-field prediction.
    """
    rng = rng or np.random.default_rng(spec.seed)
    config = PprConfig(alpha_ppr=alpha_ppr, tol=1e-10, max_iters=5000)
    gap_ref = mean_field_gap(spec.n, spec.s, spec.p_in, spec.p_out, alpha_ppr)
    outcomes: list[TrialOutcome] = []
    planted = np.arange(spec.s)
    planted_mask = np.zeros(spec.n, dtype=bool)
    planted_mask[planted] = True

    for _ in range(trials):
        resamples = 0
        while True:
            sample_seed = int(rng.integers(2**62))
            adj, _ = sbm_generate(SbmSpec(spec.n, spec.s, spec.p_in, spec.p_out,
                                          seed=sample_seed))
            sparse_adj = sp.csr_matrix(adj)
            if _is_connected(sparse_adj):
                break
            resamples += 1
        seed_node = int(rng.choice(planted))
        p = transition_matrix(sparse_adj)
        v = np.zeros(spec.n)
        v[seed_node] = 1.0
        result = ppr_solve(p, v, config)
        degrees = np.asarray(sparse_adj.sum(axis=1)).ravel()
        recovered, _, _ = sweep_cut(result.scores, degrees, sparse_adj,
                                    max_size=spec.s)
        recovery = len(recovered & set(planted.tolist())) / spec.s
        gap = float(result.scores[planted_mask].mean()
                    - result.scores[~planted_mask].mean())
        outcomes.append(TrialOutcome(
            recovery=recovery,
            separation_gap=gap,
            separation_holds=gap >= 0.5 * gap_ref,
            resamples=resamples,
        ))
    return DetectabilityReport(spec=spec, alpha_ppr=alpha_ppr, trials=outcomes,
                               mean_field=gap_ref)
