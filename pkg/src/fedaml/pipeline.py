"""File-based pipeline stages: generate, train, detect, ppr, propagate,
decide, report.

Each stage consumes the previous stage's artifacts and writes its own, so any
step can be rerun or audited in isolation. All stages are deterministic given
the run config and seed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import federation as fed
from . import labelprop as lp
from . import metrics as mt
from . import model as mdl
from . import policy as pol
from . import ppr as pr
from . import report as rp
from .autodiff import load_params, save_params
from .data import (DataError, SyntheticPatternSpec, TransactionRecord, ingest_csv,
                   generate_pattern_records, scale_collection_features, split_records,
                   write_csv)
from .graphs import GraphCollection, build_collection


class ArtifactError(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class DataSection:
    split: str = "fraction"
    train_fraction: float = 0.3
    normalization: str = "global-level"
    fixed_min: float | None = None
    fixed_max: float | None = None
    source_country: str | None = None
    log_amounts: bool = False


@dataclass
class EncoderSection:
    layers: int = 2
    hidden_dim: int = 8
    mlp_hidden: list[int] = field(default_factory=lambda: [8])
    membership_clusters: int = 4


@dataclass
class LossSection:
    alpha: float = 0.25
    gamma_focal: float = 2.0
    beta: float = 1.0
    lambda1: float = 0.1
    lambda2: float = 0.1
    use_bce: bool = False


@dataclass
class FederationSection:
    rounds: int = 120
    comm_frequency: int = 4
    lr: float = 0.3
    weighted_average: bool = False


@dataclass
class PprSection:
    alpha_ppr: float = 0.15
    tol: float = 1e-10
    max_iters: int = 2000
    score_threshold: float = 0.5
    seed_score_threshold: float = 0.5
    max_seeds: int = 10
    cross_bank: bool = True
    directed: bool = False


@dataclass
class LabelPropSection:
    alpha: float = 0.85
    alpha_lp: float = 0.3
    tol: float = 1e-9
    max_iters: int = 500
    node_score_mode: str = "incident"
    use_clusters: bool = True


@dataclass
class PolicySection:
    grid_size: int = 25
    grid_low: float = 0.05
    grid_high: float = 0.95
    monitor_band: float = 0.1
    epsilon: float = 0.1
    extra_rounds: int = 0
    eta_g: float = 0.25
    coordination_rounds: int = 2
    episodes: int = 8
    xi: float = 1.0
    lambda_c: float = 0.0
    rewards: dict = field(default_factory=lambda: {
        "a1": 3.0, "a2": 1.5, "a3": 1.0, "a4": 1.0, "a5": 0.1, "a6": 0.5})


@dataclass
class RunConfig:
    seed: int = 7
    data: DataSection = field(default_factory=DataSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    loss: LossSection = field(default_factory=LossSection)
    federation: FederationSection = field(default_factory=FederationSection)
    ppr: PprSection = field(default_factory=PprSection)
    labelprop: LabelPropSection = field(default_factory=LabelPropSection)
    policy: PolicySection = field(default_factory=PolicySection)


_SECTIONS = {"data": DataSection, "encoder": EncoderSection, "loss": LossSection,
             "federation": FederationSection, "ppr": PprSection,
             "labelprop": LabelPropSection, "policy": PolicySection}


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from JSON, rejecting unknown keys at every level."""
    raw: dict = {}
    if path is not None:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise DataError(f"{path}: config must be a JSON object")
    if overrides:
        for key, value in overrides.items():
            if isinstance(value, dict):
                raw.setdefault(key, {}).update(value)
            else:
                raw[key] = value

    config = RunConfig()
    for key, value in raw.items():
        if key == "seed":
            config.seed = int(value)
            continue
        if key not in _SECTIONS:
            raise DataError(f"config: unknown section {key!r}")
        section_cls = _SECTIONS[key]
        section = getattr(config, key)
        known = set(section.__dataclass_fields__)
        for sub_key, sub_value in value.items():
            if sub_key not in known:
                raise DataError(f"config: unknown key {key}.{sub_key}")
            setattr(section, sub_key, sub_value)
        _ = section_cls  # sections mutate in place
    return config


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(asdict(config), indent=2), encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic dataset generation
# ---------------------------------------------------------------------------

PAYMENT_TYPES = ("wire", "ach", "card", "cheque")


@dataclass
class DatasetSpec:
    countries: tuple[str, ...] = ("US", "DE", "FR")
    accounts_per_country: int = 300
    background_edges: int = 5000
    cross_border_fraction: float = 0.08
    amount_low: float = 10.0
    amount_high: float = 50_000.0
    illicit_amount_low: float = 30_000.0
    illicit_amount_high: float = 90_000.0
    patterns: tuple[tuple[str, int], ...] = (("fan-out", 8), ("loop", 6),
                                             ("gather-scatter", 8), ("hybrid", 9))
    pattern_countries: int = 2   # countries spanned by each pattern
    # legitimate burst structures (payroll-like) that overlap the illicit
    # amount band; zero by default
    decoy_patterns: tuple[tuple[str, int], ...] = ()
    decoy_amount_low: float = 15_000.0
    decoy_amount_high: float = 60_000.0
    seed: int = 7


def synthesize_dataset(spec: DatasetSpec) -> tuple[list[TransactionRecord], list[set[str]]]:
    """Background traffic plus injected laundering groups.

    Background edges are legitimate transfers with log-uniform amounts;
    injected patterns carry larger amounts and hub-like structure. Returns the
    timestamp-sorted records and the injected account groups.
    """
    rng = np.random.default_rng(spec.seed)
    countries = list(spec.countries)
    records: list[TransactionRecord] = []
    horizon = max(spec.background_edges * 2, 1000)

    log_low, log_high = np.log(spec.amount_low), np.log(spec.amount_high)
    for _ in range(spec.background_edges):
        origin = countries[int(rng.integers(len(countries)))]
        dest = origin
        if len(countries) > 1 and rng.random() < spec.cross_border_fraction:
            others = [c for c in countries if c != origin]
            dest = others[int(rng.integers(len(others)))]
        src = f"acct{int(rng.integers(spec.accounts_per_country))}"
        dst = f"acct{int(rng.integers(spec.accounts_per_country))}"
        if origin == dest and src == dst:
            dst = f"acct{(int(dst[4:]) + 1) % spec.accounts_per_country}"
        records.append(TransactionRecord(
            timestamp=int(rng.integers(horizon)),
            from_bank=origin, from_account=src, to_bank=dest, to_account=dst,
            amount=float(np.exp(rng.uniform(log_low, log_high))),
            payment_type=PAYMENT_TYPES[int(rng.integers(len(PAYMENT_TYPES)))],
            is_laundering=0,
        ))

    groups: list[set[str]] = []
    offset = 0
    jobs = ([(p, s, 1, (spec.illicit_amount_low, spec.illicit_amount_high))
             for p, s in spec.patterns]
            + [(p, s, 0, (spec.decoy_amount_low, spec.decoy_amount_high))
               for p, s in spec.decoy_patterns])
    for pattern, size, label, amount_range in jobs:
        span = min(spec.pattern_countries, len(countries))
        start = int(rng.integers(len(countries)))
        chosen = tuple(countries[(start + i) % len(countries)] for i in range(span))
        pattern_spec = SyntheticPatternSpec(
            pattern=pattern, group_size=size, countries=chosen,
            amount_range=amount_range)
        new_records, group = generate_pattern_records(
            pattern_spec, rng, start_timestamp=int(rng.integers(horizon)),
            account_offset=offset, label=label)
        offset += size
        records.extend(new_records)
        if label == 1:
            groups.append(group)

    records.sort(key=lambda r: (r.timestamp, r.from_bank, r.from_account, r.to_account))
    return records, groups


# ---------------------------------------------------------------------------
# stage helpers
# ---------------------------------------------------------------------------

def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise ArtifactError(f"{stage}: missing upstream artifact {path}")
    return path


def load_collection(csv_path, config: RunConfig) -> tuple[GraphCollection, np.ndarray]:
    """Ingest, split, scale: the common preamble of every graph stage."""
    records = ingest_csv(csv_path)
    if not records:
        raise DataError(f"{csv_path}: no transactions")
    train_mask = split_records(records, mode=config.data.split,
                               train_fraction=config.data.train_fraction,
                               seed=config.seed)
    collection = build_collection(records)
    scale_collection_features(
        collection, config.data.normalization,
        source_country=config.data.source_country,
        rng=np.random.default_rng(config.seed),
        fixed_min=config.data.fixed_min, fixed_max=config.data.fixed_max,
        log_amounts=config.data.log_amounts)
    return collection, train_mask


def malicious_accounts(records) -> set[str]:
    out = set()
    for rec in records:
        if rec.is_laundering == 1:
            out.add(f"{rec.from_bank}:{rec.from_account}")
            out.add(f"{rec.to_bank}:{rec.to_account}")
    return out


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_generate(out_dir, spec: DatasetSpec) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, groups = synthesize_dataset(spec)
    csv_path = out_dir / "transactions.csv"
    write_csv(csv_path, records)
    truth_dir = out_dir / "truth"
    truth_dir.mkdir(exist_ok=True)
    for i, group in enumerate(groups):
        (truth_dir / f"group_{i:02d}.txt").write_text(
            "\n".join(sorted(group)) + "\n", encoding="utf-8")
    combined = sorted(set().union(*groups)) if groups else []
    (truth_dir / "malicious_accounts.txt").write_text(
        "\n".join(combined) + ("\n" if combined else ""), encoding="utf-8")
    return {"transactions": str(csv_path), "groups": len(groups),
            "records": len(records)}


def stage_train(csv_path, out_dir, config: RunConfig) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    collection, train_mask = load_collection(_require(Path(csv_path), "train"), config)

    masks = {c: train_mask[g.record_ids] for c, g in collection.graphs.items()}
    enc_cfg = mdl.EncoderConfig(
        layers=config.encoder.layers, hidden_dim=config.encoder.hidden_dim,
        input_dim=next(iter(collection.graphs.values())).node_features.shape[1],
        edge_feature_dim=next(iter(collection.graphs.values())).edge_features.shape[1],
        mlp_hidden=tuple(config.encoder.mlp_hidden),
        membership_clusters=config.encoder.membership_clusters)
    loss_cfg = mdl.LossConfig(alpha=config.loss.alpha, gamma_focal=config.loss.gamma_focal,
                              beta=config.loss.beta, lambda1=config.loss.lambda1,
                              lambda2=config.loss.lambda2, use_bce=config.loss.use_bce)
    fed_cfg = fed.FederationConfig(rounds=config.federation.rounds,
                                   comm_frequency=config.federation.comm_frequency,
                                   lr=config.federation.lr, seed=config.seed,
                                   weighted_average=config.federation.weighted_average)
    result = fed.run_federation(collection, fed_cfg, enc_cfg, loss_cfg, masks)

    ckpt = out_dir / "model.ckpt"
    save_params(result.global_params, ckpt)
    metrics_path = out_dir / "train_metrics.csv"
    with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "client", "loss", "auroc", "auprc", "type1", "type2"])
        for row in result.history:
            writer.writerow([row["round"], row["client"], f"{row['loss']:.6f}",
                             _opt(row.get("auroc")), _opt(row.get("auprc")),
                             _opt(row.get("type1")), _opt(row.get("type2"))])
    return {"checkpoint": str(ckpt), "metrics": str(metrics_path),
            "rounds": config.federation.rounds}


def _opt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def stage_detect(csv_path, checkpoint, out_dir, config: RunConfig) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    collection, _ = load_collection(_require(Path(csv_path), "detect"), config)
    params = load_params(_require(Path(checkpoint), "detect"))

    n_records = len(collection.records)
    scores = np.zeros(n_records)
    labels = np.zeros(n_records, dtype=int)
    enc_cfg = None
    for country, graph in collection.graphs.items():
        bundle = mdl.build_bundle(graph)
        if enc_cfg is None:
            enc_cfg = mdl.EncoderConfig(
                layers=config.encoder.layers, hidden_dim=config.encoder.hidden_dim,
                input_dim=graph.node_features.shape[1],
                edge_feature_dim=graph.edge_features.shape[1],
                mlp_hidden=tuple(config.encoder.mlp_hidden),
                membership_clusters=config.encoder.membership_clusters)
        y_hat = mdl.predict_edges(bundle, params, enc_cfg).data.ravel()
        origin = np.array([collection.records[r].from_bank for r in graph.record_ids])
        own = origin == country  # canonical score comes from the origin country's graph
        scores[graph.record_ids[own]] = y_hat[own]
        labels[graph.record_ids[own]] = graph.edge_labels[own]

    scores_path = out_dir / "scores.csv"
    write_scores(scores_path, scores, labels)
    return {"scores": str(scores_path), "edges": n_records}


def write_scores(path, scores, labels) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["edge_id", "score", "label"])
        for i, (s, y) in enumerate(zip(scores, labels)):
            writer.writerow([i, f"{float(s):.10f}", int(y)])


def read_scores(path) -> tuple[np.ndarray, np.ndarray]:
    scores, labels = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            scores.append(float(row["score"]))
            labels.append(int(row["label"]))
    return np.asarray(scores), np.asarray(labels, dtype=int)


def _collapsed_prediction_matrix(graph, edge_scores: np.ndarray,
                                 undirected: bool) -> sp.csr_matrix:
    """Per-pair suspicion: max prediction over parallel edges."""
    n = graph.n_nodes
    best: dict[tuple[int, int], float] = {}
    for u, v, s in zip(graph.src, graph.dst, edge_scores):
        key = (int(u), int(v))
        if best.get(key, -1.0) < s:
            best[key] = float(s)
    if undirected:
        sym: dict[tuple[int, int], float] = {}
        for (u, v), s in best.items():
            for key in ((u, v), (v, u)):
                if sym.get(key, -1.0) < s:
                    sym[key] = s
        best = sym
    if not best:
        return sp.csr_matrix((n, n))
    rows, cols, vals = zip(*[(u, v, s) for (u, v), s in sorted(best.items())])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def cluster_accounts(collection: GraphCollection, record_scores: np.ndarray,
                     section: PprSection, truth: set[str] | None = None,
                     cross_bank: bool | None = None) -> pr.ClusterSet:
    """Seeded PPR per country, then cross-country merge.

    Seeds are the hottest accounts by incident-edge score. The cross-bank
    variant reweights transitions with edge predictions and adds teleport mass
    on boundary accounts flagged from abroad.
    """
    use_cross = section.cross_bank if cross_bank is None else cross_bank
    config = pr.PprConfig(alpha_ppr=section.alpha_ppr, tol=section.tol,
                          max_iters=section.max_iters,
                          score_threshold=section.score_threshold)
    dictionaries: dict[str, dict[str, set[str]]] = {}
    for country, graph in collection.graphs.items():
        if graph.n_edges == 0:
            continue
        edge_scores = record_scores[graph.record_ids]
        node_scores = lp.node_scores_from_edges(graph, edge_scores)
        adj = (graph.weighted_adjacency() if section.directed
               else graph.undirected_adjacency())
        if use_cross:
            a_hat = _collapsed_prediction_matrix(graph, edge_scores,
                                                 undirected=not section.directed)
            p = pr.cross_bank_transition(adj, a_hat)
        else:
            p = pr.transition_matrix(adj)

        cross_scores: dict[int, float] = {}
        if use_cross:
            position = {key: i for i, key in enumerate(graph.accounts)}
            for entry in collection.supernodes.for_country(country):
                flagged = max((record_scores[rid] for rid in entry.cross_border_edge_ids),
                              default=0.0)
                if flagged >= section.seed_score_threshold:
                    for acct in (entry.home_account, entry.foreign_account):
                        node = position.get(acct)
                        if node is not None:
                            cross_scores[node] = max(cross_scores.get(node, 0.0),
                                                     float(flagged))

        # seed ranking: foreign corroboration promotes an account, so locally
        # hot but uncorroborated accounts lose their seed slot to flagged ones
        seed_rank = node_scores.copy()
        for node, weight in cross_scores.items():
            seed_rank[node] += weight
        hot = np.argsort(-seed_rank, kind="mergesort")
        seeds = [int(i) for i in hot[:section.max_seeds]
                 if node_scores[i] >= section.seed_score_threshold]
        clusters: dict[str, set[str]] = {}
        for seed_node in seeds:
            v_local, v_cross = pr.build_personalization(
                graph.n_nodes, {seed_node: float(node_scores[seed_node])},
                cross_scores if use_cross else None)
            try:
                result = pr.ppr_solve(p, v_local + v_cross, config)
            except pr.PprError:
                continue
            members = pr.extract_cluster(result, config.score_threshold)
            accounts = {graph.accounts[i] for i in members}
            clusters[graph.accounts[seed_node]] = accounts
        if clusters:
            dictionaries[country] = clusters

    merged = pr.merge_clusters(dictionaries)
    if truth:
        merged = merged.with_hits(truth)
    return merged


def stage_ppr(csv_path, scores_path, out_dir, config: RunConfig) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    collection, _ = load_collection(_require(Path(csv_path), "ppr"), config)
    record_scores, _ = read_scores(_require(Path(scores_path), "ppr"))
    if len(record_scores) != len(collection.records):
        raise DataError("ppr: scores file does not match the transaction file")
    truth = malicious_accounts(collection.records)
    clusters = cluster_accounts(collection, record_scores, config.ppr, truth=truth)
    path = out_dir / "clusters.csv"
    write_clusters(path, clusters)
    return {"clusters": str(path), "count": len(clusters.clusters)}


def write_clusters(path, clusters: pr.ClusterSet) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cluster_id", "seed", "accounts", "countries", "hit_count"])
        for c in clusters.clusters:
            writer.writerow([c.cluster_id, c.seed, ",".join(sorted(c.accounts)),
                             ",".join(c.countries), c.hit_count])


def read_clusters(path) -> pr.ClusterSet:
    out = pr.ClusterSet()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.clusters.append(pr.Cluster(
                cluster_id=row["cluster_id"], seed=row["seed"],
                accounts=frozenset(a for a in row["accounts"].split(",") if a),
                countries=tuple(c for c in row["countries"].split(",") if c),
                hit_count=int(row["hit_count"])))
    return out


def stage_propagate(csv_path, scores_path, clusters_path, out_dir,
                    config: RunConfig) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    collection, _ = load_collection(_require(Path(csv_path), "propagate"), config)
    record_scores, labels = read_scores(_require(Path(scores_path), "propagate"))
    clusters = None
    if config.labelprop.use_clusters:
        clusters = read_clusters(_require(Path(clusters_path), "propagate"))

    lp_cfg = lp.PropagationConfig(alpha=config.labelprop.alpha,
                                  alpha_lp=config.labelprop.alpha_lp,
                                  tol=config.labelprop.tol,
                                  max_iters=config.labelprop.max_iters)
    refined = record_scores.copy()
    for country, graph in collection.graphs.items():
        if graph.n_edges == 0:
            continue
        edge_scores = record_scores[graph.record_ids]
        new_scores = lp.refine_graph_scores(graph, edge_scores, clusters, lp_cfg,
                                            mode=config.labelprop.node_score_mode)
        origin = np.array([collection.records[r].from_bank for r in graph.record_ids])
        own = origin == country
        refined[graph.record_ids[own]] = new_scores[own]

    path = out_dir / "refined_scores.csv"
    write_scores(path, refined, labels)
    return {"refined_scores": str(path)}


def stage_decide(csv_path, scores_path, out_dir, config: RunConfig,
                 fixed_threshold: float | None = None,
                 budget_fraction: float | None = None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = ingest_csv(_require(Path(csv_path), "decide"))
    record_scores, labels = read_scores(_require(Path(scores_path), "decide"))
    if len(record_scores) != len(records):
        raise DataError("decide: scores file does not match the transaction file")
    train_mask = split_records(records, mode=config.data.split,
                               train_fraction=config.data.train_fraction,
                               seed=config.seed)

    markets = sorted({rec.from_bank for rec in records})
    amounts = np.array([rec.amount for rec in records])
    by_market = {m: np.array([i for i, rec in enumerate(records) if rec.from_bank == m])
                 for m in markets}

    section = config.policy
    reward_cfg = pol.RewardConfig(**section.rewards)
    grid = pol.default_grid(section.grid_size, section.grid_low, section.grid_high)

    taus: dict[str, float]
    if fixed_threshold is not None:
        taus = {m: float(fixed_threshold) for m in markets}
        band = 0.0
    else:
        episodes_by_market = {}
        volumes = {}
        for market in markets:
            train_ids = by_market[market][train_mask[by_market[market]]]
            episodes_by_market[market] = _chunk_episodes(
                record_scores[train_ids], labels[train_ids], amounts[train_ids],
                section.episodes)
            volumes[market] = float(len(by_market[market]))
        policy = pol.train_policy(
            episodes_by_market, reward_cfg, grid=grid,
            monitor_band=section.monitor_band, epsilon=section.epsilon,
            extra_rounds=section.extra_rounds, weights=volumes, seed=config.seed,
            lambda_c=section.lambda_c, eta_g=section.eta_g, xi=section.xi)
        for _ in range(section.coordination_rounds):
            pol.coordinate(policy)
        taus = policy.taus()
        band = section.monitor_band

    decisions: list[pol.Decision] = []
    economic_rows: list[dict] = []
    test_ids_all: list[int] = []
    for market in markets:
        ids = by_market[market][~train_mask[by_market[market]]]
        test_ids_all.extend(ids.tolist())
        market_decisions = pol.apply_policy(record_scores[ids], labels[ids],
                                            amounts[ids], ids, taus[market], band)
        if budget_fraction is not None:
            frozen = pol.budget_select(record_scores[ids], amounts[ids], ids,
                                       budget_fraction)
            market_decisions = [
                pol.Decision(d.edge_id,
                             pol.Action.FREEZE if d.edge_id in frozen
                             else pol.Action.NO_INTERVENTION,
                             d.score, d.amount, d.label)
                for d in market_decisions]
        decisions.extend(market_decisions)
        row = {"market": market, "threshold": taus[market]}
        row.update(_economic_dict(pol.economic_eval(market_decisions)))
        economic_rows.append(row)

    overall = {"market": "Overall",
               "threshold": float(np.mean([taus[m] for m in markets]))}
    overall.update(_economic_dict(pol.economic_eval(decisions)))
    economic_rows.append(overall)

    decisions_path = out_dir / "decisions.csv"
    with open(decisions_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["edge_id", "score", "action", "amount", "label"])
        for d in sorted(decisions, key=lambda d: d.edge_id):
            writer.writerow([d.edge_id, f"{d.score:.10f}", d.action.value,
                             repr(d.amount), d.label])
    economic_path = out_dir / "economic_report.csv"
    rp.write_economic_table(economic_rows, economic_path)
    return {"decisions": str(decisions_path), "economic_report": str(economic_path),
            "thresholds": taus}


def _chunk_episodes(scores, labels, amounts, n_episodes: int) -> list[pol.Episode]:
    n = len(scores)
    if n == 0:
        return []
    n_episodes = max(1, min(n_episodes, n))
    bounds = np.linspace(0, n, n_episodes + 1, dtype=int)
    return [pol.Episode(scores[a:b], labels[a:b], amounts[a:b])
            for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _economic_dict(report: pol.EconomicReport) -> dict:
    return {"total_loss": report.total_loss, "prevented_loss": report.prevented_loss,
            "prevented_ratio": report.prevented_ratio, "type1": report.type1,
            "type2": report.type2, "monitored_legit_rate": report.monitored_legit_rate,
            "n_frozen": report.n_frozen}


def stage_report(csv_path, out_dir, config: RunConfig, scores_path=None,
                 train_metrics_path=None, economic_path=None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = ingest_csv(_require(Path(csv_path), "report"))
    train_mask = split_records(records, mode=config.data.split,
                               train_fraction=config.data.train_fraction,
                               seed=config.seed)

    metric_report = None
    scores = labels = None
    if scores_path and Path(scores_path).exists():
        scores, labels = read_scores(scores_path)
        test = ~train_mask
        markets = sorted({rec.from_bank for rec in records})
        scores_by_market = {}
        labels_by_market = {}
        for market in markets:
            ids = np.array([i for i, rec in enumerate(records)
                            if rec.from_bank == market and test[i]])
            if len(ids):
                scores_by_market[market] = scores[ids]
                labels_by_market[market] = labels[ids]
        if scores_by_market:
            metric_report = mt.evaluation_report(scores_by_market, labels_by_market)

    history = None
    if train_metrics_path and Path(train_metrics_path).exists():
        history = []
        with open(train_metrics_path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                history.append({
                    "round": int(row["round"]), "client": row["client"],
                    "loss": float(row["loss"]),
                    "auprc": float(row["auprc"]) if row["auprc"] else None})

    economic_rows = None
    if economic_path and Path(economic_path).exists():
        with open(economic_path, newline="", encoding="utf-8") as fh:
            economic_rows = list(csv.DictReader(fh))
        for row in economic_rows:
            row["prevented_ratio"] = float(row["prevented_ratio"] or 0)

    written = rp.render_all(out_dir, metric_report=metric_report, history=history,
                            scores=scores if scores is not None else None,
                            labels=labels if labels is not None else None,
                            economic_rows=economic_rows)
    return {"written": written}
