"""Per-institution intervention thresholds learned from rewards, with soft
global coordination, economic evaluation, and budget-capped freezing.

Each institution runs an epsilon-greedy bandit over a shared threshold grid.
An initialization sweep scores every grid point on every episode, so the
running value estimates start exact; optional extra rounds keep exploring.
Amounts enter rewards through log1p, which keeps sub-unit transactions from
flipping reward signs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class PolicyError(ValueError):
    pass


class Action(Enum):
    FREEZE = "Freeze"
    MONITOR = "Monitor"
    NO_INTERVENTION = "NoIntervention"


@dataclass(frozen=True)
class RewardConfig:
    a1: float = 3.0   # freeze on illicit
    a2: float = 1.5   # monitor on illicit
    a3: float = 1.0   # missed illicit
    a4: float = 1.0   # freeze on legitimate
    a5: float = 0.1   # monitor on legitimate
    a6: float = 0.5   # leave legitimate alone
    discount: float = 1.0  # episodes are single-shot under the bandit reduction

    def __post_init__(self):
        values = (self.a1, self.a2, self.a3, self.a4, self.a5, self.a6)
        if any(v <= 0 for v in values):
            raise PolicyError("reward weights must be positive")
        if not (self.a1 > self.a2 > self.a3):
            raise PolicyError(f"require a1 > a2 > a3, got {self.a1}, {self.a2}, {self.a3}")
        if not (self.a4 >= self.a6 > self.a5):
            raise PolicyError(f"require a4 >= a6 > a5, got {self.a4}, {self.a6}, {self.a5}")


def reward(label: int, action: Action, amount: float, config: RewardConfig) -> float:
    """Six-case reward table; amount-sensitive terms use log1p(amount)."""
    scale = math.log1p(max(amount, 0.0))
    if label == 1:
        if action is Action.FREEZE:
            return config.a1 * scale
        if action is Action.MONITOR:
            return config.a2 * scale
        if action is Action.NO_INTERVENTION:
            return -config.a3 * scale
    elif label == 0:
        if action is Action.FREEZE:
            return -config.a4
        if action is Action.MONITOR:
            return -config.a5
        if action is Action.NO_INTERVENTION:
            return config.a6
    raise PolicyError(f"unknown action/label combination ({label}, {action})")


def decide(score: float, tau: float, monitor_band: float = 0.0) -> Action:
    """Freeze at or above the threshold; a band just below maps to Monitor."""
    if score >= tau:
        return Action.FREEZE
    if score >= tau - monitor_band:
        return Action.MONITOR
    return Action.NO_INTERVENTION


def default_grid(size: int = 25, low: float = 0.05, high: float = 0.95) -> np.ndarray:
    """Logit-uniform threshold grid inside (0, 1)."""
    def logit(x):
        return math.log(x / (1.0 - x))
    pts = np.linspace(logit(low), logit(high), size)
    return 1.0 / (1.0 + np.exp(-pts))


@dataclass
class Episode:
    """One batch of scored, labeled, amount-bearing edges."""
    scores: np.ndarray
    labels: np.ndarray
    amounts: np.ndarray

    def __len__(self):
        return len(self.scores)


def episode_reward(episode: Episode, tau: float, config: RewardConfig,
                   monitor_band: float) -> float:
    total = 0.0
    for score, label, amount in zip(episode.scores, episode.labels, episode.amounts):
        total += reward(int(label), decide(float(score), tau, monitor_band), float(amount),
                        config)
    return total


@dataclass
class InstitutionPolicy:
    grid: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    tau: float

    def value_table(self) -> dict[float, float]:
        return {float(g): float(v) for g, v in zip(self.grid, self.values)}


@dataclass
class ThresholdPolicy:
    grid: np.ndarray
    institutions: dict[str, InstitutionPolicy] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)
    eta_g: float = 0.25
    xi: float = 1.0
    lambda_c: float = 0.0

    def taus(self) -> dict[str, float]:
        return {name: pol.tau for name, pol in self.institutions.items()}


def _argmax_lowest(grid: np.ndarray, values: np.ndarray) -> int:
    """Index of the maximum value; ties resolve to the lower threshold."""
    best = np.max(values)
    candidates = np.flatnonzero(values >= best - 1e-15)
    return int(candidates[np.argmin(grid[candidates])])


def train_policy(episodes_by_institution: dict[str, list[Episode]],
                 reward_config: RewardConfig,
                 grid: np.ndarray | None = None,
                 monitor_band: float = 0.1,
                 epsilon: float = 0.1,
                 extra_rounds: int = 0,
                 weights: dict[str, float] | None = None,
                 seed: int = 0,
                 lambda_c: float = 0.0,
                 eta_g: float = 0.25,
                 xi: float = 1.0) -> ThresholdPolicy:
    """Learn one threshold per institution by bandit value iteration.

    The first sweep plays every arm on every episode, making the value table
    the exact mean episode reward per grid point; ``extra_rounds`` adds
    epsilon-greedy passes on top. Institutions with no usable episodes are
    skipped with a warning entry (tau stays at the grid midpoint).
    """
    if not episodes_by_institution:
        raise PolicyError("train_policy: no institutions")
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or len(grid) == 0:
        raise PolicyError("train_policy: empty threshold grid")
    rng = np.random.default_rng(seed)
    policy = ThresholdPolicy(grid=grid, eta_g=eta_g, xi=xi, lambda_c=lambda_c)

    for name in sorted(episodes_by_institution):
        episodes = [e for e in episodes_by_institution[name] if len(e)]
        values = np.zeros(len(grid))
        counts = np.zeros(len(grid))
        if not episodes:
            policy.institutions[name] = InstitutionPolicy(
                grid=grid, values=values, counts=counts,
                tau=float(grid[len(grid) // 2]))
            continue

        # initialization sweep: exact mean reward for every arm
        for arm, tau in enumerate(grid):
            for episode in episodes:
                r = episode_reward(episode, float(tau), reward_config, monitor_band)
                counts[arm] += 1
                values[arm] += (r - values[arm]) / counts[arm]

        for _ in range(extra_rounds):
            for episode in episodes:
                if rng.random() < epsilon:
                    arm = int(rng.integers(len(grid)))
                else:
                    arm = _argmax_lowest(grid, values)
                r = episode_reward(episode, float(grid[arm]), reward_config, monitor_band)
                counts[arm] += 1
                values[arm] += (r - values[arm]) / counts[arm]

        tau = float(grid[_argmax_lowest(grid, values)])
        policy.institutions[name] = InstitutionPolicy(grid=grid, values=values,
                                                      counts=counts, tau=tau)

    names = sorted(policy.institutions)
    if weights is None:
        policy.weights = {n: 1.0 / len(names) for n in names}
    else:
        total = sum(weights.get(n, 0.0) for n in names)
        if total <= 0:
            raise PolicyError("train_policy: nonpositive institution weights")
        policy.weights = {n: weights.get(n, 0.0) / total for n in names}
    return policy


def coordinate(policy: ThresholdPolicy, snap: bool = True) -> dict[str, float]:
    """One soft-coordination update pulling every tau toward the weighted mean.

    Returns diagnostics: the pre-update coupling penalty (threshold spread plus
    the KL term between local and global value softmaxes).
    """
    names = sorted(policy.institutions)
    w = np.array([policy.weights[n] for n in names])
    if abs(w.sum() - 1.0) > 1e-9:
        raise PolicyError(f"coordinate: weights sum to {w.sum()}, expected 1")
    if not 0.0 <= policy.eta_g <= 1.0:
        raise PolicyError(f"coordinate: eta_g {policy.eta_g} outside [0,1]")
    taus = np.array([policy.institutions[n].tau for n in names])
    tau_bar = float(w @ taus)

    spread = float(((taus - tau_bar) ** 2).sum())
    value_rows = np.stack([policy.institutions[n].values for n in names])
    global_soft = _softmax(value_rows.mean(axis=0))
    kl_total = sum(_kl(_softmax(row), global_soft) for row in value_rows)
    diagnostics = {"tau_bar": tau_bar, "spread": spread, "kl": kl_total,
                   "coupling": spread + policy.xi * kl_total}

    for name, tau in zip(names, taus):
        updated = tau + policy.eta_g * (tau_bar - tau)
        if snap:
            updated = float(policy.grid[np.argmin(np.abs(policy.grid - updated))])
        policy.institutions[name].tau = float(updated)
    return diagnostics


def coupling_adjusted_values(policy: ThresholdPolicy, name: str) -> np.ndarray:
    """Arm values with the coupling penalty folded in (used when lambda_c > 0)."""
    inst = policy.institutions[name]
    names = sorted(policy.institutions)
    w = np.array([policy.weights[n] for n in names])
    taus = np.array([policy.institutions[n].tau for n in names])
    tau_bar = float(w @ taus)
    return inst.values - policy.lambda_c * (inst.grid - tau_bar) ** 2


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max())
    return z / z.sum()


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Decision:
    edge_id: int
    action: Action
    score: float
    amount: float
    label: int


def apply_policy(scores, labels, amounts, edge_ids, tau: float,
                 monitor_band: float = 0.0) -> list[Decision]:
    return [Decision(edge_id=int(e), action=decide(float(s), tau, monitor_band),
                     score=float(s), amount=float(a), label=int(y))
            for s, y, a, e in zip(scores, labels, amounts, edge_ids)]


@dataclass
class EconomicReport:
    total_loss: float
    prevented_loss: float
    prevented_ratio: float
    type1: float | None
    type2: float | None
    monitored_legit_rate: float | None
    n_frozen: int


def economic_eval(decisions: list[Decision]) -> EconomicReport:
    """Prevented-loss accounting plus intervention error rates.

    Type I counts freezes of legitimate edges; monitoring of legitimate edges
    is reported separately. Type II counts illicit edges left untouched.
    """
    total_loss = sum(d.amount for d in decisions if d.label == 1)
    prevented = sum(d.amount for d in decisions
                    if d.label == 1 and d.action is Action.FREEZE)
    legit = [d for d in decisions if d.label == 0]
    illicit = [d for d in decisions if d.label == 1]
    type1 = (sum(d.action is Action.FREEZE for d in legit) / len(legit)
             if legit else None)
    monitored = (sum(d.action is Action.MONITOR for d in legit) / len(legit)
                 if legit else None)
    type2 = (sum(d.action is Action.NO_INTERVENTION for d in illicit) / len(illicit)
             if illicit else None)
    ratio = prevented / total_loss if total_loss > 0 else 0.0
    return EconomicReport(
        total_loss=total_loss, prevented_loss=prevented, prevented_ratio=ratio,
        type1=type1, type2=type2, monitored_legit_rate=monitored,
        n_frozen=sum(d.action is Action.FREEZE for d in decisions))


def budget_select(scores, amounts, edge_ids, budget_fraction: float) -> set[int]:
    """Freeze the top floor(fraction * N) edges by score.

    Ties prefer the larger amount, then the smaller edge id.
    """
    if not 0.0 < budget_fraction <= 1.0:
        raise PolicyError(f"budget_fraction {budget_fraction} outside (0,1]")
    scores = np.asarray(scores, dtype=np.float64)
    amounts = np.asarray(amounts, dtype=np.float64)
    edge_ids = np.asarray(edge_ids)
    cap = int(math.floor(budget_fraction * len(scores)))
    order = np.lexsort((edge_ids, -amounts, -scores))
    return set(edge_ids[order[:cap]].tolist())
