"""Transaction ingestion, normalization strategies, and synthetic generators.

The CSV schema is fixed to eight columns; extra columns from richer exports
are accepted and ignored. Normalization supports per-country, pooled-global,
and shared fixed-value min-max scaling, the last of which lets institutions
agree on one (min, max) pair without pooling raw data.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .graphs import GraphCollection, build_collection

CSV_COLUMNS = ["timestamp", "from_bank", "from_account", "to_bank", "to_account",
               "amount", "payment_type", "is_laundering"]

STRATEGIES = ("country-level", "global-level", "fixed-value")
PATTERNS = ("fan-out", "loop", "gather-scatter", "hybrid")


class DataError(ValueError):
    """Raised for malformed input files or records."""


@dataclass(frozen=True)
class TransactionRecord:
    timestamp: int
    from_bank: str
    from_account: str
    to_bank: str
    to_account: str
    amount: float
    payment_type: str
    is_laundering: int


def validate_record(rec: TransactionRecord) -> str | None:
    """Return a problem description, or None when the record is well-formed."""
    for name in ("from_bank", "from_account", "to_bank", "to_account"):
        if not getattr(rec, name):
            return f"missing field {name}"
    if rec.amount < 0:
        return f"negative amount {rec.amount}"
    if rec.is_laundering not in (0, 1):
        return f"label {rec.is_laundering} not in {{0,1}}"
    return None


def ingest_csv(path) -> list[TransactionRecord]:
    """Parse a transaction CSV, preserving file order and row numbers in errors."""
    records: list[TransactionRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        for row_no, row in enumerate(reader, start=2):
            try:
                rec = TransactionRecord(
                    timestamp=int(row["timestamp"]),
                    from_bank=row["from_bank"],
                    from_account=row["from_account"],
                    to_bank=row["to_bank"],
                    to_account=row["to_account"],
                    amount=float(row["amount"]),
                    payment_type=row["payment_type"],
                    is_laundering=int(row["is_laundering"]),
                )
            except (TypeError, ValueError, KeyError) as exc:
                raise DataError(f"{path}: row {row_no}: unparsable row ({exc})") from exc
            problem = validate_record(rec)
            if problem:
                raise DataError(f"{path}: row {row_no}: {problem}")
            records.append(rec)
    return records


def write_csv(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow([rec.timestamp, rec.from_bank, rec.from_account, rec.to_bank,
                             rec.to_account, repr(rec.amount), rec.payment_type,
                             rec.is_laundering])


def apply_country_buckets(records, mapping: dict[str, str], default: str | None = None):
    """Rewrite bank codes through a country->partition map.

    Account ids are requalified with their original bank so two banks merged
    into one bucket cannot collide on opaque ids.
    """
    out = []
    for rec in records:
        fb = mapping.get(rec.from_bank, default or rec.from_bank)
        tb = mapping.get(rec.to_bank, default or rec.to_bank)
        out.append(replace(
            rec,
            from_bank=fb, from_account=f"{rec.from_bank}.{rec.from_account}",
            to_bank=tb, to_account=f"{rec.to_bank}.{rec.to_account}",
        ))
    return out


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationSpec:
    strategy: str
    min: float
    max: float
    source_country: str | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise DataError(f"unknown normalization strategy {self.strategy!r}")
        if not self.max > self.min:
            raise DataError(f"degenerate normalization spec: max {self.max} <= min {self.min}")


def normalize(values, spec: NormalizationSpec) -> np.ndarray:
    """Min-max scale into [0,1]; out-of-range values are clamped."""
    values = np.asarray(values, dtype=np.float64)
    scaled = (values - spec.min) / (spec.max - spec.min)
    return np.clip(scaled, 0.0, 1.0)


def fit_normalization(values_by_country: dict[str, np.ndarray], strategy: str,
                      source_country: str | None = None,
                      rng: np.random.Generator | None = None,
                      fixed_min: float | None = None,
                      fixed_max: float | None = None) -> dict[str, NormalizationSpec]:
    """Fit one NormalizationSpec per country for the chosen strategy.

    country-level uses each subset's own min/max; global-level pools all
    subsets; fixed-value takes the (min, max) of one country's subset (or
    explicitly supplied constants) and shares it with everyone.
    """
    if strategy not in STRATEGIES:
        raise DataError(f"unknown normalization strategy {strategy!r}")
    countries = sorted(values_by_country)
    if not countries:
        return {}

    if strategy == "country-level":
        return {c: NormalizationSpec(strategy, float(np.min(values_by_country[c])),
                                     float(np.max(values_by_country[c])))
                for c in countries}

    if strategy == "global-level":
        pooled = np.concatenate([np.asarray(values_by_country[c]) for c in countries])
        lo, hi = float(np.min(pooled)), float(np.max(pooled))
        return {c: NormalizationSpec(strategy, lo, hi) for c in countries}

    if fixed_min is not None and fixed_max is not None:
        lo, hi, src = float(fixed_min), float(fixed_max), source_country
    else:
        if source_country is None:
            rng = rng or np.random.default_rng()
            source_country = countries[int(rng.integers(len(countries)))]
        if source_country not in values_by_country:
            raise DataError(f"fixed-value source country {source_country!r} not in data")
        subset = np.asarray(values_by_country[source_country])
        lo, hi, src = float(np.min(subset)), float(np.max(subset)), source_country
    return {c: NormalizationSpec("fixed-value", lo, hi, source_country=src) for c in countries}


def scale_collection_features(collection: GraphCollection, strategy: str,
                              source_country: str | None = None,
                              rng: np.random.Generator | None = None,
                              fixed_min: float | None = None,
                              fixed_max: float | None = None,
                              log_amounts: bool = False) -> dict[str, NormalizationSpec]:
    """Rescale the amount column of every graph's features in place.

    Amount statistics are fitted on each transaction's origin country, so
    duplicated cross-border edges scale identically on both sides under
    country-level fitting of pooled data only when the stats agree; under
    global or fixed strategies they always do.
    """
    records = collection.records
    by_country: dict[str, list[float]] = {}
    for rec in records:
        amt = np.log1p(rec.amount) if log_amounts else rec.amount
        by_country.setdefault(rec.from_bank, []).append(amt)
    values_by_country = {c: np.asarray(v) for c, v in by_country.items()}
    specs = fit_normalization(values_by_country, strategy, source_country=source_country,
                              rng=rng, fixed_min=fixed_min, fixed_max=fixed_max)
    for country, graph in collection.graphs.items():
        amounts = graph.edge_amounts.copy()
        if log_amounts:
            amounts = np.log1p(amounts)
        origin = np.array([records[r].from_bank for r in graph.record_ids])
        scaled = np.empty_like(amounts)
        for c in np.unique(origin):
            mask = origin == c
            scaled[mask] = normalize(amounts[mask], specs[c])
        graph.edge_features[:, 0] = scaled
        # node amount aggregates follow the same scaling
        out_amt = np.zeros(graph.n_nodes)
        in_amt = np.zeros(graph.n_nodes)
        np.add.at(out_amt, graph.src, scaled)
        np.add.at(in_amt, graph.dst, scaled)
        graph.node_features[:, 2] = out_amt
        graph.node_features[:, 3] = in_amt
    return specs


# ---------------------------------------------------------------------------
# train/test splits
# ---------------------------------------------------------------------------

def split_records(records, mode: str = "fraction", train_fraction: float = 0.05,
                  seed: int = 0) -> np.ndarray:
    """Boolean train mask over record indices.

    ``fraction`` samples uniformly at random; ``chronological`` takes the
    earliest fraction by timestamp (ties broken by record order).
    """
    n = len(records)
    mask = np.zeros(n, dtype=bool)
    k = int(round(train_fraction * n))
    if mode == "fraction":
        rng = np.random.default_rng(seed)
        mask[rng.choice(n, size=k, replace=False)] = True
    elif mode == "chronological":
        order = np.argsort([rec.timestamp for rec in records], kind="stable")
        mask[order[:k]] = True
    else:
        raise DataError(f"unknown split mode {mode!r}")
    return mask


# ---------------------------------------------------------------------------
# synthetic pattern injection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticPatternSpec:
    pattern: str
    group_size: int
    countries: tuple[str, ...]
    amount_range: tuple[float, float]

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise DataError(f"unknown pattern {self.pattern!r}")
        if self.group_size < 3:
            raise DataError(f"group_size {self.group_size} < 3")
        if self.amount_range[0] <= 0:
            raise DataError("amount_range.low must be positive")


_SYNTH_COUNTER = "synth"


def _pattern_edges(pattern: str, size: int) -> list[tuple[int, int]]:
    """Edge list over local indices 0..size-1 realizing a laundering shape."""
    if pattern == "fan-out":
        return [(0, i) for i in range(1, size)]
    if pattern == "loop":
        return [(i, (i + 1) % size) for i in range(size)]
    if pattern == "gather-scatter":
        # k sources -> hub -> m sinks
        k = size // 2
        hub = k
        sources = list(range(k))
        sinks = list(range(k + 1, size))
        return [(s, hub) for s in sources] + [(hub, t) for t in sinks]
    if pattern == "hybrid":
        # gather into one hub, transfer, then fan out from a second hub
        if size < 4:
            return [(0, 1), (1, 2)]
        k = (size - 2) // 2
        hub_in, hub_out = k, k + 1
        sources = list(range(k))
        sinks = list(range(k + 2, size))
        return ([(s, hub_in) for s in sources] + [(hub_in, hub_out)]
                + [(hub_out, t) for t in sinks])
    raise DataError(f"unknown pattern {pattern!r}")


def inject_pattern(collection: GraphCollection, spec: SyntheticPatternSpec,
                   rng: np.random.Generator,
                   payment_type: str = "wire") -> tuple[GraphCollection, set[str]]:
    """Add fresh accounts and labeled edges realizing a laundering pattern.

    Returns the rebuilt collection plus the injected account-key set. Accounts
    are spread round-robin over ``spec.countries``, so multi-country specs
    produce genuinely cross-border structures.
    """
    for c in spec.countries:
        if collection.graphs and c not in collection.graphs:
            raise DataError(f"country {c!r} not present in collection")
    base = list(collection.records)
    synth_names = {r.from_account for r in base if r.from_account.startswith(_SYNTH_COUNTER)}
    synth_names |= {r.to_account for r in base if r.to_account.startswith(_SYNTH_COUNTER)}
    existing = len(synth_names)
    t0 = max((r.timestamp for r in base), default=0) + 1

    members = []
    for i in range(spec.group_size):
        country = spec.countries[i % len(spec.countries)]
        members.append((country, f"{_SYNTH_COUNTER}{existing + i}"))

    new_records = []
    lo, hi = spec.amount_range
    for step, (a, b) in enumerate(_pattern_edges(spec.pattern, spec.group_size)):
        fb, fa = members[a]
        tb, ta = members[b]
        new_records.append(TransactionRecord(
            timestamp=t0 + step,
            from_bank=fb, from_account=fa, to_bank=tb, to_account=ta,
            amount=float(rng.uniform(lo, hi)),
            payment_type=payment_type,
            is_laundering=1,
        ))
    group = {f"{c}:{a}" for c, a in members}
    return build_collection(base + new_records), group


def generate_pattern_records(spec: SyntheticPatternSpec, rng: np.random.Generator,
                             start_timestamp: int = 0, account_offset: int = 0,
                             payment_type: str = "wire", label: int = 1):
    """Standalone records for one pattern (used by the CLI generator).

    ``label=0`` produces structurally identical but legitimate traffic
    (payroll-style bursts), useful as decoys in controlled experiments.
    """
    members = []
    for i in range(spec.group_size):
        country = spec.countries[i % len(spec.countries)]
        members.append((country, f"{_SYNTH_COUNTER}{account_offset + i}"))
    lo, hi = spec.amount_range
    records = []
    for step, (a, b) in enumerate(_pattern_edges(spec.pattern, spec.group_size)):
        fb, fa = members[a]
        tb, ta = members[b]
        records.append(TransactionRecord(
            timestamp=start_timestamp + step,
            from_bank=fb, from_account=fa, to_bank=tb, to_account=ta,
            amount=float(rng.uniform(lo, hi)),
            payment_type=payment_type,
            is_laundering=label,
        ))
    group = {f"{c}:{a}" for c, a in members}
    return records, group


# ---------------------------------------------------------------------------
# stochastic block model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SbmSpec:
    n: int
    s: int
    p_in: float
    p_out: float
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.p_out <= self.p_in <= 1):
            raise DataError(f"require 0 <= p_out <= p_in <= 1, got {self.p_out}, {self.p_in}")
        if not 0 < self.s < self.n:
            raise DataError(f"require 0 < s < n, got s={self.s}, n={self.n}")


def sbm_generate(spec: SbmSpec) -> tuple[np.ndarray, np.ndarray]:
    """Sample a two-block SBM adjacency plus the planted group's indices.

    The planted group occupies indices 0..s-1. Edges are sampled independently
    on the upper triangle and mirrored, so the adjacency is symmetric 0/1 with
    an empty diagonal.
    """
    rng = np.random.default_rng(spec.seed)
    n, s = spec.n, spec.s
    u = rng.random((n, n))
    probs = np.full((n, n), spec.p_out)
    probs[:s, :s] = spec.p_in
    upper = np.triu(u < probs, k=1)
    adj = (upper | upper.T).astype(np.float64)
    return adj, np.arange(s)
