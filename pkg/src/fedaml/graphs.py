"""Country-partitioned transaction graphs with cross-border bookkeeping.

Transactions are grouped by country; a transfer between accounts held in two
different countries is duplicated into both country graphs, and each such
account pair gets a mirrored entry in the boundary registry so the two sides
can exchange aggregated neighbor statistics without sharing raw rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class GraphBuildError(ValueError):
    """Raised when transaction records cannot form a valid graph."""


@dataclass(frozen=True)
class AccountId:
    """Address of a node inside one country graph."""
    country: str
    local_index: int


@dataclass
class TransactionGraph:
    """Directed multigraph of accounts for one country.

    ``src``/``dst`` hold one entry per transaction (parallel edges kept);
    ``accounts`` maps local node index -> globally unique "BANK:account" key.
    """
    country: str
    accounts: list[str]
    src: np.ndarray
    dst: np.ndarray
    node_features: np.ndarray
    edge_features: np.ndarray
    edge_labels: np.ndarray
    edge_amounts: np.ndarray
    record_ids: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.accounts)

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def validate(self) -> None:
        n, e = self.n_nodes, self.n_edges
        if e and (self.src.min() < 0 or self.src.max() >= n
                  or self.dst.min() < 0 or self.dst.max() >= n):
            raise GraphBuildError(f"{self.country}: edge endpoint out of range")
        for name, arr in (("edge_features", self.edge_features),
                          ("edge_labels", self.edge_labels),
                          ("edge_amounts", self.edge_amounts),
                          ("record_ids", self.record_ids)):
            if len(arr) != e:
                raise GraphBuildError(f"{self.country}: {name} length {len(arr)} != edge count {e}")
        if e and not np.isin(self.edge_labels, (0, 1)).all():
            raise GraphBuildError(f"{self.country}: labels must be 0/1")

    def weighted_adjacency(self) -> sp.csr_matrix:
        """Account-level adjacency; parallel edges collapse by summing weight 1."""
        n = self.n_nodes
        data = np.ones(self.n_edges)
        return sp.csr_matrix((data, (self.src, self.dst)), shape=(n, n))

    def undirected_adjacency(self) -> sp.csr_matrix:
        """Direction-collapsed weights: elementwise max of both directions."""
        a = self.weighted_adjacency()
        return a.maximum(a.T).tocsr()

    def neighbor_sets(self) -> list[set[int]]:
        """Undirected neighbor set per node (self-links excluded)."""
        out: list[set[int]] = [set() for _ in range(self.n_nodes)]
        for u, v in zip(self.src, self.dst):
            if u != v:
                out[int(u)].add(int(v))
                out[int(v)].add(int(u))
        return out


@dataclass(frozen=True)
class SuperNodeEntry:
    home_country: str
    foreign_country: str
    home_account: str
    foreign_account: str
    cross_border_edge_ids: tuple[int, ...]
    home_neighbors: tuple[int, ...]  # local node indices in the home graph

    def key(self) -> tuple[str, str, str, str]:
        return (self.home_country, self.foreign_country, self.home_account, self.foreign_account)

    def mirror_key(self) -> tuple[str, str, str, str]:
        return (self.foreign_country, self.home_country, self.foreign_account, self.home_account)


@dataclass
class SuperNodeRegistry:
    entries: list[SuperNodeEntry] = field(default_factory=list)

    def for_country(self, country: str) -> list[SuperNodeEntry]:
        return [e for e in self.entries if e.home_country == country]

    def by_key(self) -> dict[tuple[str, str, str, str], SuperNodeEntry]:
        return {e.key(): e for e in self.entries}

    def check_mirrors(self) -> None:
        keys = {e.key() for e in self.entries}
        for e in self.entries:
            if e.mirror_key() not in keys:
                raise GraphBuildError(f"supernode entry {e.key()} has no mirror")


@dataclass
class GraphCollection:
    graphs: dict[str, TransactionGraph]
    supernodes: SuperNodeRegistry
    records: list = field(default_factory=list)  # construction provenance

    def countries(self) -> list[str]:
        return list(self.graphs)


def _account_key(bank: str, account: str) -> str:
    return f"{bank}:{account}"


def build_collection(records) -> GraphCollection:
    """Build one TransactionGraph per country from transaction records.

    Cross-border records are duplicated into both endpoint countries' graphs
    and produce one mirrored registry entry per (account, account) pair. Node
    indices follow first appearance in record order, so the result is a pure
    function of the record list.
    """
    from .data import validate_record  # deferred: data module defines the record shape

    for i, rec in enumerate(records):
        err = validate_record(rec)
        if err:
            raise GraphBuildError(f"record {i}: {err}")

    index: dict[str, dict[str, int]] = {}       # country -> account key -> node idx
    accounts: dict[str, list[str]] = {}
    edges: dict[str, list[tuple[int, int, int]]] = {}  # (src, dst, record id)

    def node_of(country: str, bank: str, account: str) -> int:
        table = index.setdefault(country, {})
        names = accounts.setdefault(country, [])
        key = _account_key(bank, account)
        if key not in table:
            table[key] = len(names)
            names.append(key)
        return table[key]

    cross: dict[tuple[str, str, str, str], list[int]] = {}
    payment_codes = sorted({rec.payment_type for rec in records})
    code_of = {c: i for i, c in enumerate(payment_codes)}
    code_scale = max(1, len(payment_codes) - 1)

    for rid, rec in enumerate(records):
        touched = [rec.from_bank] if rec.from_bank == rec.to_bank else [rec.from_bank, rec.to_bank]
        for country in touched:
            u = node_of(country, rec.from_bank, rec.from_account)
            v = node_of(country, rec.to_bank, rec.to_account)
            edges.setdefault(country, []).append((u, v, rid))
        if rec.from_bank != rec.to_bank:
            home = (rec.from_bank, rec.to_bank, _account_key(rec.from_bank, rec.from_account),
                    _account_key(rec.to_bank, rec.to_account))
            mirror = (rec.to_bank, rec.from_bank, _account_key(rec.to_bank, rec.to_account),
                      _account_key(rec.from_bank, rec.from_account))
            cross.setdefault(home, []).append(rid)
            cross.setdefault(mirror, []).append(rid)

    graphs: dict[str, TransactionGraph] = {}
    for country in index:
        country_edges = edges.get(country, [])
        src = np.array([e[0] for e in country_edges], dtype=np.int64)
        dst = np.array([e[1] for e in country_edges], dtype=np.int64)
        rids = np.array([e[2] for e in country_edges], dtype=np.int64)
        amounts = np.array([records[r].amount for r in rids], dtype=np.float64)
        labels = np.array([records[r].is_laundering for r in rids], dtype=np.int64)
        feat = np.column_stack([
            amounts,
            np.array([code_of[records[r].payment_type] / code_scale for r in rids]),
        ]) if len(rids) else np.zeros((0, 2))
        g = TransactionGraph(
            country=country,
            accounts=accounts[country],
            src=src,
            dst=dst,
            node_features=np.zeros((len(accounts[country]), 0)),
            edge_features=feat,
            edge_labels=labels,
            edge_amounts=amounts,
            record_ids=rids,
        )
        g.node_features = _default_node_features(g)
        g.validate()
        graphs[country] = g

    registry = SuperNodeRegistry()
    neighbor_cache = {c: g.neighbor_sets() for c, g in graphs.items()}
    for (home_c, foreign_c, home_a, foreign_a), rids in sorted(cross.items()):
        home_idx = index[home_c][home_a]
        neighbors = tuple(sorted(neighbor_cache[home_c][home_idx]))
        registry.entries.append(SuperNodeEntry(
            home_country=home_c,
            foreign_country=foreign_c,
            home_account=home_a,
            foreign_account=foreign_a,
            cross_border_edge_ids=tuple(sorted(set(rids))),
            home_neighbors=neighbors,
        ))
    registry.check_mirrors()

    return GraphCollection(graphs=graphs, supernodes=registry, records=list(records))


def _default_node_features(g: TransactionGraph) -> np.ndarray:
    """Structural node features: log-scaled degrees plus amount aggregates."""
    n = g.n_nodes
    out_deg = np.zeros(n)
    in_deg = np.zeros(n)
    out_amt = np.zeros(n)
    in_amt = np.zeros(n)
    np.add.at(out_deg, g.src, 1.0)
    np.add.at(in_deg, g.dst, 1.0)
    np.add.at(out_amt, g.src, g.edge_amounts)
    np.add.at(in_amt, g.dst, g.edge_amounts)
    return np.column_stack([np.log1p(out_deg), np.log1p(in_deg), out_amt, in_amt])


def degree_vector(graph: TransactionGraph, weights: np.ndarray | None = None) -> np.ndarray:
    """Per-node out-degree: sum of outgoing edge weights (1 when absent)."""
    if weights is None:
        weights = np.ones(graph.n_edges)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if len(weights) != graph.n_edges:
            raise ValueError(
                f"degree_vector: {len(weights)} weights for {graph.n_edges} edges")
    deg = np.zeros(graph.n_nodes)
    np.add.at(deg, graph.src, weights)
    return deg


def neighbor_mean_embedding(
    registry: SuperNodeRegistry,
    country: str,
    embeddings: np.ndarray,
    include_variance: bool = False,
) -> dict[tuple[str, str, str, str], np.ndarray]:
    """Mean embedding of the home-side neighbor set for each boundary entry.

    ``include_variance`` appends the per-dimension population variance,
    doubling the output width.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    out: dict[tuple[str, str, str, str], np.ndarray] = {}
    for entry in registry.for_country(country):
        if not entry.home_neighbors:
            raise GraphBuildError(f"supernode entry {entry.key()} has an empty neighbor set")
        if max(entry.home_neighbors) >= embeddings.shape[0]:
            raise GraphBuildError(
                f"embeddings have {embeddings.shape[0]} rows; entry {entry.key()} "
                f"references node {max(entry.home_neighbors)}")
        rows = embeddings[list(entry.home_neighbors)]
        vec = rows.mean(axis=0)
        if include_variance:
            vec = np.concatenate([vec, rows.var(axis=0)])
        out[entry.key()] = vec
    return out


def country_bucket_map(mapping: dict[str, str], default: str | None = None):
    """Country-code -> partition-name lookup with an optional default bucket."""
    def lookup(code: str) -> str:
        if code in mapping:
            return mapping[code]
        if default is not None:
            return default
        return code
    return lookup
