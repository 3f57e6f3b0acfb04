"""Score refinement by diffusing node-level suspicion through the graph
augmented with discovered cluster structure.

Edge scores first pool into node scores, those diffuse over the row-normalized
transition of (A + A_cluster), and the converged node scores fold back into
the edge scores by max-pooling over endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .ppr import ClusterSet
from .graphs import TransactionGraph


class PropagationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PropagationConfig:
    alpha: float = 0.85
    alpha_lp: float = 0.3
    tol: float = 1e-9
    max_iters: int = 500

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0,1)")
        if not 0.0 <= self.alpha_lp <= 1.0:
            raise ValueError(f"alpha_lp {self.alpha_lp} outside [0,1]")


def node_scores_from_edges(graph: TransactionGraph, edge_scores: np.ndarray,
                           mode: str = "incident") -> np.ndarray:
    """Average suspicion of each account's edges.

    ``incident`` (default) averages over all touching edges in either
    direction; ``in-edges`` uses only incoming ones. Accounts with no
    qualifying edges score zero.
    """
    edge_scores = np.asarray(edge_scores, dtype=np.float64)
    if len(edge_scores) != graph.n_edges:
        raise ValueError(f"{len(edge_scores)} scores for {graph.n_edges} edges")
    n = graph.n_nodes
    totals = np.zeros(n)
    counts = np.zeros(n)
    np.add.at(totals, graph.dst, edge_scores)
    np.add.at(counts, graph.dst, 1.0)
    if mode == "incident":
        np.add.at(totals, graph.src, edge_scores)
        np.add.at(counts, graph.src, 1.0)
    elif mode != "in-edges":
        raise ValueError(f"unknown node score mode {mode!r}")
    return np.where(counts > 0, totals / np.where(counts > 0, counts, 1.0), 0.0)


def cluster_adjacency(graph: TransactionGraph, clusters: ClusterSet) -> sp.csr_matrix:
    """Clique links (weight 1) among each cluster's accounts inside one graph.

    Merged clusters never share accounts, so cliques cannot overlap.
    """
    n = graph.n_nodes
    position = {key: i for i, key in enumerate(graph.accounts)}
    rows: list[int] = []
    cols: list[int] = []
    for cluster in clusters.clusters:
        local = sorted(position[a] for a in cluster.accounts if a in position)
        for i in local:
            for j in local:
                if i != j:
                    rows.append(i)
                    cols.append(j)
    data = np.ones(len(rows))
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def propagate(adjacency: sp.spmatrix, cluster_links: sp.spmatrix | None,
              node_scores: np.ndarray, config: PropagationConfig) -> np.ndarray:
    """Iterate R <- alpha S R + (1-alpha) y to convergence, then max-normalize.

    S row-normalizes (A + A_cluster); zero-degree rows keep only their own
    signal. All-zero initial scores are returned unchanged (nothing to spread).
    """
    y0 = np.asarray(node_scores, dtype=np.float64).ravel()
    if not y0.any():
        return y0.copy()
    combined = sp.csr_matrix(adjacency, dtype=np.float64)
    if cluster_links is not None:
        combined = (combined + sp.csr_matrix(cluster_links, dtype=np.float64)).tocsr()
    s = _row_normalized(combined)

    r = y0.copy()
    alpha = config.alpha
    for _ in range(config.max_iters):
        nxt = alpha * (s @ r) + (1.0 - alpha) * y0
        residual = float(np.abs(nxt - r).sum())
        r = nxt
        if residual < config.tol:
            break
    else:
        raise PropagationError(
            f"propagate: no convergence in {config.max_iters} iterations "
            f"(residual {residual:.3e})")
    mx = r.max()
    return r / mx if mx > 0 else r


def _row_normalized(adjacency: sp.csr_matrix) -> sp.csr_matrix:
    deg = np.asarray(adjacency.sum(axis=1)).ravel()
    inv = np.where(deg > 0, 1.0 / np.where(deg > 0, deg, 1.0), 0.0)
    return sp.diags(inv).dot(adjacency).tocsr()


def refine_edges(edge_scores: np.ndarray, node_scores: np.ndarray,
                 src: np.ndarray, dst: np.ndarray, alpha_lp: float) -> np.ndarray:
    """Blend base edge scores with the propagated endpoint maximum."""
    edge_scores = np.asarray(edge_scores, dtype=np.float64)
    node_scores = np.asarray(node_scores, dtype=np.float64)
    pooled = np.maximum(node_scores[src], node_scores[dst])
    return (1.0 - alpha_lp) * edge_scores + alpha_lp * pooled


def refine_graph_scores(graph: TransactionGraph, edge_scores: np.ndarray,
                        clusters: ClusterSet | None, config: PropagationConfig,
                        mode: str = "incident") -> np.ndarray:
    """Full refinement pass for one country graph."""
    y_nodes = node_scores_from_edges(graph, edge_scores, mode=mode)
    adjacency = graph.undirected_adjacency()
    links = cluster_adjacency(graph, clusters) if clusters is not None else None
    refined_nodes = propagate(adjacency, links, y_nodes, config)
    return refine_edges(edge_scores, refined_nodes, graph.src, graph.dst, config.alpha_lp)
