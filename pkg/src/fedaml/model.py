"""Edge-classification model: graph encoder, directional edge embedding,
sigmoid head, and the composed multi-objective training loss.

The encoder propagates node features through unnormalized adjacency with
self-loops, H^{l+1} = relu((A+I) H^l W^l), and concatenates every layer's
output (including the raw features) into the final embedding. Edges embed as
[h_src || h_dst - h_src || edge features]. Losses: focal (or BCE), a soft
membership graph-cut regularizer, and a boundary self-consistency term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import ModelParams, Tensor
from .graphs import (GraphCollection, SuperNodeRegistry, TransactionGraph,
                     neighbor_mean_embedding)

EPS = 1e-12


class DegenerateGraphError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    hidden_dim: int = 16
    input_dim: int = 4
    edge_feature_dim: int = 2
    mlp_hidden: tuple[int, ...] = (16,)
    membership_clusters: int = 4

    def __post_init__(self):
        if self.layers < 1 or self.hidden_dim < 1 or self.input_dim < 1:
            raise ValueError("encoder dims must be positive")
        if self.membership_clusters < 2:
            raise ValueError("membership_clusters must be >= 2")

    @property
    def embedding_dim(self) -> int:
        return self.input_dim + self.layers * self.hidden_dim


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.25
    gamma_focal: float = 2.0
    beta: float = 1.0
    lambda1: float = 0.1
    lambda2: float = 0.1
    use_bce: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0,1]")
        if self.gamma_focal < 0:
            raise ValueError("gamma_focal must be >= 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class GraphBundle:
    """Per-graph arrays and sparse operators cached for training."""
    graph: TransactionGraph
    a_self: sp.csr_matrix          # binary adjacency + identity, for the encoder
    adj_w: sp.csr_matrix           # collapsed weighted adjacency, for the cut loss
    deg: np.ndarray                # row sums of adj_w
    features: np.ndarray
    edge_feat: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray

    @property
    def country(self) -> str:
        return self.graph.country


def build_bundle(graph: TransactionGraph, train_mask: np.ndarray | None = None) -> GraphBundle:
    n = graph.n_nodes
    adj_w = graph.weighted_adjacency()
    binary = adj_w.copy()
    binary.data = np.ones_like(binary.data)
    a_self = (binary + sp.identity(n, format="csr")).tocsr()
    a_self.data = np.minimum(a_self.data, 1.0)
    if train_mask is None:
        train_mask = np.ones(graph.n_edges, dtype=bool)
    return GraphBundle(
        graph=graph,
        a_self=a_self,
        adj_w=adj_w,
        deg=np.asarray(adj_w.sum(axis=1)).ravel(),
        features=graph.node_features,
        edge_feat=graph.edge_features,
        labels=graph.edge_labels.astype(np.float64),
        train_mask=train_mask,
    )


def init_params(config: EncoderConfig, rng: np.random.Generator) -> ModelParams:
    """Glorot-style initialization for encoder, head, and membership weights."""
    tensors: dict[str, np.ndarray] = {}

    def glorot(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    dim = config.input_dim
    for layer in range(config.layers):
        tensors[f"encoder.w{layer}"] = glorot(dim, config.hidden_dim)
        dim = config.hidden_dim

    z_dim = 2 * config.embedding_dim + config.edge_feature_dim
    prev = z_dim
    for i, width in enumerate(config.mlp_hidden):
        tensors[f"head.w{i}"] = glorot(prev, width)
        tensors[f"head.b{i}"] = np.zeros((1, width))
        prev = width
    tensors["head.w_out"] = glorot(prev, 1)
    tensors["head.b_out"] = np.zeros((1, 1))

    tensors["membership.w"] = glorot(config.embedding_dim, config.membership_clusters)
    return ModelParams(tensors)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def encode(bundle: GraphBundle, params: ModelParams, config: EncoderConfig) -> Tensor:
    """Stacked propagation layers; output concatenates H^0 .. H^L."""
    if bundle.features.shape[1] != config.input_dim:
        raise ad.ShapeError(
            f"encode: graph has {bundle.features.shape[1]} node features, "
            f"config expects {config.input_dim}")
    h = ad.constant(bundle.features)
    outputs = [h]
    for layer in range(config.layers):
        propagated = ad.sparse_matmul(bundle.a_self, outputs[-1])
        outputs.append(ad.relu(ad.matmul(propagated, params[f"encoder.w{layer}"])))
    return ad.concat(outputs, axis=1)


def edge_embed(h: Tensor, src: np.ndarray, dst: np.ndarray, edge_feat: np.ndarray) -> Tensor:
    """z = [h_src || h_dst - h_src || edge attributes]."""
    h_src = ad.gather_rows(h, src)
    h_dst = ad.gather_rows(h, dst)
    return ad.concat([h_src, ad.sub(h_dst, h_src), ad.constant(edge_feat)], axis=1)


def _head(z: Tensor, params: ModelParams, config: EncoderConfig) -> Tensor:
    # leaky activation: a dead-unit head would freeze into a constant
    # predictor under extreme class imbalance
    out = z
    for i in range(len(config.mlp_hidden)):
        out = ad.leaky_relu(ad.add(ad.matmul(out, params[f"head.w{i}"]),
                                   params[f"head.b{i}"]), slope=0.01)
    return ad.add(ad.matmul(out, params["head.w_out"]), params["head.b_out"])


def predict_edges(bundle: GraphBundle, params: ModelParams, config: EncoderConfig) -> Tensor:
    """Per-edge illicit probability, shape [E, 1], strictly inside (0, 1)."""
    h = encode(bundle, params, config)
    z = edge_embed(h, bundle.graph.src, bundle.graph.dst, bundle.edge_feat)
    return ad.sigmoid(_head(z, params, config))


def membership(bundle: GraphBundle, params: ModelParams, config: EncoderConfig,
               h: Tensor | None = None) -> Tensor:
    """Soft cluster assignment: linear map on embeddings + row softmax."""
    if h is None:
        h = encode(bundle, params, config)
    return ad.softmax(ad.matmul(h, params["membership.w"]))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _clamped(y_hat: Tensor) -> Tensor:
    return ad.clip(y_hat, EPS, 1.0 - EPS)


def bce_loss(y_hat: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy; predictions clamped away from 0/1."""
    y = ad.constant(np.asarray(labels, dtype=np.float64).reshape(-1, 1))
    p = _clamped(y_hat)
    pos = ad.mul(y, ad.log(p))
    neg = ad.mul(ad.sub(1.0, y), ad.log(ad.sub(1.0, p)))
    return ad.mul(-1.0, ad.mean(ad.add(pos, neg)))


def focal_loss(y_hat: Tensor, labels: np.ndarray, alpha: float, gamma: float) -> Tensor:
    """Class-balanced focusing loss, reported as a mean over edges.

    With gamma=0 and alpha=0.5 this reduces algebraically to 0.5 * BCE.
    """
    y = ad.constant(np.asarray(labels, dtype=np.float64).reshape(-1, 1))
    p = _clamped(y_hat)
    pos = ad.mul(alpha, ad.mul(ad.power(ad.sub(1.0, p), gamma), ad.mul(y, ad.log(p))))
    neg = ad.mul(1.0 - alpha, ad.mul(ad.power(p, gamma),
                                     ad.mul(ad.sub(1.0, y), ad.log(ad.sub(1.0, p)))))
    return ad.mul(-1.0, ad.mean(ad.add(pos, neg)))


def graph_cut_loss(adjacency: sp.spmatrix, m: Tensor, beta: float) -> Tensor:
    """Soft-membership ratio-cut objective with an orthogonality penalty.

    -trace(M^T A M) / trace(M^T D M) + beta * ||M^T M - I||_F^2, with D the
    diagonal degree matrix of A.
    """
    adjacency = sp.csr_matrix(adjacency, dtype=np.float64)
    deg = np.asarray(adjacency.sum(axis=1)).ravel()
    if not deg.any():
        raise DegenerateGraphError("graph_cut_loss: degenerate degree matrix (no edges)")
    am = ad.sparse_matmul(adjacency, m)
    num = ad.trace(ad.matmul(ad.transpose(m), am))
    d_m = ad.sparse_matmul(sp.diags(deg), m)
    den = ad.trace(ad.matmul(ad.transpose(m), d_m))
    ratio = ad.mul(-1.0, ad.div(num, den))
    gram = ad.matmul(ad.transpose(m), m)
    penalty = ad.frobenius_norm_sq(ad.sub(gram, ad.constant(np.eye(m.shape[1]))))
    return ad.add(ratio, ad.mul(beta, penalty))


def supernode_means(registry: SuperNodeRegistry, country: str, h: Tensor) -> tuple[list, Tensor | None]:
    """Differentiable neighbor-mean embeddings for each boundary entry.

    Returns (entry keys, [n_entries x dim] tensor), or (keys, None) when the
    country has no boundary entries.
    """
    entries = registry.for_country(country)
    keys = [e.key() for e in entries]
    if not entries:
        return keys, None
    n = h.shape[0]
    rows, cols, vals = [], [], []
    for i, entry in enumerate(entries):
        if not entry.home_neighbors:
            raise ValueError(f"supernode entry {entry.key()} has an empty neighbor set")
        for node in entry.home_neighbors:
            rows.append(i)
            cols.append(node)
            vals.append(1.0 / len(entry.home_neighbors))
    averaging = sp.csr_matrix((vals, (rows, cols)), shape=(len(entries), n))
    return keys, ad.sparse_matmul(averaging, h)


def self_consistency_loss(local_means: Tensor, foreign_means: np.ndarray) -> Tensor:
    """Sum of squared distances between the two sides of each boundary entry."""
    foreign = np.asarray(foreign_means, dtype=np.float64)
    if foreign.shape != tuple(local_means.shape):
        raise ad.ShapeError(
            f"self_consistency_loss: local side {local_means.shape} vs "
            f"foreign side {foreign.shape}")
    return ad.frobenius_norm_sq(ad.sub(local_means, ad.constant(foreign)))


def collection_self_consistency(collection: GraphCollection,
                                embeddings: dict[str, np.ndarray]) -> float:
    """Both-sides evaluation of the alignment loss over a whole collection."""
    total = 0.0
    means: dict[tuple, np.ndarray] = {}
    for country in collection.graphs:
        means.update(neighbor_mean_embedding(collection.supernodes, country,
                                             embeddings[country]))
    for entry in collection.supernodes.entries:
        if entry.mirror_key() not in means:
            raise ValueError(f"missing foreign side for entry {entry.key()}")
        diff = means[entry.key()] - means[entry.mirror_key()]
        total += float(np.sum(diff * diff))
    return total


@dataclass
class LossBreakdown:
    total: Tensor
    focal: float
    cut: float
    consistency: float


def total_loss(bundle: GraphBundle, params: ModelParams, config: EncoderConfig,
               loss_cfg: LossConfig, registry: SuperNodeRegistry | None = None,
               foreign_means: dict[tuple, np.ndarray] | None = None) -> LossBreakdown:
    """Composite objective: focal + lambda1 * cut + lambda2 * consistency.

    The consistency term needs the foreign side of each boundary entry; it is
    skipped (contributes zero) when no foreign vectors are available yet.
    """
    h = encode(bundle, params, config)
    mask = bundle.train_mask
    z = edge_embed(h, bundle.graph.src[mask], bundle.graph.dst[mask], bundle.edge_feat[mask])
    y_hat = ad.sigmoid(_head(z, params, config))
    labels = bundle.labels[mask]

    if loss_cfg.use_bce:
        classification = bce_loss(y_hat, labels)
    else:
        classification = focal_loss(y_hat, labels, loss_cfg.alpha, loss_cfg.gamma_focal)
    total = classification
    cut_val = 0.0
    sc_val = 0.0

    if loss_cfg.lambda1 > 0:
        m = membership(bundle, params, config, h=h)
        cut = graph_cut_loss(bundle.adj_w, m, loss_cfg.beta)
        cut_val = float(cut.data)
        total = ad.add(total, ad.mul(loss_cfg.lambda1, cut))

    if loss_cfg.lambda2 > 0 and registry is not None and foreign_means:
        keys, local = supernode_means(registry, bundle.country, h)
        available = [i for i, k in enumerate(keys)
                     if (k[1], k[0], k[3], k[2]) in foreign_means]
        if available and local is not None:
            local_sel = ad.gather_rows(local, np.array(available))
            foreign = np.stack([foreign_means[(keys[i][1], keys[i][0], keys[i][3], keys[i][2])]
                                for i in available])
            sc = self_consistency_loss(local_sel, foreign)
            sc_val = float(sc.data)
            total = ad.add(total, ad.mul(loss_cfg.lambda2, sc))

    return LossBreakdown(total=total, focal=float(classification.data),
                         cut=cut_val, consistency=sc_val)
