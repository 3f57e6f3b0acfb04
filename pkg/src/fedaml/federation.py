"""Simulated multi-institution training with periodic parameter averaging.

Clients run in-process. The only message types that ever cross the client
boundary are parameter snapshots and aggregated boundary embeddings — raw
graphs, features, and labels stay inside each client's state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import metrics as mt
from . import model as mdl
from .autodiff import ModelParams, backward, sgd_step
from .graphs import GraphCollection, SuperNodeRegistry


class TrainingError(RuntimeError):
    pass


class MessageKind(Enum):
    """Everything a client may transmit. Kept deliberately exhaustive."""
    PARAMS = "params"
    SUPERNODE = "supernode"


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    sender: str
    payload: object


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 100
    comm_frequency: int = 4      # aggregate every k local epochs
    clients: tuple[str, ...] = ()
    lr: float = 0.05
    seed: int = 0
    weighted_average: bool = False

    def __post_init__(self):
        if self.comm_frequency < 1:
            raise ValueError("comm_frequency must be >= 1")
        if self.rounds < self.comm_frequency:
            raise ValueError("rounds must be >= comm_frequency")


@dataclass
class ClientState:
    country: str
    bundle: mdl.GraphBundle
    params: ModelParams
    epoch: int = 0
    local_means: dict[tuple, np.ndarray] = field(default_factory=dict)
    foreign_means: dict[tuple, np.ndarray] = field(default_factory=dict)

    @property
    def volume(self) -> float:
        return float(self.bundle.graph.n_edges)


def gradient_step(bundle: mdl.GraphBundle, params: ModelParams, config: mdl.EncoderConfig,
                  loss_cfg: mdl.LossConfig, registry: SuperNodeRegistry | None,
                  foreign_means: dict[tuple, np.ndarray] | None,
                  lr: float) -> tuple[ModelParams, mdl.LossBreakdown]:
    """One full-batch gradient-descent step on the composite objective."""
    params.zero_grads()
    breakdown = mdl.total_loss(bundle, params, config, loss_cfg,
                               registry=registry, foreign_means=foreign_means)
    if not np.isfinite(breakdown.total.data):
        raise TrainingError(
            f"non-finite loss {breakdown.total.data} on {bundle.country!r} "
            f"(focal={breakdown.focal}, cut={breakdown.cut}, sc={breakdown.consistency})")
    backward(breakdown.total)
    return sgd_step(params, params.grads(), lr), breakdown


def local_epoch(client: ClientState, config: mdl.EncoderConfig, loss_cfg: mdl.LossConfig,
                registry: SuperNodeRegistry, lr: float) -> mdl.LossBreakdown:
    """Advance one epoch on the client's own graph and refresh its boundary means."""
    new_params, breakdown = gradient_step(client.bundle, client.params, config, loss_cfg,
                                          registry, client.foreign_means, lr)
    client.params = new_params
    client.epoch += 1
    h = mdl.encode(client.bundle, client.params, config)
    keys, means = mdl.supernode_means(registry, client.country, h)
    client.local_means = ({k: means.data[i].copy() for i, k in enumerate(keys)}
                          if means is not None else {})
    return breakdown


def fed_average(params_list: list[ModelParams],
                weights: list[float] | None = None) -> ModelParams:
    """Per-tensor mean of client parameters (optionally volume-weighted)."""
    if not params_list:
        raise ValueError("fed_average: no clients")
    names = params_list[0].names()
    for other in params_list[1:]:
        if other.names() != names:
            raise ValueError("fed_average: parameter name mismatch across clients")
    if weights is None:
        w = np.full(len(params_list), 1.0 / len(params_list))
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
    merged = {}
    for name in names:
        shapes = {p[name].data.shape for p in params_list}
        if len(shapes) > 1:
            raise ValueError(f"fed_average: shape mismatch for {name!r}: {shapes}")
        stacked = np.stack([p[name].data for p in params_list])
        merged[name] = np.tensordot(w, stacked, axes=1) if weights is not None \
            else stacked.mean(axis=0)
    return ModelParams(merged)


def exchange_supernodes(clients: dict[str, ClientState], registry: SuperNodeRegistry,
                        outbox: list[Message] | None = None) -> None:
    """Deliver each entry's foreign-side mean embedding to its home client.

    Only aggregated mean vectors travel; the sender's node features and raw
    edges never appear in a message payload.
    """
    registry.check_mirrors()
    for country, sender in clients.items():
        if not sender.local_means:
            continue
        message = Message(MessageKind.SUPERNODE, country, dict(sender.local_means))
        if outbox is not None:
            outbox.append(message)
        for key, vec in message.payload.items():
            home_c, foreign_c = key[0], key[1]
            if foreign_c in clients:
                clients[foreign_c].foreign_means[key] = np.array(vec)


@dataclass
class FederationResult:
    global_params: ModelParams
    history: list[dict]
    clients: dict[str, ClientState]
    messages: list[Message]


def make_clients(collection: GraphCollection, config: mdl.EncoderConfig,
                 seed: int, train_masks: dict[str, np.ndarray] | None = None,
                 countries: tuple[str, ...] = ()) -> dict[str, ClientState]:
    """One client per country, all starting from identical parameters."""
    chosen = list(countries) or sorted(collection.graphs)
    rng = np.random.default_rng(seed)
    init = mdl.init_params(config, rng)
    clients = {}
    for country in chosen:
        graph = collection.graphs[country]
        mask = train_masks.get(country) if train_masks else None
        clients[country] = ClientState(
            country=country,
            bundle=mdl.build_bundle(graph, mask),
            params=init.copy(),
        )
    return clients


def _client_metrics(client: ClientState, config: mdl.EncoderConfig) -> dict:
    scores = mdl.predict_edges(client.bundle, client.params, config).data.ravel()
    labels = client.bundle.labels
    eval_mask = ~client.bundle.train_mask
    if eval_mask.sum() == 0:
        eval_mask = np.ones_like(eval_mask)
    return mt.summary_row(scores[eval_mask], labels[eval_mask], threshold=0.5)


def run_federation(collection: GraphCollection, fed_cfg: FederationConfig,
                   enc_cfg: mdl.EncoderConfig, loss_cfg: mdl.LossConfig,
                   train_masks: dict[str, np.ndarray] | None = None,
                   record_metrics: bool = True) -> FederationResult:
    """Training loop: k local epochs, then average and exchange, repeated.

    With a single client the aggregation is an identity and the run matches
    plain centralized training epoch for epoch.
    """
    clients = make_clients(collection, enc_cfg, fed_cfg.seed, train_masks,
                           fed_cfg.clients)
    registry = collection.supernodes
    history: list[dict] = []
    messages: list[Message] = []
    total_rounds = fed_cfg.rounds // fed_cfg.comm_frequency

    global_params = None
    for round_no in range(total_rounds):
        for country in sorted(clients):
            client = clients[country]
            for _ in range(fed_cfg.comm_frequency):
                breakdown = local_epoch(client, enc_cfg, loss_cfg, registry, fed_cfg.lr)
            if record_metrics:
                row = {"round": round_no, "client": country,
                       "loss": float(breakdown.total.data)}
                row.update(_client_metrics(client, enc_cfg))
                history.append(row)

        ordered = sorted(clients)
        snapshots = [clients[c].params.copy() for c in ordered]
        for c in ordered:
            messages.append(Message(MessageKind.PARAMS, c, clients[c].params.arrays()))
        weights = [clients[c].volume for c in ordered] if fed_cfg.weighted_average else None
        global_params = fed_average(snapshots, weights)
        for c in ordered:
            clients[c].params = global_params.copy()
        exchange_supernodes(clients, registry, outbox=messages)

    if global_params is None:
        raise TrainingError("run_federation: zero aggregation rounds configured")
    return FederationResult(global_params=global_params, history=history,
                            clients=clients, messages=messages)


def train_centralized(bundle: mdl.GraphBundle, enc_cfg: mdl.EncoderConfig,
                      loss_cfg: mdl.LossConfig, epochs: int, lr: float,
                      seed: int) -> tuple[ModelParams, list[float]]:
    """Ordinary single-institution training on one graph."""
    rng = np.random.default_rng(seed)
    params = mdl.init_params(enc_cfg, rng)
    losses = []
    for _ in range(epochs):
        params, breakdown = gradient_step(bundle, params, enc_cfg, loss_cfg,
                                          None, None, lr)
        losses.append(float(breakdown.total.data))
    return params, losses
