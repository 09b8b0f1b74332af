"""The communication-round protocol: broadcast, local training, selective
upload, aggregation, and metrics.

Key structural properties, all load-bearing for the tests:

* Clients communicate with the server only through serialized payloads;
  under selective stacking the payload is built from shared factors alone.
* Private factors train against the backbone-plus-private forward pass,
  so their trajectories never depend on the shared module's values. With
  noise confined to shared gradients, a DP run and a noise-free run give
  bit-identical private parameters.
* Every random draw comes from a stream keyed by (seed, purpose, client),
  so client scheduling order cannot change any result, and uploads are
  sorted by client id before aggregation.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from fedlora import aggregation, linalg, privacy, tasks
from fedlora.adapters import (
    DualAdapter,
    FactorPair,
    FrozenLayer,
    concat_pairs,
    delta,
    init_adapter,
    init_factor_pair,
    serialize_pair,
    deserialize_pair,
    zero_pair,
)
from fedlora.aggregation import AggregationConfig
from fedlora.errors import ConfigError, ProtocolError
from fedlora.privacy import DpParams
from fedlora.tasks import Dataset, ToyModel

_COUNT = struct.Struct("<d")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Sub-stream tags for the per-purpose RNG streams.
_STREAM_DATA = 10
_STREAM_INIT = 11
_STREAM_NOISE = 12
_STREAM_PARTICIPATION = 13


@dataclass
class RoundConfig:
    total_rounds: int = 30
    local_steps: int = 10
    batch_size: int = 32
    learning_rate: float = 0.01
    optimizer: str = "adam"
    participation: float = 1.0

    def __post_init__(self):
        if self.total_rounds < 0 or self.local_steps < 0:
            raise ConfigError("round and step counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.learning_rate < 0.0:
            raise ConfigError("learning rate must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigError("participation must be in (0, 1]")


class Optimizer:
    """SGD or Adam over a set of named parameter arrays."""

    def __init__(self, kind: str, lr: float):
        self.kind = kind
        self.lr = lr
        self._state: dict = {}

    def reset(self, prefix: tuple) -> None:
        for key in [k for k in self._state if k[: len(prefix)] == prefix]:
            del self._state[key]

    def step(self, key: tuple, param: np.ndarray, grad: np.ndarray) -> None:
        if self.kind == "sgd":
            param -= self.lr * grad
            return
        m, v, t = self._state.get(key, (np.zeros_like(param), np.zeros_like(param), 0))
        t += 1
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grad * grad
        self._state[key] = (m, v, t)
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class ClientState:
    client_id: int
    shard: Dataset
    model: ToyModel
    shared_rank: int
    private_rank: int
    optimizer: Optimizer
    data_rng: np.random.Generator
    init_rng: np.random.Generator
    noise_rng: np.random.Generator
    offsets: list[np.ndarray] | None = None
    _order: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    _cursor: int = 0

    def next_batch(self, batch_size: int) -> np.ndarray:
        take = min(batch_size, len(self.shard))
        if self._cursor + take > len(self._order):
            self._order = self.data_rng.permutation(len(self.shard))
            self._cursor = 0
        idx = self._order[self._cursor : self._cursor + take]
        self._cursor += take
        return idx


@dataclass
class ServerState:
    config: AggregationConfig
    layer_shapes: list[tuple[int, int]]
    seed: int
    shared: dict[int, FactorPair] | None = None
    accum: dict[int, np.ndarray] | None = None
    round_index: int = 0
    metrics: list[dict] = field(default_factory=list)
    timings: list[tuple[int, float]] = field(default_factory=list)
    trace: list[bytes] = field(default_factory=list)

    def __post_init__(self):
        if self.config.strategy == "flora_stacking" and self.accum is None:
            self.accum = {i: np.zeros(shape) for i, shape in enumerate(self.layer_shapes)}


def client_stream(seed: int, tag: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag, client_id]))


def make_client(
    client_id: int,
    shard: Dataset,
    backbone: list[np.ndarray],
    shared_rank: int,
    private_rank: int,
    rc: RoundConfig,
    seed: int,
) -> ClientState:
    init_rng = client_stream(seed, _STREAM_INIT, client_id)
    layers = []
    for i, w in enumerate(backbone):
        adapter = init_adapter(w.shape[0], w.shape[1], shared_rank, private_rank, init_rng, layer_id=i)
        layers.append(FrozenLayer(w=w, adapter=adapter))
    return ClientState(
        client_id=client_id,
        shard=shard,
        model=ToyModel(layers=layers),
        shared_rank=shared_rank,
        private_rank=private_rank,
        optimizer=Optimizer(rc.optimizer, rc.learning_rate),
        data_rng=client_stream(seed, _STREAM_DATA, client_id),
        init_rng=init_rng,
        noise_rng=client_stream(seed, _STREAM_NOISE, client_id),
    )


# ---------------------------------------------------------------------------
# Payload serialization (the only channel between clients and the server)
# ---------------------------------------------------------------------------


def serialize_module(pairs: dict[int, FactorPair]) -> bytes:
    chunks = [_COUNT.pack(float(len(pairs)))]
    for layer_id in sorted(pairs):
        chunks.append(_COUNT.pack(float(layer_id)))
        chunks.append(serialize_pair(pairs[layer_id]))
    return b"".join(chunks)


def deserialize_module(buf: bytes) -> dict[int, FactorPair]:
    (count,) = _COUNT.unpack_from(buf, 0)
    offset = _COUNT.size
    pairs = {}
    for _ in range(int(count)):
        (layer_id,) = _COUNT.unpack_from(buf, offset)
        offset += _COUNT.size
        pair, offset = deserialize_pair(buf, offset)
        pairs[int(layer_id)] = pair
    return pairs


# ---------------------------------------------------------------------------
# Local training
# ---------------------------------------------------------------------------


def _adopt_broadcast(
    client: ClientState,
    broadcast: dict[int, FactorPair] | None,
    strategy: str,
    accum: dict[int, np.ndarray] | None,
    server_round: int,
) -> None:
    """Install the server state on the client at round start.

    Under selective stacking the broadcast replaces the shared factors
    wholesale and the private module persists. The baseline strategies
    consumed the private module during aggregation, so it is freshly
    reinitialized; flora additionally reinitializes the shared module and
    carries everything in the dense accumulator instead.
    """
    if strategy == "flora_stacking":
        client.offsets = [accum[layer.adapter.layer_id].copy() for layer in client.model.layers]
        if server_round > 0:
            for layer in client.model.layers:
                lid = layer.adapter.layer_id
                d_out, d_in = layer.w.shape
                layer.adapter.shared = init_factor_pair(d_out, d_in, client.shared_rank, client.init_rng)
                layer.adapter.private = init_factor_pair(d_out, d_in, client.private_rank, client.init_rng)
                client.optimizer.reset((lid,))
        return
    if broadcast is None:
        return
    for layer in client.model.layers:
        lid = layer.adapter.layer_id
        if lid not in broadcast:
            raise ProtocolError(f"broadcast is missing layer {lid}")
        pair = broadcast[lid]
        if pair.shape != layer.w.shape:
            raise ProtocolError(
                f"broadcast shape {pair.shape} does not match layer {lid} shape {layer.w.shape}"
            )
        layer.adapter.shared = pair.copy()
        client.optimizer.reset((lid, "shared"))
        if strategy in ("zero_padding", "fedavg"):
            d_out, d_in = layer.w.shape
            layer.adapter.private = init_factor_pair(d_out, d_in, client.private_rank, client.init_rng)
            client.optimizer.reset((lid, "private"))


def _flatten_per_sample(grad_list, modules) -> tuple[np.ndarray, list]:
    """Stack per-sample factor gradients into (n, dim) rows; the shape
    table allows exact unflattening."""
    blocks = []
    shapes = []
    for layer_idx, per_layer in enumerate(grad_list):
        for name in modules:
            db, da = per_layer[name]
            n = db.shape[0]
            blocks.append(db.reshape(n, -1))
            blocks.append(da.reshape(n, -1))
            shapes.append((layer_idx, name, db.shape[1:], da.shape[1:]))
    return np.concatenate(blocks, axis=1), shapes


def _unflatten(vec: np.ndarray, shapes) -> list[dict[str, tuple[np.ndarray, np.ndarray]]]:
    n_layers = max(layer for layer, _, _, _ in shapes) + 1
    out = [dict() for _ in range(n_layers)]
    pos = 0
    for layer_idx, name, db_shape, da_shape in shapes:
        db_size = int(np.prod(db_shape))
        da_size = int(np.prod(da_shape))
        db = vec[pos : pos + db_size].reshape(db_shape)
        pos += db_size
        da = vec[pos : pos + da_size].reshape(da_shape)
        pos += da_size
        out[layer_idx][name] = (db, da)
    return out


def _apply_updates(client: ClientState, updates, modules) -> None:
    for layer, per_layer in zip(client.model.layers, updates):
        lid = layer.adapter.layer_id
        for name in modules:
            if name not in per_layer:
                continue
            db, da = per_layer[name]
            pair = getattr(layer.adapter, name)
            client.optimizer.step((lid, name, "b"), pair.b, db)
            client.optimizer.step((lid, name, "a"), pair.a, da)


def _train_step(client: ClientState, rc: RoundConfig, dp: DpParams) -> None:
    idx = client.next_batch(rc.batch_size)
    x = client.shard.features[idx]
    y = client.shard.labels[idx]
    model, offsets = client.model, client.offsets
    if dp.enabled and dp.scope == "all":
        ps = tasks.per_sample_grads(model, x, y, mode="composite", offsets=offsets)
        flat, shapes = _flatten_per_sample(ps, ("shared", "private"))
        noised = privacy.clip_and_noise(flat, dp, client.noise_rng)
        updates = _unflatten(noised, shapes)
        _apply_updates(client, updates, ("shared", "private"))
        return
    if dp.enabled:
        ps = tasks.per_sample_grads(model, x, y, mode="composite", offsets=offsets, modules=("shared",))
        flat, shapes = _flatten_per_sample(ps, ("shared",))
        noised = privacy.clip_and_noise(flat, dp, client.noise_rng)
        shared_updates = _unflatten(noised, shapes)
    else:
        shared_updates = tasks.mean_grads(model, x, y, mode="composite", offsets=offsets, modules=("shared",))
    private_updates = tasks.mean_grads(
        model, x, y, mode="private_only", offsets=offsets, modules=("private",)
    )
    _apply_updates(client, shared_updates, ("shared",))
    _apply_updates(client, private_updates, ("private",))


def build_upload(client: ClientState, strategy: str) -> bytes:
    """Serialize what the client sends to the server.

    Under selective stacking the payload holds shared factors only, so
    perturbing private factors cannot change a single payload byte; the
    baselines upload the whole adapter as one concatenated pair.
    """
    if strategy == "selective_stacking":
        upload = {
            layer.adapter.layer_id: layer.adapter.shared.copy() for layer in client.model.layers
        }
    else:
        upload = {
            layer.adapter.layer_id: concat_pairs([layer.adapter.shared, layer.adapter.private])
            for layer in client.model.layers
        }
    return serialize_module(upload)


def local_train(
    client: ClientState,
    broadcast: dict[int, FactorPair] | None,
    rc: RoundConfig,
    dp: DpParams,
    strategy: str = "selective_stacking",
    accum: dict[int, np.ndarray] | None = None,
    server_round: int = 0,
) -> bytes:
    """One client's round: adopt the broadcast, take E local steps, and
    return the serialized upload payload."""
    if len(client.shard) < 1:
        raise ProtocolError("client shard is empty")
    _adopt_broadcast(client, broadcast, strategy, accum, server_round)
    for _ in range(rc.local_steps):
        _train_step(client, rc, dp)
    return build_upload(client, strategy)


# ---------------------------------------------------------------------------
# Server round
# ---------------------------------------------------------------------------


def _participants(server: ServerState, clients: list[ClientState], rc: RoundConfig) -> list[ClientState]:
    if rc.participation >= 1.0:
        return list(clients)
    k = max(1, int(np.ceil(rc.participation * len(clients))))
    rng = np.random.default_rng(
        np.random.SeedSequence([server.seed, _STREAM_PARTICIPATION, server.round_index])
    )
    chosen = sorted(rng.choice(len(clients), size=k, replace=False).tolist())
    return [clients[i] for i in chosen]


def _round_weights(participants: list[ClientState], override: np.ndarray | None) -> np.ndarray:
    if override is not None:
        w = np.asarray([override[c.client_id] for c in participants], dtype=np.float64)
    else:
        w = np.asarray([len(c.shard) for c in participants], dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ProtocolError("aggregation weights sum to zero")
    return w / total


def _eval_model(client: ClientState, server: ServerState, personalized: bool) -> ToyModel:
    """Model a client would hold entering the next round: the fresh
    broadcast plus (selective only) its persisted private module."""
    strategy = server.config.strategy
    layers = []
    for layer in client.model.layers:
        lid = layer.adapter.layer_id
        d_out, d_in = layer.w.shape
        if server.shared is not None and strategy != "flora_stacking":
            shared = server.shared[lid]
        else:
            shared = zero_pair(d_out, d_in)
        if personalized and strategy == "selective_stacking":
            private = layer.adapter.private
        else:
            private = zero_pair(d_out, d_in)
        layers.append(
            FrozenLayer(w=layer.w, adapter=DualAdapter(shared=shared, private=private, layer_id=lid))
        )
    return ToyModel(layers=layers)


def _server_offsets(server: ServerState) -> list[np.ndarray] | None:
    if server.accum is None:
        return None
    return [server.accum[i] for i in sorted(server.accum)]


def _effective_rank(server: ServerState) -> float:
    per_layer = []
    if server.config.strategy == "flora_stacking":
        if server.round_index == 0:
            return 0.0
        for lid in sorted(server.accum):
            per_layer.append(linalg.svd(server.accum[lid]).rank)
    else:
        if server.shared is None:
            return 0.0
        for lid in sorted(server.shared):
            per_layer.append(linalg.svd(delta(server.shared[lid])).rank)
    return float(np.mean(per_layer))


def append_metrics(
    server: ServerState, clients: list[ClientState], rc: RoundConfig, dp: DpParams
) -> None:
    offsets = _server_offsets(server)
    accs = [
        tasks.evaluate(_eval_model(c, server, personalized=True), c.shard, offsets=offsets)
        for c in clients
    ]
    global_accs = [
        tasks.evaluate(_eval_model(c, server, personalized=False), c.shard, offsets=offsets)
        for c in clients
    ]
    steps = rc.local_steps * server.round_index
    if dp.enabled and dp.noise_multiplier > 0.0 and steps > 0:
        epsilon = privacy.account(dp, steps, dp.delta).epsilon
    elif dp.enabled and dp.noise_multiplier > 0.0:
        epsilon = 0.0
    else:
        epsilon = float("inf")
    row = {
        "round": server.round_index,
        "strategy": server.config.strategy,
        "mean_acc": float(np.mean(accs)),
        "client_std": tasks.client_std(accs),
        "eff_rank": _effective_rank(server),
        "epsilon": epsilon,
        "mean_acc_global": float(np.mean(global_accs)),
    }
    for c, acc in zip(clients, accs):
        row[f"acc_client_{c.client_id}"] = acc
    server.metrics.append(row)


def _record_trace(server: ServerState) -> None:
    if server.config.strategy == "flora_stacking":
        chunks = [_COUNT.pack(float(server.round_index)), _COUNT.pack(1.0)]
        for lid in sorted(server.accum):
            dense = server.accum[lid]
            chunks.append(_COUNT.pack(float(lid)))
            chunks.append(_COUNT.pack(float(dense.shape[0])))
            chunks.append(_COUNT.pack(float(dense.shape[1])))
            chunks.append(dense.astype("<f8").tobytes())
        server.trace.append(b"".join(chunks))
    elif server.shared is not None:
        payload = serialize_module(server.shared)
        server.trace.append(
            _COUNT.pack(float(server.round_index)) + _COUNT.pack(0.0) + payload
        )


def run_round(
    server: ServerState,
    clients: list[ClientState],
    rc: RoundConfig,
    dp: DpParams,
    execution_order: list[int] | None = None,
) -> ServerState:
    """Execute one communication round and append the round's metrics.

    execution_order permutes client scheduling only; uploads are buffered
    and sorted by client id, so the outcome cannot depend on it.
    """
    if not clients:
        raise ProtocolError("a round needs at least one participating client")
    t0 = time.perf_counter()
    participants = _participants(server, clients, rc)
    strategy = server.config.strategy
    schedule = participants if execution_order is None else [participants[i] for i in execution_order]
    payloads = {}
    for client in schedule:
        payloads[client.client_id] = local_train(
            client, server.shared, rc, dp, strategy=strategy, accum=server.accum,
            server_round=server.round_index,
        )
    ordered = sorted(payloads)
    uploads = [deserialize_module(payloads[cid]) for cid in ordered]
    weights = _round_weights(
        sorted(participants, key=lambda c: c.client_id), server.config.weights
    )

    layer_ids = sorted(uploads[0])
    cfg = server.config
    round_cfg = AggregationConfig(strategy=cfg.strategy, weights=weights, rank_budget=cfg.rank_budget)
    if strategy == "selective_stacking":
        server.shared = {
            lid: aggregation.aggregate_selective([u[lid] for u in uploads], round_cfg)
            for lid in layer_ids
        }
    elif strategy == "zero_padding":
        server.shared = {
            lid: aggregation.aggregate_zero_padding([u[lid] for u in uploads], round_cfg)
            for lid in layer_ids
        }
    elif strategy == "fedavg":
        server.shared = {
            lid: aggregation.aggregate_fedavg([u[lid] for u in uploads], round_cfg)
            for lid in layer_ids
        }
    else:
        server.accum = {
            lid: aggregation.aggregate_flora([u[lid] for u in uploads], round_cfg, server.accum[lid])
            for lid in layer_ids
        }
    server.round_index += 1
    _record_trace(server)
    append_metrics(server, clients, rc, dp)
    server.timings.append((server.round_index, (time.perf_counter() - t0) * 1e3))
    return server


# ---------------------------------------------------------------------------
# Whole experiments
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    metrics: list[dict]
    timings: list[tuple[int, float]]
    trace: list[bytes]
    server: ServerState
    clients: list[ClientState]

    def final(self) -> dict:
        return self.metrics[-1]


def build_experiment(cfg) -> tuple[ServerState, list[ClientState], RoundConfig, DpParams]:
    """Materialize dataset, shards, backbone, clients, and server from an
    ExperimentConfig-shaped object."""
    data_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    data = tasks.make_synthetic(cfg.num_classes, cfg.d_in, cfg.samples, cfg.client_shift, data_rng)
    part_seed = int(np.random.SeedSequence([cfg.seed, 2]).generate_state(1)[0])
    spec = tasks.PartitionSpec(
        num_clients=cfg.num_clients, dirichlet_alpha=cfg.dirichlet_alpha, seed=part_seed
    )
    shards = tasks.dirichlet_partition(data, spec)
    shift_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    shards = tasks.apply_feature_shift(shards, cfg.feature_shift, shift_rng)

    backbone_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
    dims = [cfg.d_in, cfg.num_classes] if cfg.model_layers == 1 else [cfg.d_in, cfg.hidden_dim, cfg.num_classes]
    backbone = tasks.make_backbone(dims, backbone_rng)

    rc = RoundConfig(
        total_rounds=cfg.total_rounds,
        local_steps=cfg.local_steps,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        optimizer=cfg.optimizer,
        participation=cfg.participation,
    )
    dp = DpParams(
        clip_norm=cfg.dp_clip_norm,
        noise_multiplier=cfg.dp_noise_multiplier,
        enabled=cfg.dp_enabled,
        scope=cfg.dp_scope,
    )
    clients = [
        make_client(k, shards[k], backbone, cfg.ranks[k], cfg.private_ranks[k], rc, cfg.seed)
        for k in range(cfg.num_clients)
    ]
    if cfg.weights is not None:
        weights = np.asarray(cfg.weights, dtype=np.float64)
        weights = weights / weights.sum()
    else:
        weights = np.asarray([len(s) for s in shards], dtype=np.float64)
        weights = weights / weights.sum()
    agg_cfg = AggregationConfig(
        strategy=cfg.strategy, weights=weights, rank_budget=cfg.rank_budget
    )
    server = ServerState(config=agg_cfg, layer_shapes=[w.shape for w in backbone], seed=cfg.seed)
    return server, clients, rc, dp


def run_experiment(cfg) -> ExperimentResult:
    """Round 0 evaluation plus T federated rounds, fully deterministic
    given cfg.seed."""
    server, clients, rc, dp = build_experiment(cfg)
    append_metrics(server, clients, rc, dp)
    for _ in range(rc.total_rounds):
        run_round(server, clients, rc, dp)
    return ExperimentResult(
        metrics=server.metrics,
        timings=server.timings,
        trace=server.trace,
        server=server,
        clients=clients,
    )


def broadcast_bytes(server: ServerState) -> bytes:
    """Canonical serialization of the current broadcast state (used by
    order-independence and golden-trace checks)."""
    if server.config.strategy == "flora_stacking":
        return b"".join(server.accum[lid].astype("<f8").tobytes() for lid in sorted(server.accum))
    if server.shared is None:
        return b""
    return serialize_module(server.shared)
