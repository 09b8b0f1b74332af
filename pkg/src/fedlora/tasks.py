"""Synthetic classification tasks, non-IID partitioning, and the toy
frozen-backbone model the federation trains.

The model is one or two frozen linear layers with a tanh in between and a
softmax cross-entropy head. Only adapter factors receive gradients; the
gradients are analytic (no autodiff) and are exposed both per sample (for
DP clipping) and as batch means.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from fedlora.adapters import FrozenLayer, delta
from fedlora.errors import ConfigError, ShapeError

_DS_HEADER = struct.Struct("<3d")


@dataclass
class Dataset:
    features: np.ndarray  # (n, d_in)
    labels: np.ndarray  # (n,) class indices
    num_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ShapeError("features must be (n, d_in) and labels (n,)")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ShapeError("features and labels disagree on sample count")
        if self.features.shape[0] < 1:
            raise ConfigError("a dataset needs at least one sample")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError("labels out of range")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class PartitionSpec:
    num_clients: int
    dirichlet_alpha: float
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError("need at least one client")
        if not self.dirichlet_alpha > 0.0:
            raise ConfigError("dirichlet alpha must be > 0")


def make_synthetic(num_classes: int, d_in: int, n: int, client_shift: float, seed) -> Dataset:
    """Gaussian class-conditional clusters with unit noise.

    client_shift scales the dispersion of the class means, i.e. how far
    apart the clusters sit relative to the noise.
    """
    if num_classes < 1 or d_in < 1:
        raise ConfigError("num_classes and d_in must be >= 1")
    if n < 1:
        raise ConfigError(f"sample count must be >= 1, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    means = rng.normal(0.0, client_shift, size=(num_classes, d_in))
    labels = rng.integers(0, num_classes, size=n)
    features = means[labels] + rng.normal(0.0, 1.0, size=(n, d_in))
    return Dataset(features=features, labels=labels, num_classes=num_classes)


def dirichlet_indices(labels: np.ndarray, num_clients: int, alpha: float, rng) -> list[np.ndarray]:
    """Sample index shards with per-class proportions ~ Dirichlet(alpha).

    Empty shards are repaired by moving one sample out of the largest
    shard per empty shard.
    """
    n = labels.shape[0]
    if num_clients > n:
        raise ConfigError(f"cannot split {n} samples across {num_clients} clients")
    shards: list[list[int]] = [[] for _ in range(num_clients)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(num_clients, alpha))
        bounds = (np.cumsum(props)[:-1] * len(idx)).astype(int)
        for k, chunk in enumerate(np.split(idx, bounds)):
            shards[k].extend(chunk.tolist())
    for k in range(num_clients):
        if not shards[k]:
            donor = max(range(num_clients), key=lambda j: len(shards[j]))
            shards[k].append(shards[donor].pop())
    return [np.sort(np.asarray(s, dtype=np.int64)) for s in shards]


def dirichlet_partition(d: Dataset, spec: PartitionSpec) -> list[Dataset]:
    """Split a dataset into disjoint per-client shards."""
    rng = np.random.default_rng(spec.seed)
    shards = dirichlet_indices(d.labels, spec.num_clients, spec.dirichlet_alpha, rng)
    return [
        Dataset(features=d.features[s], labels=d.labels[s], num_classes=d.num_classes)
        for s in shards
    ]


def apply_feature_shift(shards: list[Dataset], shift_scale: float, seed) -> list[Dataset]:
    """Add a per-client Gaussian mean offset to each shard's features,
    giving private modules genuinely client-specific signal to capture."""
    if shift_scale == 0.0:
        return shards
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for shard in shards:
        offset = rng.normal(0.0, shift_scale, size=shard.features.shape[1])
        out.append(
            Dataset(
                features=shard.features + offset,
                labels=shard.labels,
                num_classes=shard.num_classes,
            )
        )
    return out


def save_dataset(d: Dataset, path) -> None:
    """Flat binary dump: n, d_in, num_classes as little-endian float64,
    features row-major float64, labels int32."""
    with open(path, "wb") as fh:
        fh.write(_DS_HEADER.pack(float(len(d)), float(d.features.shape[1]), float(d.num_classes)))
        fh.write(d.features.astype("<f8").tobytes())
        fh.write(d.labels.astype("<i4").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    n_f, d_f, c_f = _DS_HEADER.unpack_from(buf, 0)
    n, d_in, num_classes = int(n_f), int(d_f), int(c_f)
    off = _DS_HEADER.size
    feats = np.frombuffer(buf, dtype="<f8", count=n * d_in, offset=off).reshape(n, d_in)
    off += n * d_in * 8
    labels = np.frombuffer(buf, dtype="<i4", count=n, offset=off)
    return Dataset(features=feats.copy(), labels=labels.copy(), num_classes=num_classes)


# ---------------------------------------------------------------------------
# Toy model
# ---------------------------------------------------------------------------

# Which adapter modules contribute to the effective weights of a pass.
MODES = {
    "composite": ("shared", "private"),
    "shared_only": ("shared",),
    "private_only": ("private",),
    "backbone": (),
}


@dataclass
class ToyModel:
    """One or two frozen layers with adapters; tanh between layers."""

    layers: list[FrozenLayer]

    def __post_init__(self):
        if len(self.layers) not in (1, 2):
            raise ConfigError("toy model supports 1 or 2 layers")

    @property
    def num_classes(self) -> int:
        return self.layers[-1].w.shape[0]

    @property
    def d_in(self) -> int:
        return self.layers[0].w.shape[1]


def make_backbone(dims: list[int], rng: np.random.Generator) -> list[np.ndarray]:
    """Frozen Gaussian weights, std 1/sqrt(fan_in), for consecutive dims."""
    return [
        rng.normal(0.0, 1.0 / np.sqrt(dims[i]), size=(dims[i + 1], dims[i]))
        for i in range(len(dims) - 1)
    ]


def _effective(model: ToyModel, mode: str, offsets) -> list[np.ndarray]:
    parts = MODES[mode]
    ws = []
    for i, layer in enumerate(model.layers):
        w = layer.w
        if offsets is not None:
            w = w + offsets[i]
        if "shared" in parts:
            w = w + delta(layer.adapter.shared)
        if "private" in parts:
            w = w + delta(layer.adapter.private)
        ws.append(w)
    return ws


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: ToyModel, x, mode: str = "composite", offsets=None) -> np.ndarray:
    """Logits for a batch x of shape (n, d_in)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.d_in:
        raise ShapeError(f"expected inputs of shape (n, {model.d_in})")
    ws = _effective(model, mode, offsets)
    h = x
    for i, w in enumerate(ws):
        h = h @ w.T
        if i < len(ws) - 1:
            h = np.tanh(h)
    return h


def loss(model: ToyModel, x, y, mode: str = "composite", offsets=None) -> float:
    """Mean softmax cross-entropy over the batch."""
    logits = forward(model, x, mode=mode, offsets=offsets)
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = np.asarray(y, dtype=np.int64)
    return float(-log_probs[np.arange(len(y)), y].mean())


def _backprop_states(model: ToyModel, x, y, mode: str, offsets):
    """Per-sample upstream gradients dL_i/dW_eff expressed as factored
    (left, right) pairs: G_i = outer(left_i, right_i)."""
    ws = _effective(model, mode, offsets)
    y = np.asarray(y, dtype=np.int64)
    onehot = np.eye(model.num_classes)[y]
    if len(ws) == 1:
        probs = _softmax(x @ ws[0].T)
        return [(probs - onehot, x)]
    a1 = np.tanh(x @ ws[0].T)
    probs = _softmax(a1 @ ws[1].T)
    d2 = probs - onehot
    d1 = (d2 @ ws[1]) * (1.0 - a1 * a1)
    return [(d1, x), (d2, a1)]


def per_sample_grads(
    model: ToyModel,
    x,
    y,
    mode: str = "composite",
    offsets=None,
    modules: tuple[str, ...] = ("shared", "private"),
) -> list[dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Per-sample analytic gradients of the per-sample loss with respect
    to the requested adapter factors.

    Returns one dict per layer mapping module name to (db, da) where db
    has shape (n, d_out, r) and da has shape (n, r, d_in). The frozen
    backbone never receives a gradient.
    """
    x = np.asarray(x, dtype=np.float64)
    states = _backprop_states(model, x, y, mode, offsets)
    out = []
    for layer, (left, right) in zip(model.layers, states):
        per_layer = {}
        for name in modules:
            pair = getattr(layer.adapter, name)
            db = np.einsum("no,nr->nor", left, right @ pair.a.T)
            da = np.einsum("nr,ni->nri", left @ pair.b, right)
            per_layer[name] = (db, da)
        out.append(per_layer)
    return out


def grads(model: ToyModel, x, y, offsets=None):
    """Per-sample adapter gradients of the joint (composite) loss."""
    return per_sample_grads(model, x, y, mode="composite", offsets=offsets)


def mean_grads(
    model: ToyModel,
    x,
    y,
    mode: str = "composite",
    offsets=None,
    modules: tuple[str, ...] = ("shared", "private"),
) -> list[dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Batch-mean adapter gradients; same structure as per_sample_grads
    without the leading sample axis."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    states = _backprop_states(model, x, y, mode, offsets)
    out = []
    for layer, (left, right) in zip(model.layers, states):
        per_layer = {}
        for name in modules:
            pair = getattr(layer.adapter, name)
            db = left.T @ (right @ pair.a.T) / n
            da = (left @ pair.b).T @ right / n
            per_layer[name] = (db, da)
        out.append(per_layer)
    return out


def evaluate(model: ToyModel, d: Dataset, mode: str = "composite", offsets=None) -> float:
    """Top-1 accuracy of the model on a dataset."""
    if len(d) < 1:
        raise ConfigError("cannot evaluate on an empty dataset")
    preds = forward(model, d.features, mode=mode, offsets=offsets).argmax(axis=1)
    return float(np.mean(preds == d.labels))


def client_std(accs) -> float:
    """Population standard deviation of per-client accuracies."""
    return float(np.std(np.asarray(accs, dtype=np.float64)))
