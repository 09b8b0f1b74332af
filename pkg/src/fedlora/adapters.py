"""LoRA factor pairs, the dual shared/private adapter, and frozen layers.

A FactorPair (a, b) represents the low-rank weight delta b @ a. Every
adapted layer carries two of them: a shared pair that takes part in
cross-client aggregation and a private pair that stays on the client.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from fedlora import linalg
from fedlora.errors import ShapeError

# Serialized FactorPair layout: rank, d_out, d_in, then b and a row-major,
# everything as little-endian float64.
_HEADER = struct.Struct("<3d")


@dataclass
class FactorPair:
    """One low-rank factorization: a is rank x d_in, b is d_out x rank."""

    a: np.ndarray
    b: np.ndarray
    rank: int = field(default=0)

    def __post_init__(self):
        self.a = linalg.as_matrix(self.a, "a")
        self.b = linalg.as_matrix(self.b, "b")
        if self.a.shape[0] != self.b.shape[1]:
            raise ShapeError(
                f"rank dimensions differ: a has {self.a.shape[0]} rows, b has {self.b.shape[1]} cols"
            )
        if self.rank == 0:
            self.rank = self.a.shape[0]
        if self.rank != self.a.shape[0]:
            raise ShapeError(f"declared rank {self.rank} != factor rank {self.a.shape[0]}")
        if self.rank < 1:
            raise ShapeError("rank must be >= 1")

    @property
    def d_in(self) -> int:
        return self.a.shape[1]

    @property
    def d_out(self) -> int:
        return self.b.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.d_out, self.d_in)

    def copy(self) -> "FactorPair":
        return FactorPair(a=self.a.copy(), b=self.b.copy())


def delta(p: FactorPair) -> np.ndarray:
    """Dense weight delta b @ a."""
    return linalg.matmul(p.b, p.a)


def zero_pair(d_out: int, d_in: int, rank: int = 1) -> FactorPair:
    return FactorPair(a=np.zeros((rank, d_in)), b=np.zeros((d_out, rank)))


def concat_pairs(pairs: list[FactorPair]) -> FactorPair:
    """Concatenate pairs along the rank dimension; the product of the
    result is the sum of the individual products."""
    if not pairs:
        raise ShapeError("cannot concatenate an empty list of factor pairs")
    shape = pairs[0].shape
    for p in pairs[1:]:
        if p.shape != shape:
            raise ShapeError(f"factor pairs disagree on layer shape: {p.shape} vs {shape}")
    return FactorPair(
        a=np.concatenate([p.a for p in pairs], axis=0),
        b=np.concatenate([p.b for p in pairs], axis=1),
    )


@dataclass
class DualAdapter:
    """Shared + private factor pair for one adapted layer."""

    shared: FactorPair
    private: FactorPair
    layer_id: int = 0

    def __post_init__(self):
        if self.shared.shape != self.private.shape:
            raise ShapeError(
                f"shared {self.shared.shape} and private {self.private.shape} modules disagree"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.shared.shape


def dual_delta(d: DualAdapter) -> np.ndarray:
    """Total delta: shared product plus private product."""
    return delta(d.shared) + delta(d.private)


@dataclass
class FrozenLayer:
    """Frozen backbone weights plus the trainable adapter on top."""

    w: np.ndarray
    adapter: DualAdapter

    def __post_init__(self):
        self.w = linalg.as_matrix(self.w, "w")
        if self.adapter.shape != self.w.shape:
            raise ShapeError(f"adapter shape {self.adapter.shape} != layer shape {self.w.shape}")


def effective_weight(layer: FrozenLayer) -> np.ndarray:
    """w + total adapter delta; w itself is left untouched."""
    return layer.w + dual_delta(layer.adapter)


def init_factor_pair(d_out: int, d_in: int, rank: int, rng: np.random.Generator) -> FactorPair:
    """Standard LoRA init: a ~ N(0, 1/d_in), b = 0, so the delta starts at zero."""
    a = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(rank, d_in))
    b = np.zeros((d_out, rank))
    return FactorPair(a=a, b=b)


def init_adapter(d_out, d_in, r_shared, r_private, seed, layer_id: int = 0) -> DualAdapter:
    """Fresh dual adapter; shared factors are drawn before private ones.

    seed may be an int or an existing numpy Generator.
    """
    if d_out < 1 or d_in < 1 or r_shared < 1 or r_private < 1:
        raise ShapeError("adapter dimensions and ranks must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shared = init_factor_pair(d_out, d_in, r_shared, rng)
    private = init_factor_pair(d_out, d_in, r_private, rng)
    return DualAdapter(shared=shared, private=private, layer_id=layer_id)


def serialize_pair(p: FactorPair) -> bytes:
    header = _HEADER.pack(float(p.rank), float(p.d_out), float(p.d_in))
    return header + p.b.astype("<f8").tobytes() + p.a.astype("<f8").tobytes()


def deserialize_pair(buf: bytes, offset: int = 0) -> tuple[FactorPair, int]:
    """Decode one pair from buf starting at offset; returns (pair, next offset)."""
    rank_f, d_out_f, d_in_f = _HEADER.unpack_from(buf, offset)
    rank, d_out, d_in = int(rank_f), int(d_out_f), int(d_in_f)
    offset += _HEADER.size
    nb = d_out * rank * 8
    b = np.frombuffer(buf, dtype="<f8", count=d_out * rank, offset=offset).reshape(d_out, rank)
    offset += nb
    na = rank * d_in * 8
    a = np.frombuffer(buf, dtype="<f8", count=rank * d_in, offset=offset).reshape(rank, d_in)
    offset += na
    return FactorPair(a=a.copy(), b=b.copy()), offset
