"""Server-side aggregation of client adapter uploads.

Four strategies:

* selective_stacking: concatenate the clients' shared factors along the
  rank dimension (weights folded into the b factors), then re-compress
  with a truncated SVD only when the stacked rank exceeds the budget.
* zero_padding: pad every upload to the largest uploaded rank and average
  the factors entry-wise. Averaging factors rather than deltas is biased
  (the cross terms dilute client-specific directions); it is kept as a
  reference behaviour.
* fedavg: plain factor-wise weighted average, only defined when all
  uploads share one rank.
* flora_stacking: fold the weighted sum of whole-adapter deltas into a
  dense server accumulator; clients reinitialize their adapters each
  round.

Weights are applied to the b factor only, so the stacked product equals
the weighted sum of the client products exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedlora import linalg
from fedlora.adapters import FactorPair, delta
from fedlora.errors import ConfigError, ShapeError

STRATEGIES = ("selective_stacking", "zero_padding", "fedavg", "flora_stacking")

WEIGHT_SUM_TOL = 1e-12


@dataclass
class AggregationConfig:
    strategy: str
    weights: np.ndarray
    rank_budget: int

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown aggregation strategy: {self.strategy!r}")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1:
            raise ConfigError("weights must be a flat list")
        if np.any(self.weights < 0.0):
            raise ConfigError("aggregation weights must be non-negative")
        if abs(float(self.weights.sum()) - 1.0) > WEIGHT_SUM_TOL:
            raise ConfigError(f"aggregation weights sum to {self.weights.sum()!r}, expected 1")
        if self.rank_budget < 1:
            raise ConfigError(f"rank budget must be >= 1, got {self.rank_budget}")


@dataclass
class SharedModuleUpdate:
    """Broadcastable shared module: one factor pair per adapted layer."""

    layers: dict[int, FactorPair] = field(default_factory=dict)
    round_index: int = 0


def _check_uploads(pairs: list[FactorPair], weights) -> np.ndarray:
    if not pairs:
        raise ShapeError("no uploads to aggregate")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(pairs),):
        raise ShapeError(f"got {len(pairs)} uploads but {w.shape} weights")
    shape = pairs[0].shape
    for p in pairs[1:]:
        if p.shape != shape:
            raise ShapeError(f"uploads disagree on layer shape: {p.shape} vs {shape}")
    return w


def stack(shared_updates: list[FactorPair], weights) -> FactorPair:
    """Concatenate factor pairs along the rank dimension, in the given
    (ascending client id) order, scaling each b factor by its weight.

    The product of the result equals sum_k w_k * b_k @ a_k.
    """
    w = _check_uploads(shared_updates, weights)
    a = np.concatenate([p.a for p in shared_updates], axis=0)
    b = np.concatenate([wk * p.b for wk, p in zip(w, shared_updates)], axis=1)
    return FactorPair(a=a, b=b)


def recompress(dense_delta, r_max: int) -> FactorPair:
    """Best Frobenius rank-r_max factorization of a dense delta.

    The truncated SVD is split evenly: b = u_r * sqrt(s_r) and
    a = sqrt(s_r) * v_t_r. Components with singular value at or below the
    rank tolerance are dropped, so the returned rank is
    min(r_max, numerical rank); a zero delta yields a rank-1 zero pair.
    """
    if r_max < 1:
        raise ShapeError(f"rank budget must be >= 1, got {r_max}")
    dense_delta = linalg.as_matrix(dense_delta, "delta")
    res = linalg.truncate_svd(linalg.svd(dense_delta), r_max)
    keep = int(np.sum(res.singular_values > linalg.RANK_TOL))
    if keep == 0:
        return FactorPair(
            a=np.zeros((1, dense_delta.shape[1])), b=np.zeros((dense_delta.shape[0], 1))
        )
    root = np.sqrt(res.singular_values[:keep])
    return FactorPair(a=root[:, None] * res.v_t[:keep, :], b=res.u[:, :keep] * root)


def aggregate_selective(shared_updates: list[FactorPair], config: AggregationConfig) -> FactorPair:
    """Stack the shared uploads of one layer; re-compress to the rank
    budget only when the stacked (structural) rank exceeds it."""
    stacked = stack(shared_updates, config.weights)
    if stacked.rank > config.rank_budget:
        return recompress(delta(stacked), config.rank_budget)
    return stacked


def aggregate_selective_update(
    per_client_modules: list[dict[int, FactorPair]],
    config: AggregationConfig,
    round_index: int = 0,
) -> SharedModuleUpdate:
    """Selective stacking over whole shared modules (all adapted layers).

    per_client_modules must be in ascending client-id order; every
    returned factor pair respects the rank budget.
    """
    if not per_client_modules:
        raise ShapeError("no uploads to aggregate")
    layer_ids = sorted(per_client_modules[0])
    layers = {
        lid: aggregate_selective([m[lid] for m in per_client_modules], config)
        for lid in layer_ids
    }
    return SharedModuleUpdate(layers=layers, round_index=round_index)


def aggregate_zero_padding(full_adapters: list[FactorPair], config: AggregationConfig) -> FactorPair:
    """Pad every upload to the largest uploaded rank, then average the
    factors entry-wise with the aggregation weights."""
    w = _check_uploads(full_adapters, config.weights)
    d_out, d_in = full_adapters[0].shape
    r_pad = max(p.rank for p in full_adapters)
    a_bar = np.zeros((r_pad, d_in))
    b_bar = np.zeros((d_out, r_pad))
    for wk, p in zip(w, full_adapters):
        a_bar[: p.rank, :] += wk * p.a
        b_bar[:, : p.rank] += wk * p.b
    return FactorPair(a=a_bar, b=b_bar)


def aggregate_fedavg(full_adapters: list[FactorPair], config: AggregationConfig) -> FactorPair:
    """Factor-wise weighted average; requires one common rank."""
    w = _check_uploads(full_adapters, config.weights)
    ranks = {p.rank for p in full_adapters}
    if len(ranks) > 1:
        raise ConfigError(
            f"fedavg requires homogeneous adapter ranks, got {sorted(ranks)}"
        )
    a_bar = sum(wk * p.a for wk, p in zip(w, full_adapters))
    b_bar = sum(wk * p.b for wk, p in zip(w, full_adapters))
    return FactorPair(a=a_bar, b=b_bar)


def aggregate_flora(
    full_adapters: list[FactorPair], config: AggregationConfig, server_accum
) -> np.ndarray:
    """Monolithic stacking: fold the weighted sum of whole-adapter deltas
    into the dense server accumulator and return the new accumulator.
    Callers must reinitialize client adapters afterwards."""
    accum = linalg.as_matrix(server_accum, "server_accum")
    stacked = stack(full_adapters, config.weights)
    if stacked.shape != accum.shape:
        raise ShapeError(f"accumulator shape {accum.shape} != upload shape {stacked.shape}")
    return accum + delta(stacked)
