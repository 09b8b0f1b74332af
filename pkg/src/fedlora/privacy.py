"""Per-sample gradient clipping with Gaussian noise, and the matching
Renyi-DP accountant.

The mechanism is the classic one: scale each per-sample gradient to norm
at most C, sum, add N(0, (sigma * C)^2) per coordinate, divide by the
batch size. The accountant assumes every client participates in every
round (no subsampling amplification), composes steps linearly in the RDP
domain, and converts to (epsilon, delta) over a fixed alpha grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fedlora.errors import ConfigError

# Orders used for the RDP-to-(epsilon, delta) conversion.
ALPHA_GRID = (1.25, 1.5) + tuple(float(a) for a in range(2, 65))

DEFAULT_DELTA = 1e-5


@dataclass
class DpParams:
    clip_norm: float = 1.0
    noise_multiplier: float = 0.0
    enabled: bool = False
    # "shared" noises only the shared-module gradients; "all" noises the
    # whole adapter (used by the unconstrained comparison runs).
    scope: str = "shared"
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if not self.clip_norm > 0.0:
            raise ConfigError(f"clip norm must be > 0, got {self.clip_norm}")
        if self.noise_multiplier < 0.0:
            raise ConfigError(f"noise multiplier must be >= 0, got {self.noise_multiplier}")
        if self.scope not in ("shared", "all"):
            raise ConfigError(f"dp scope must be 'shared' or 'all', got {self.scope!r}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must be in (0, 1), got {self.delta}")


@dataclass
class PrivacySpend:
    steps: int
    epsilon: float
    delta: float = DEFAULT_DELTA


def clip_and_noise(per_sample_grads, params: DpParams, rng: np.random.Generator) -> np.ndarray:
    """Clipped, noised mean gradient of one batch.

    per_sample_grads is an (n, dim) array (or list of vectors), one row
    per sample. Each row is scaled by min(1, C / ||row||), the rows are
    summed, Gaussian noise with per-coordinate std sigma * C is added to
    the sum, and the result is divided by n.
    """
    grads = np.asarray(per_sample_grads, dtype=np.float64)
    if grads.ndim == 1:
        grads = grads[None, :]
    if grads.shape[0] == 0:
        raise ValueError("cannot clip an empty batch of gradients")
    norms = np.sqrt(np.sum(grads * grads, axis=1))
    scale = np.ones_like(norms)
    over = norms > params.clip_norm
    scale[over] = params.clip_norm / norms[over]
    total = (grads * scale[:, None]).sum(axis=0)
    if params.noise_multiplier > 0.0:
        total = total + rng.normal(
            0.0, params.noise_multiplier * params.clip_norm, size=total.shape
        )
    return total / grads.shape[0]


def rdp_epsilon(alpha: float, sigma: float, steps: int) -> float:
    """RDP of `steps` compositions of the Gaussian mechanism at order alpha."""
    return steps * alpha / (2.0 * sigma * sigma)


def account(params: DpParams, steps: int, delta: float = DEFAULT_DELTA) -> PrivacySpend:
    """(epsilon, delta) spend after `steps` noise additions.

    epsilon = min over the alpha grid of
    steps * alpha / (2 sigma^2) + log(1/delta) / (alpha - 1).
    sigma = 0 gives the infinite-epsilon marker.
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if not 0.0 < delta < 1.0:
        raise ConfigError(f"delta must be in (0, 1), got {delta}")
    sigma = params.noise_multiplier
    if sigma == 0.0:
        return PrivacySpend(steps=steps, epsilon=math.inf, delta=delta)
    log_inv_delta = math.log(1.0 / delta)
    eps = min(
        rdp_epsilon(alpha, sigma, steps) + log_inv_delta / (alpha - 1.0)
        for alpha in ALPHA_GRID
    )
    return PrivacySpend(steps=steps, epsilon=eps, delta=delta)
