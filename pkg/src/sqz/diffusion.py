"""Variance-exploding diffusion core: schedule, noising, loss, and sampler.

The sampler is a deterministic Euler integration of the probability-flow ODE
over a geometric level ladder ending at exactly zero, with optional hard
consistency: known coordinates are re-imposed (noised to the current level)
after every step, so they survive to the output bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .nn import Tensor
from .rng import Rng

__all__ = ["Rng", "NoiseSchedule", "make_schedule", "add_noise", "refine_loss", "sample"]

DEFAULT_STEPS = 50
SIGMA_MAX_MULT = 80.0
SIGMA_MIN_MULT = 0.002


@dataclass(frozen=True)
class NoiseSchedule:
    """Strictly decreasing noise levels sigma_0 = sigma_max > ... > sigma_N = 0."""

    levels: np.ndarray

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=np.float64)
        if levels.ndim != 1 or levels.size < 2:
            raise DomainError("schedule needs at least two levels")
        if levels[-1] != 0.0:
            raise DomainError("schedule must terminate at exactly zero")
        if not np.all(np.diff(levels) < 0):
            raise DomainError("schedule levels must be strictly decreasing")
        object.__setattr__(self, "levels", levels)

    @property
    def n_steps(self) -> int:
        return self.levels.size - 1

    @property
    def sigma_max(self) -> float:
        return float(self.levels[0])

    def to_dict(self) -> dict:
        return {"levels": self.levels.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(np.asarray(d["levels"]))


def make_schedule(n_steps: int, sigma_max: float, sigma_min: float) -> NoiseSchedule:
    """Geometric interior levels with a terminal zero.

    sigma_i = sigma_max * (sigma_min / sigma_max)^(i / (N-1)) for i < N,
    then sigma_N = 0.
    """
    if n_steps < 2:
        raise DomainError(f"n_steps must be >= 2, got {n_steps}")
    if not (sigma_max > sigma_min > 0):
        raise DomainError(f"need sigma_max > sigma_min > 0, got {sigma_max}, {sigma_min}")
    i = np.arange(n_steps)
    interior = sigma_max * (sigma_min / sigma_max) ** (i / (n_steps - 1))
    return NoiseSchedule(np.concatenate([interior, [0.0]]))


def data_scaled_schedule(sigma_data: float, n_steps: int = DEFAULT_STEPS) -> NoiseSchedule:
    """Default ladder scaled to the training data's standard deviation."""
    return make_schedule(n_steps, SIGMA_MAX_MULT * sigma_data, SIGMA_MIN_MULT * sigma_data)


def add_noise(y: np.ndarray, sigma: float, rng: Rng) -> np.ndarray:
    """y + sigma * eps with eps drawn standard normal from ``rng``."""
    if sigma < 0:
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    y = np.asarray(y, dtype=np.float64)
    if sigma == 0:
        return y.copy()
    return y + sigma * rng.normal(y.shape)


def refine_loss(denoiser, m0: np.ndarray, cond: np.ndarray, schedule: NoiseSchedule, rng: Rng) -> Tensor:
    """Denoising MSE at a uniformly drawn interior noise level.

    The denoiser predicts the clean target directly; the loss is the mean
    squared error between that prediction and ``m0``.  Returns the scalar
    loss tensor (call ``backward`` on it for parameter gradients).
    """
    m0 = np.asarray(m0, dtype=np.float64)
    idx = int(rng.integers(0, schedule.n_steps))
    sigma = float(schedule.levels[idx])
    noisy = add_noise(m0, sigma, rng)
    pred = denoiser.forward(noisy, sigma, cond)
    diff = pred - Tensor(m0.astype(pred.data.dtype))
    return (diff * diff).mean()


def sample(
    denoise_fn,
    shape: tuple,
    schedule: NoiseSchedule,
    rng: Rng,
    known_mask: np.ndarray | None = None,
    known_values: np.ndarray | None = None,
) -> np.ndarray:
    """Euler probability-flow sampling from sigma_max down to zero.

    ``denoise_fn(x, sigma) -> x0_estimate`` is evaluated once per step.  When
    ``known_mask`` is given (True = known coordinate, frame-vector or full
    shape), the known coordinates are overwritten with ``known_values`` noised
    to the next level after every step; at the terminal zero level they are
    therefore exact.
    """
    levels = schedule.levels
    x = levels[0] * rng.normal(shape)
    mask = None
    if known_mask is not None:
        if known_values is None:
            raise DomainError("known_mask given without known_values")
        mask = np.asarray(known_mask, dtype=bool)
        if mask.ndim == 1:
            mask = np.broadcast_to(mask[:, None], shape)
        known_values = np.asarray(known_values, dtype=np.float64)
    for i in range(schedule.n_steps):
        sigma = float(levels[i])
        d = (x - denoise_fn(x, sigma)) / sigma
        x = x + (levels[i + 1] - sigma) * d
        if mask is not None:
            renoised = known_values + levels[i + 1] * rng.normal(shape)
            x = np.where(mask, renoised, x)
    return x
