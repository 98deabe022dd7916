"""Linear-beta noise schedule and deterministic (eta = 0) DDIM stepping/inversion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConditionVariant, LatentTensor
from .errors import ScheduleError, StepUnderflowError, ValidationError

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal rates ``alpha_bar[0..T]`` with ``alpha_bar[0] == 1``.

    Construction does not validate so that degenerate schedules can be built
    for diagnostics; :func:`make_schedule` always returns a checked one.
    """

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64).copy()
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    def validate(self) -> "NoiseSchedule":
        ab = self.alpha_bar
        if ab.ndim != 1 or len(ab) < 2:
            raise ScheduleError("alpha_bar needs at least two entries")
        if ab[0] != 1.0:
            raise ScheduleError("alpha_bar[0] must be 1")
        if not np.all(np.diff(ab) < 0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        if not ab[-1] > 0:
            raise ScheduleError("alpha_bar[T] must be positive")
        return self


def make_schedule(T: int, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be an integer >= 1, got {T!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alpha_bar).validate()


def refined_schedule(T: int, base_T: int = 50, beta_start: float = DEFAULT_BETA_START,
                     beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Schedule for ``T`` steps covering the same noise range as ``base_T`` steps.

    Betas are scaled by ``base_T / T`` so the total noise stays roughly fixed
    while the steps shrink; ``refined_schedule(base_T)`` equals
    ``make_schedule(base_T)``. Used to study discretisation error.
    """
    scale = base_T / T
    return make_schedule(T, beta_start * scale, beta_end * scale)


def _transfer(z: np.ndarray, eps: np.ndarray, a_from: float, a_to: float) -> np.ndarray:
    # predict x0 at a_from, re-noise deterministically to a_to
    a_from = np.float32(a_from)
    a_to = np.float32(a_to)
    x0 = (z - np.sqrt(np.float32(1) - a_from) * eps) / np.sqrt(a_from)
    return np.sqrt(a_to) * x0 + np.sqrt(np.float32(1) - a_to) * eps


def _check_eps(z: LatentTensor, eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float32)
    if eps.shape != z.shape:
        raise ValidationError(f"eps shape {eps.shape} does not match latent shape {z.shape}")
    return eps


def ddim_step(z: LatentTensor, eps, schedule: NoiseSchedule) -> LatentTensor:
    """One deterministic DDIM update from timestep ``i`` to ``i - 1``."""
    i = z.timestep
    if i < 1:
        raise StepUnderflowError("cannot step below timestep 0")
    if i > schedule.T:
        raise ValidationError(f"timestep {i} outside schedule of length {schedule.T}")
    eps = _check_eps(z, eps)
    out = _transfer(z.data, eps, schedule.alpha_bar[i], schedule.alpha_bar[i - 1])
    return LatentTensor(out, i - 1)


def ddim_inverse_step(z: LatentTensor, eps, schedule: NoiseSchedule) -> LatentTensor:
    """Algebraic inverse of :func:`ddim_step`: timestep ``i`` to ``i + 1``."""
    i = z.timestep
    if i >= schedule.T:
        raise ValidationError(f"cannot invert past timestep T={schedule.T}")
    eps = _check_eps(z, eps)
    out = _transfer(z.data, eps, schedule.alpha_bar[i], schedule.alpha_bar[i + 1])
    return LatentTensor(out, i + 1)


def ddim_invert(z0: LatentTensor, backend, cond, schedule: NoiseSchedule) -> LatentTensor:
    """Map a clean latent to timestep T with the reversed DDIM recurrence.

    The noise for the move ``i - 1 -> i`` is predicted at the current latent
    with timestep ``i``. Guidance is never applied here.
    """
    if z0.timestep != 0:
        raise ValidationError(f"inversion starts at timestep 0, got {z0.timestep}")
    if cond.variant != ConditionVariant.EMPTY:
        raise ValidationError("inversion uses the empty condition")
    z = z0
    for i in range(1, schedule.T + 1):
        eps = backend.denoise(z.data, cond, i)
        z = ddim_inverse_step(z, eps, schedule)
    return z


def ddim_sample(zT: LatentTensor, eps_fn, schedule: NoiseSchedule) -> LatentTensor:
    """Run ``zT`` down to timestep 0; ``eps_fn(z, s, i)`` predicts the noise."""
    z = zT
    T = schedule.T
    for s in range(1, T + 1):
        i = T - s + 1
        if z.timestep != i:
            raise ValidationError(f"latent at timestep {z.timestep}, expected {i}")
        z = ddim_step(z, eps_fn(z, s, i), schedule)
    return z
