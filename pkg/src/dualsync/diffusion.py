"""Noise schedules, forward corruption and reverse update rules.

Timesteps are 1-based: ``t`` in ``[1, T]``. ``t = 0`` denotes clean data,
for which ``alpha_bar`` is 1.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dualsync.errors import ConfigError, ContractError, DimensionError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step coefficient tables; index ``t - 1`` holds step ``t``."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def _check(self, t: int, allow_zero: bool = False) -> int:
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ContractError(f"timestep {t} outside [{lo}, {self.T}]")
        return int(t)

    def abar(self, t: int) -> float:
        """alpha_bar at step ``t``; 1.0 at ``t = 0``."""
        t = self._check(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def abar_array(self, t) -> np.ndarray:
        """Vectorised :meth:`abar` for an integer array of timesteps."""
        t = np.asarray(t, dtype=np.int64)
        if t.size and (t.min() < 0 or t.max() > self.T):
            raise ContractError(f"timesteps outside [0, {self.T}]")
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "beta", "alpha", "alpha_bar", "sigma"])
            for i in range(self.T):
                writer.writerow([i + 1, repr(float(self.beta[i])), repr(float(self.alpha[i])),
                                 repr(float(self.alpha_bar[i])), repr(float(self.sigma[i]))])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear beta schedule."""
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma = np.sqrt(beta * (1.0 - prev) / (1.0 - alpha_bar))
    return NoiseSchedule(T=int(T), beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def _same_shape(*arrays) -> None:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise DimensionError(f"shape mismatch: {sorted(shapes)}")


def forward_sample(x0, t: int, eps, s: NoiseSchedule) -> np.ndarray:
    """Corrupt clean data in one shot: sqrt(abar) * x0 + sqrt(1 - abar) * eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _same_shape(x0, eps)
    ab = s.abar(s._check(t))
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def predict_x0(xt, t, eps_hat, s: NoiseSchedule) -> np.ndarray:
    """Invert the forward map given a noise estimate.

    ``t`` may be a scalar or one timestep per leading-axis item.
    """
    xt = np.asarray(xt, dtype=np.float64)
    ab = s.abar_array(t)
    ab = ab.reshape(ab.shape + (1,) * (xt.ndim - ab.ndim))
    return (xt - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddpm_step(xt, t: int, eps_hat, s: NoiseSchedule, z) -> np.ndarray:
    """Ancestral reverse step x_t -> x_{t-1}; noise is dropped at t = 1."""
    xt = np.asarray(xt, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    _same_shape(xt, eps_hat, z)
    t = s._check(t)
    beta = s.beta[t - 1]
    mean = (xt - beta / math.sqrt(1.0 - s.alpha_bar[t - 1]) * eps_hat) / math.sqrt(s.alpha[t - 1])
    if t == 1:
        return mean
    return mean + s.sigma[t - 1] * z


def ddim_step(xt, t: int, t_prev: int, eps_hat, s: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) jump from ``t`` to ``t_prev``.

    ``t_prev == t`` is the degenerate step and returns ``xt`` unchanged.
    """
    xt = np.asarray(xt, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _same_shape(xt, eps_hat)
    t = s._check(t)
    if t_prev > t or t_prev < 0:
        raise ContractError(f"ddim_step needs 0 <= t_prev <= t, got t={t}, t_prev={t_prev}")
    if t_prev == t:
        return xt
    ab = s.abar(t)
    ab_prev = s.abar(t_prev)
    x0_hat = (xt - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


@dataclass(frozen=True)
class ConsistencyParam:
    """Boundary-satisfying skip/output scalings for a consistency function.

    With ``u = timestep_scaling * (t - eps_min)``::

        c_skip = sigma_data**2 / (u**2 + sigma_data**2)
        c_out  = u / sqrt(u**2 + sigma_data**2)

    so ``c_skip(eps_min) = 1`` and ``c_out(eps_min) = 0``.
    """

    sigma_data: float = 0.5
    eps_min: int = 1
    timestep_scaling: float = 10.0

    def c_skip(self, t) -> np.ndarray:
        u = self.timestep_scaling * (np.asarray(t, dtype=np.float64) - self.eps_min)
        return self.sigma_data ** 2 / (u * u + self.sigma_data ** 2)

    def c_out(self, t) -> np.ndarray:
        u = self.timestep_scaling * (np.asarray(t, dtype=np.float64) - self.eps_min)
        return u / np.sqrt(u * u + self.sigma_data ** 2)


def consistency_apply(model_out, xt, t, p: ConsistencyParam, T: int | None = None):
    """c_skip(t) * xt + c_out(t) * model_out.

    Works on numpy arrays and on :class:`~dualsync.numerics.Tensor` values
    (the latter stays differentiable in ``model_out``). ``t`` may be a scalar
    or one timestep per leading-axis item.
    """
    t_arr = np.asarray(t)
    if t_arr.size and (t_arr.min() < p.eps_min or (T is not None and t_arr.max() > T)):
        raise ContractError(f"consistency timestep outside [{p.eps_min}, {T}]")
    ndim = np.ndim(xt)
    skip = p.c_skip(t_arr)
    out = p.c_out(t_arr)
    skip = skip.reshape(skip.shape + (1,) * (ndim - skip.ndim))
    out = out.reshape(out.shape + (1,) * (ndim - out.ndim))
    return skip * xt + out * model_out


def lcm_timesteps(s: NoiseSchedule, k: int, eps_min: int = 1) -> list[int]:
    """``k`` strictly decreasing timesteps spaced uniformly in alpha_bar between
    ``T`` and ``eps_min`` (both endpoints included when ``k >= 2``)."""
    if k < 1:
        raise ConfigError(f"need at least one sampling step, got {k}")
    if k > s.T - eps_min + 1:
        raise ConfigError(f"{k} steps do not fit between {eps_min} and {s.T}")
    if k == 1:
        return [s.T]
    targets = np.linspace(s.abar(s.T), s.abar(eps_min), k)
    grid = s.alpha_bar[eps_min - 1:]
    steps: list[int] = []
    for target in targets:
        t = int(np.argmin(np.abs(grid - target))) + eps_min
        if steps and t >= steps[-1]:
            t = steps[-1] - 1
        steps.append(t)
    # push collisions at the low end back up while keeping order
    steps[-1] = eps_min
    for i in range(len(steps) - 2, -1, -1):
        if steps[i] <= steps[i + 1]:
            steps[i] = steps[i + 1] + 1
    return steps


def ddim_timesteps(s: NoiseSchedule, k: int) -> list[int]:
    """``k`` uniformly spaced timesteps from T downwards; the final jump goes to 0."""
    if not 1 <= k <= s.T:
        raise ConfigError(f"ddim step count {k} outside [1, {s.T}]")
    return [int(v) for v in (np.arange(k, 0, -1) * s.T) // k]
