"""Sampling plans: strategy, per-branch timestep lists and the interleave map."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from dualsync.diffusion import NoiseSchedule, ddim_timesteps, lcm_timesteps
from dualsync.errors import ConfigError

STRATEGIES = ("ddpm", "ddim", "lcm_sync", "lcm_async")
DEFAULT_STEPS = {"ddim": (25, 25), "lcm_sync": (8, 8), "lcm_async": (4, 8)}


def interleave_map(steps_exp: int, steps_ges: int) -> list[int]:
    """Expression step i is co-scheduled with gesture step floor(i * T_ges / T_exp)."""
    return [(i * steps_ges) // steps_exp for i in range(steps_exp)]


@dataclass(frozen=True)
class SamplerPlan:
    strategy: str
    steps_exp: int
    steps_ges: int
    timesteps_exp: tuple[int, ...]
    timesteps_ges: tuple[int, ...]
    interleave: tuple[int, ...]
    seed: int = 0
    eps_min: int = 1
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if len(self.timesteps_exp) != self.steps_exp or len(self.timesteps_ges) != self.steps_ges:
            raise ConfigError("timestep lists do not match step counts")
        if self.steps_exp < 1 or self.steps_ges < 1:
            raise ConfigError("each branch needs at least one step")
        if self.strategy == "lcm_async":
            if self.steps_exp > self.steps_ges:
                raise ConfigError(f"asynchronous plan needs steps_exp <= steps_ges, "
                                  f"got {self.steps_exp} > {self.steps_ges}")
        elif self.steps_exp != self.steps_ges or self.timesteps_exp != self.timesteps_ges:
            raise ConfigError(f"{self.strategy} steps both branches on the same timesteps")
        if not self.interleave:
            raise ConfigError("empty interleave map")
        if len(self.interleave) != self.steps_exp:
            raise ConfigError("interleave map must cover every expression step")
        if any(b < a for a, b in zip(self.interleave, self.interleave[1:])):
            raise ConfigError("interleave map must be non-decreasing")
        if self.interleave[0] != 0 or self.interleave[-1] >= self.steps_ges:
            raise ConfigError("interleave map must start at 0 and stay within gesture steps")
        for lst in (self.timesteps_exp, self.timesteps_ges):
            if any(b >= a for a, b in zip(lst, lst[1:])):
                raise ConfigError("timesteps must be strictly decreasing")

    @property
    def is_lcm(self) -> bool:
        return self.strategy.startswith("lcm")

    @property
    def staleness_bound(self) -> int:
        return math.ceil(max(self.steps_ges, self.steps_exp) / min(self.steps_exp, self.steps_ges))

    def timesteps(self, branch: str) -> tuple[int, ...]:
        return self.timesteps_exp if branch == "exp" else self.timesteps_ges

    def steps(self, branch: str) -> int:
        return self.steps_exp if branch == "exp" else self.steps_ges

    def with_seed(self, seed: int) -> "SamplerPlan":
        return SamplerPlan(self.strategy, self.steps_exp, self.steps_ges, self.timesteps_exp,
                           self.timesteps_ges, self.interleave, seed, self.eps_min)


def make_plan(strategy: str, schedule: NoiseSchedule, steps_exp: int | None = None,
              steps_ges: int | None = None, seed: int = 0, eps_min: int = 1) -> SamplerPlan:
    """Build a plan with the strategy's default step counts where not given."""
    strategy = strategy.replace("-", "_")
    if strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    if strategy == "ddpm":
        default = (schedule.T, schedule.T)
    else:
        default = DEFAULT_STEPS[strategy]
    k_e = default[0] if steps_exp is None else int(steps_exp)
    k_g = default[1] if steps_ges is None else int(steps_ges)
    if k_e < 1 or k_g < 1:
        raise ConfigError("step counts must be positive")

    def grid(k: int) -> tuple[int, ...]:
        if strategy == "ddpm":
            if k != schedule.T:
                raise ConfigError(f"ddpm runs all {schedule.T} steps, got {k}")
            return tuple(range(schedule.T, 0, -1))
        if strategy == "ddim":
            return tuple(ddim_timesteps(schedule, k))
        return tuple(lcm_timesteps(schedule, k, eps_min))

    if strategy == "lcm_async" and k_e > k_g:
        raise ConfigError(f"asynchronous plan needs steps_exp <= steps_ges, got {k_e} > {k_g}")
    return SamplerPlan(strategy, k_e, k_g, grid(k_e), grid(k_g),
                       tuple(interleave_map(k_e, k_g)), seed, eps_min)
