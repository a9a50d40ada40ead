"""Lockstep and asynchronous samplers driving the per-branch coroutines.

Every sampling step of a branch is one pass of its coroutine. At each layer
the pass publishes its post-self-attention features to the
:class:`FeatureBuffer` and receives the counterpart's most recent features
of the same layer. Co-scheduled steps advance layer by layer, expression
publishing first, so within such a step both branches see each other's
current features; the remaining steps read whatever the buffer holds.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from dualsync.diffusion import (ConsistencyParam, NoiseSchedule, consistency_apply, ddim_step,
                                ddpm_step, predict_x0)
from dualsync.errors import ConfigError, ContractError
from dualsync.model import BRANCHES
from dualsync.numerics import Tensor, no_grad
from dualsync.sampler.buffer import FeatureBuffer
from dualsync.sampler.plan import SamplerPlan

OTHER = {"exp": "ges", "ges": "exp"}


@dataclass
class GenerationResult:
    expression: np.ndarray
    gesture: np.ndarray
    wall_time_exp: float
    wall_time_ges: float
    wall_time: float
    steps_exp: int
    steps_ges: int
    trace: list[dict] = field(default_factory=list)
    clips: list = field(default_factory=list)   # raw per-clip outputs for long generation
    starts: list[int] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return self.expression.shape[-2]


def branch_rngs(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(2)
    return {"exp": np.random.default_rng(children[0]), "ges": np.random.default_rng(children[1])}


class BranchState:
    """Noisy sample, position in the timestep list and the update rule of one branch."""

    def __init__(self, branch: str, model, plan: SamplerPlan, schedule: NoiseSchedule,
                 shape: tuple[int, ...], rng: np.random.Generator, param: ConsistencyParam,
                 condition: Callable | None = None):
        self.branch = branch
        self.model = model
        self.plan = plan
        self.schedule = schedule
        self.rng = rng
        self.param = param
        self.condition = condition
        self.timesteps = plan.timesteps(branch)
        self.x = rng.standard_normal(shape)
        self.step = 0
        self.output: np.ndarray | None = None
        self.elapsed = 0.0
        self.calls = 0

    @property
    def done(self) -> bool:
        return self.step >= len(self.timesteps)

    @property
    def t(self) -> int:
        return self.timesteps[self.step]

    def coroutine(self, aud):
        if self.condition is not None:
            self.x = self.condition(self.branch, self.t, self.x)
        t = np.full(self.x.shape[0], self.t)
        self.calls += 1
        return self.model.branch_coroutine(self.branch, Tensor(self.x), t, aud)

    def _x0(self, pred: np.ndarray) -> np.ndarray:
        if self.model.config.prediction == "x0":
            return pred
        return predict_x0(self.x, np.full(self.x.shape[0], self.t), pred, self.schedule)

    def _eps(self, pred: np.ndarray) -> np.ndarray:
        if self.model.config.prediction == "eps":
            return pred
        ab = self.schedule.abar(self.t)
        return (self.x - math.sqrt(ab) * pred) / math.sqrt(1.0 - ab)

    def advance(self, pred: np.ndarray) -> None:
        """Apply the strategy's update with the network output of this step."""
        t = self.t
        last = self.step == len(self.timesteps) - 1
        s = self.schedule
        strategy = self.plan.strategy
        if strategy == "ddpm":
            z = self.rng.standard_normal(self.x.shape)
            self.x = ddpm_step(self.x, t, self._eps(pred), s, z)
        elif strategy == "ddim":
            t_next = 0 if last else self.timesteps[self.step + 1]
            self.x = ddim_step(self.x, t, t_next, self._eps(pred), s)
        else:
            x0 = consistency_apply(self._x0(pred), self.x, np.full(self.x.shape[0], t), self.param, s.T)
            if last:
                self.x = x0
            else:
                ab = s.abar(self.timesteps[self.step + 1])
                z = self.rng.standard_normal(self.x.shape)
                self.x = math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * z
        self.step += 1
        if self.done:
            self.output = self.x


def lag_of(own_step: int, own_total: int, other_total: int, writer_step: int) -> int:
    """Counterpart steps between the co-scheduled position and the features read."""
    return max(0, math.ceil(own_step * other_total / own_total) - writer_step)


class _Exchange:
    """Publishing and reading through the buffer, with trace recording."""

    def __init__(self, model, plan: SamplerPlan, buffer: FeatureBuffer, replay: list[dict] | None = None,
                 replay_buffer: FeatureBuffer | None = None):
        self.model = model
        self.plan = plan
        self.buffer = buffer
        self.trace: list[dict] = []
        self._lock = threading.Lock()
        self._replay = None
        if replay is not None:
            self._replay = {}
            for rec in replay:
                self._replay.setdefault((rec["branch"], rec["layer"], rec["own_step"]), rec)
            self._replay_buffer = replay_buffer

    def publish(self, state: BranchState, layer: int, feats: Tensor) -> None:
        self.buffer.write(state.branch, layer, feats.data, state.step)

    def read(self, state: BranchState, layer: int, feats: Tensor):
        if not self.model.receives(state.branch):
            return None
        other = OTHER[state.branch]
        if self._replay is not None:
            rec = self._replay[(state.branch, layer, state.step)]
            if rec["counterpart_version"] == 0:
                snap = None
            else:
                snap = self._replay_buffer.version_of(other, layer, rec["counterpart_version"])
        else:
            snap = self.buffer.read(other, layer)
        if snap is None:
            data, version, writer = feats.data, 0, -1     # cold start: own features stand in
        else:
            data, version, writer = snap.data, snap.version, snap.writer_step
        rec = {"branch": state.branch, "layer": layer, "own_step": state.step,
               "counterpart_version": version,
               "lag": lag_of(state.step, self.plan.steps(state.branch), self.plan.steps(other), writer)}
        with self._lock:
            self.trace.append(rec)
        return Tensor(data)


def _drive(states: list[BranchState], exchange: _Exchange, aud: Tensor) -> None:
    """Run one step of each given branch, advancing them layer by layer together."""
    cos = {}
    pending = {}
    for st in states:
        t0 = time.perf_counter()
        cos[st.branch] = st.coroutine(aud)
        pending[st.branch] = next(cos[st.branch])
        st.elapsed += time.perf_counter() - t0
    by_name = {st.branch: st for st in states}
    while pending:
        for b, (layer, feats) in pending.items():
            exchange.publish(by_name[b], layer, feats)
        nxt = {}
        for b, (layer, feats) in pending.items():
            other = exchange.read(by_name[b], layer, feats)
            t0 = time.perf_counter()
            try:
                nxt[b] = cos[b].send(other)
            except StopIteration as stop:
                out, _ = stop.value
                by_name[b].advance(out.data)
            by_name[b].elapsed += time.perf_counter() - t0
        pending = nxt


def _prepare(model, aud) -> tuple[Tensor, bool]:
    aud = np.asarray(aud, dtype=np.float64)
    squeeze = aud.ndim == 2
    if squeeze:
        aud = aud[None]
    if aud.ndim != 3 or aud.shape[-1] != model.config.audio_dim:
        raise ContractError(f"audio features must be (B, N, {model.config.audio_dim}), got {aud.shape}")
    if aud.shape[1] < 1:
        raise ContractError("audio has no frames")
    return Tensor(aud), squeeze


def _states(model, plan, schedule, aud: Tensor, seed: int, param, condition):
    B, N, _ = aud.shape
    rngs = branch_rngs(seed)
    return [BranchState(b, model, plan, schedule, (B, N, model.config.channels(b)), rngs[b], param,
                        condition) for b in BRANCHES]


def _result(states, trace, wall, squeeze) -> GenerationResult:
    e, g = states
    out_e, out_g = e.output, g.output
    if squeeze:
        out_e, out_g = out_e[0], out_g[0]
    if out_e.shape[-2] != out_g.shape[-2]:
        raise ContractError("branches produced different frame counts")
    return GenerationResult(out_e, out_g, e.elapsed, g.elapsed, wall, e.calls, g.calls, trace)


def sample_sync(model, plan: SamplerPlan, aud, schedule: NoiseSchedule, seed: int | None = None,
                param: ConsistencyParam = ConsistencyParam(), condition: Callable | None = None) -> GenerationResult:
    """Both branches step together on identical timestep lists."""
    if plan.strategy not in ("ddpm", "ddim", "lcm_sync"):
        raise ConfigError(f"sample_sync cannot run a {plan.strategy!r} plan")
    seed = plan.seed if seed is None else seed
    aud_t, squeeze = _prepare(model, aud)
    states = _states(model, plan, schedule, aud_t, seed, param, condition)
    exchange = _Exchange(model, plan, FeatureBuffer(model.config.layers, keep_history=False))
    t0 = time.perf_counter()
    with no_grad():
        while not states[0].done:
            _drive(states, exchange, aud_t)
    return _result(states, exchange.trace, time.perf_counter() - t0, squeeze)


def _async_order(plan: SamplerPlan) -> list[tuple[int | None, int | None]]:
    """Deterministic schedule: (exp_step, ges_step) pairs, None for an idle branch."""
    order = []
    partner = {g: i for i, g in enumerate(plan.interleave)}
    for j in range(plan.steps_ges):
        order.append((partner.get(j), j))
    return order


def sample_async(model, plan: SamplerPlan, aud, schedule: NoiseSchedule, seed: int | None = None,
                 param: ConsistencyParam = ConsistencyParam(), condition: Callable | None = None,
                 concurrent: bool = False, replay: tuple[list[dict], FeatureBuffer] | None = None,
                 buffer: FeatureBuffer | None = None) -> GenerationResult:
    """Branches run their own step counts and exchange features through the buffer.

    ``concurrent=True`` runs each branch on its own thread; ``replay`` re-runs
    deterministically with every read served from a recorded trace and buffer.
    """
    if not plan.interleave:
        raise ConfigError("empty interleave map")
    if plan.steps_exp > plan.steps_ges:
        raise ConfigError("asynchronous sampling needs steps_exp <= steps_ges")
    seed = plan.seed if seed is None else seed
    aud_t, squeeze = _prepare(model, aud)
    states = _states(model, plan, schedule, aud_t, seed, param, condition)
    buffer = buffer if buffer is not None else FeatureBuffer(model.config.layers)
    exchange = _Exchange(model, plan, buffer, *(replay if replay is not None else (None, None)))
    t0 = time.perf_counter()
    if concurrent:
        _run_threads(states, exchange, aud_t, plan)
    elif replay is not None:
        with no_grad():
            for st in states:
                while not st.done:
                    _drive([st], exchange, aud_t)
    else:
        with no_grad():
            for i, j in _async_order(plan):
                active = [st for st, k in zip(states, (i, j)) if k is not None]
                _drive(active, exchange, aud_t)
    return _result(states, exchange.trace, time.perf_counter() - t0, squeeze)


def _run_threads(states: list[BranchState], exchange: _Exchange, aud: Tensor, plan: SamplerPlan) -> None:
    """One thread per branch; a step starts once the counterpart has finished
    every step scheduled strictly before it."""
    e, g = states
    cond = threading.Condition()
    need = {
        "exp": list(plan.interleave),
        "ges": [sum(1 for m in plan.interleave if m < j) for j in range(plan.steps_ges)],
    }
    by_name = {"exp": e, "ges": g}
    errors: list[BaseException] = []

    def worker(st: BranchState) -> None:
        other = by_name[OTHER[st.branch]]
        try:
            with no_grad():
                while not st.done:
                    with cond:
                        cond.wait_for(lambda: other.step >= need[st.branch][st.step] or errors)
                    if errors:
                        return
                    _drive([st], exchange, aud)
                    with cond:
                        cond.notify_all()
        except BaseException as exc:   # surfaced in the caller
            with cond:
                errors.append(exc)
                cond.notify_all()

    threads = [threading.Thread(target=worker, args=(st,), name=f"branch-{st.branch}") for st in states]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]


def check_trace(trace: list[dict], plan: SamplerPlan) -> None:
    """Raise if any recorded read exceeds the staleness bound or goes back in version."""
    bound = plan.staleness_bound
    last: dict[tuple[str, int], int] = {}
    for rec in trace:
        if rec["lag"] > bound:
            raise ContractError(f"staleness {rec['lag']} exceeds bound {bound}: {rec}")
        key = (rec["branch"], rec["layer"])
        if rec["counterpart_version"] < last.get(key, 0):
            raise ContractError(f"read went back in version: {rec}")
        last[key] = rec["counterpart_version"]


def write_trace(trace: list[dict], path) -> None:
    import json
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec) + "\n")


def sample(model, plan: SamplerPlan, aud, schedule: NoiseSchedule, seed: int | None = None,
           param: ConsistencyParam = ConsistencyParam(), condition: Callable | None = None) -> GenerationResult:
    """Dispatch on the plan's strategy."""
    if plan.strategy == "lcm_async":
        return sample_async(model, plan, aud, schedule, seed, param, condition)
    return sample_sync(model, plan, aud, schedule, seed, param, condition)
