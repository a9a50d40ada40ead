"""Sliding-window generation of sequences longer than one clip."""

from __future__ import annotations

import math
import time

import numpy as np

from dualsync.diffusion import ConsistencyParam, NoiseSchedule
from dualsync.errors import ConfigError, ContractError
from dualsync.sampler.engine import GenerationResult, sample
from dualsync.sampler.plan import SamplerPlan


def window_starts(length: int, clip_len: int, overlap: int) -> list[int]:
    """Clip start frames; the last window is shifted back to end on the stream end."""
    if overlap >= clip_len:
        raise ConfigError(f"overlap {overlap} must be smaller than clip length {clip_len}")
    if overlap < 0:
        raise ConfigError("overlap must be non-negative")
    if length < clip_len:
        raise ContractError(f"stream of {length} frames is shorter than one clip ({clip_len})")
    hop = clip_len - overlap
    starts = list(range(0, length - clip_len + 1, hop))
    if starts[-1] + clip_len < length:
        starts.append(length - clip_len)
    return starts


def blend_weights(n: int) -> np.ndarray:
    """Ramp 0 -> 1 across ``n`` overlap frames: w_f = f / (n - 1)."""
    if n == 1:
        return np.ones(1)
    return np.arange(n) / (n - 1)


def _clip_seed(seed: int, k: int) -> int:
    if k == 0:
        return seed
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def generate_long(model, plan: SamplerPlan, aud_stream, schedule: NoiseSchedule, clip_len: int,
                  overlap: int = 8, seed: int | None = None,
                  param: ConsistencyParam = ConsistencyParam()) -> GenerationResult:
    """Overlapping clips; each clip's leading frames are pinned to the noised
    tail of the previous clip at every step, and overlaps are cross-faded."""
    aud_stream = np.asarray(aud_stream, dtype=np.float64)
    if aud_stream.ndim != 2:
        raise ContractError("audio stream must be (frames, features)")
    if overlap >= clip_len:
        raise ConfigError(f"overlap {overlap} must be smaller than clip length {clip_len}")
    seed = plan.seed if seed is None else seed
    L = aud_stream.shape[0]
    starts = window_starts(L, clip_len, overlap)
    clips: list[tuple[np.ndarray, np.ndarray]] = []
    trace: list[dict] = []
    t_exp = t_ges = 0.0
    calls_e = calls_g = 0
    t0 = time.perf_counter()
    for k, start in enumerate(starts):
        condition = None
        if k > 0:
            shared = starts[k - 1] + clip_len - start
            prev = {"exp": clips[-1][0][-shared:], "ges": clips[-1][1][-shared:]}
            noise_rng = np.random.default_rng(np.random.SeedSequence([seed, k, 7]))
            fixed_noise = {b: noise_rng.standard_normal(prev[b].shape) for b in ("exp", "ges")}

            def condition(branch, t, x, prev=prev, fixed_noise=fixed_noise, shared=shared):
                ab = schedule.abar(t)
                x = x.copy()
                x[:, :shared] = math.sqrt(ab) * prev[branch] + math.sqrt(1.0 - ab) * fixed_noise[branch]
                return x

        res = sample(model, plan, aud_stream[start:start + clip_len], schedule, _clip_seed(seed, k),
                     param, condition)
        clips.append((res.expression, res.gesture))
        trace.extend(dict(rec, clip=k) for rec in res.trace)
        t_exp += res.wall_time_exp
        t_ges += res.wall_time_ges
        calls_e += res.steps_exp
        calls_g += res.steps_ges

    out = {b: np.zeros((L, clips[0][i].shape[1])) for i, b in enumerate(("exp", "ges"))}
    for k, start in enumerate(starts):
        for i, b in enumerate(("exp", "ges")):
            piece = clips[k][i]
            if k == 0:
                out[b][start:start + clip_len] = piece
                continue
            shared = starts[k - 1] + clip_len - start
            w = blend_weights(shared)[:, None]
            out[b][start:start + shared] = (1.0 - w) * out[b][start:start + shared] + w * piece[:shared]
            out[b][start + shared:start + clip_len] = piece[shared:]
    result = GenerationResult(out["exp"], out["ges"], t_exp, t_ges, time.perf_counter() - t0,
                              calls_e, calls_g, trace)
    result.clips = clips
    result.starts = starts
    return result


def seam_jumps(frames: np.ndarray, starts: list[int], clip_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Frame-to-frame L2 jumps split into seam transitions (touching an
    overlap region) and the remaining intra-clip transitions."""
    frames = np.asarray(frames, dtype=np.float64)
    jumps = np.linalg.norm(np.diff(frames, axis=0), axis=1)   # jumps[f] : f -> f+1
    seam = np.zeros(len(jumps), dtype=bool)
    for k in range(1, len(starts)):
        lo = starts[k]
        hi = starts[k - 1] + clip_len
        seam[max(lo - 1, 0):min(hi, len(jumps))] = True
    return jumps[seam], jumps[~seam]
