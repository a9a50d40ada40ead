"""Wall-clock comparison of sampling strategies on one model."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dualsync.data import MotionClip
from dualsync.diffusion import ConsistencyParam, NoiseSchedule
from dualsync.errors import ConfigError
from dualsync.sampler.engine import sample
from dualsync.sampler.plan import SamplerPlan

BENCH_COLUMNS = ["strategy", "steps_exp", "steps_ges", "median_ms", "p95_ms", "calls_exp", "calls_ges",
                 "fmd", "fed", "fgd"]


@dataclass
class BenchRow:
    strategy: str
    steps_exp: int
    steps_ges: int
    times_ms: list[float]
    calls_exp: int
    calls_ges: int
    fmd: float = float("nan")
    fed: float = float("nan")
    fgd: float = float("nan")

    @property
    def median_ms(self) -> float:
        return float(np.median(self.times_ms))

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.times_ms, 95))

    def as_dict(self) -> dict:
        return {"strategy": self.strategy, "steps_exp": self.steps_exp, "steps_ges": self.steps_ges,
                "median_ms": self.median_ms, "p95_ms": self.p95_ms, "calls_exp": self.calls_exp,
                "calls_ges": self.calls_ges, "fmd": self.fmd, "fed": self.fed, "fgd": self.fgd}


def bench_strategies(model, plans: list[SamplerPlan], aud, schedule: NoiseSchedule, repeats: int = 10,
                     param: ConsistencyParam = ConsistencyParam(), real_clips: list[MotionClip] | None = None,
                     eval_audio: np.ndarray | None = None, fps: float = 15.0, warmup: int = 1) -> list[BenchRow]:
    """Median wall time per plan over ``repeats`` runs, interleaving plans
    round-robin so drift in machine load hits every strategy alike.

    With ``real_clips`` and ``eval_audio`` (B, N, D) the Fréchet metrics of
    each strategy's samples are filled in too.
    """
    if repeats < 3:
        raise ConfigError("benchmarking needs at least three repeats")
    rows = [BenchRow(p.strategy, p.steps_exp, p.steps_ges, [], 0, 0) for p in plans]
    for _ in range(warmup):
        for p in plans:
            sample(model, p, aud, schedule, p.seed, param)
    for r in range(repeats):
        for p, row in zip(plans, rows):
            res = sample(model, p, aud, schedule, p.seed + r, param)
            row.times_ms.append(1000.0 * res.wall_time)
            row.calls_exp, row.calls_ges = res.steps_exp, res.steps_ges
    if real_clips is not None and eval_audio is not None:
        from dualsync.metrics import fed, fgd, fmd
        for p, row in zip(plans, rows):
            res = sample(model, p, eval_audio, schedule, p.seed, param)
            gen = [MotionClip.from_parts(g, e, fps) for e, g in zip(res.expression, res.gesture)]
            row.fmd, row.fed, row.fgd = fmd(real_clips, gen), fed(real_clips, gen), fgd(real_clips, gen)
    return rows


def write_bench_csv(rows: list[BenchRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.as_dict())
