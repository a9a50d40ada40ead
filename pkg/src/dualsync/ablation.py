"""Train-and-evaluate harness for interaction, fusion and sampling ablations."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from dualsync.data import MotionClip
from dualsync.diffusion import NoiseSchedule
from dualsync.errors import ConfigError
from dualsync.metrics import evaluate
from dualsync.model import FUSION_MODES, DualBranchModel, ModelConfig
from dualsync.numerics import no_grad
from dualsync.sampler import make_plan, sample
from dualsync.training import ConsistencyConfig, LossWeights, TrainConfig, train, train_consistency

AXES = {
    "interaction": ("none", "uni_E2G", "uni_G2E", "concat", "cosync"),
    "fusion": ("concat", "gated", "cosync"),
    "sampling": ("ddim", "lcm_sync", "lcm_async"),
}
ABLATION_COLUMNS = ["axis", "variant", "seed", "param_seed", "fmd", "fed", "fgd", "div", "ba",
                    "final_loss", "train_seconds", "median_ms"]


@dataclass
class Split:
    train: tuple[np.ndarray, np.ndarray, np.ndarray]
    test_clips: list[MotionClip]
    test_audio: np.ndarray
    fps: float


def split_data(clips: list[MotionClip], audio: np.ndarray, holdout: float = 0.2) -> Split:
    """Last ``holdout`` fraction of clips is held out for evaluation."""
    if not 0.0 < holdout < 1.0:
        raise ConfigError("holdout fraction must lie in (0, 1)")
    n_test = max(2, int(round(holdout * len(clips))))
    if len(clips) - n_test < 1:
        raise ConfigError("not enough clips for a train/test split")
    exp = np.stack([c.expression for c in clips]).astype(np.float64)
    ges = np.stack([c.gesture for c in clips]).astype(np.float64)
    cut = len(clips) - n_test
    return Split((exp[:cut], ges[:cut], audio[:cut]), clips[cut:], audio[cut:], clips[0].fps)


def param_seed(seed: int, variant: str) -> int:
    """Variant-specific parameter seed on top of a shared data seed."""
    tag = sum((i + 1) * ord(ch) for i, ch in enumerate(variant))
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0] % (2 ** 31))


def generate_clips(model: DualBranchModel, audio: np.ndarray, schedule: NoiseSchedule, strategy: str = "ddim",
                   steps_exp: int | None = None, steps_ges: int | None = None, seed: int = 0,
                   fps: float = 15.0, beats: list | None = None) -> list[MotionClip]:
    plan = make_plan(strategy, schedule, steps_exp, steps_ges, seed)
    res = sample(model, plan, audio, schedule, seed)
    beats = beats if beats is not None else [()] * len(audio)
    return [MotionClip.from_parts(g, e, fps, b) for e, g, b in zip(res.expression, res.gesture, beats)]


def sensitivity_pattern(model: DualBranchModel, seed: int = 0, tol: float = 1e-12) -> np.ndarray:
    """2x2 boolean matrix; entry [src, dst] is True when perturbing the noisy
    input of branch ``src`` changes the output of branch ``dst``."""
    rng = np.random.default_rng(seed)
    cfg = model.config
    N = cfg.n_frames
    z = {"exp": rng.standard_normal((1, N, cfg.expr_dim)), "ges": rng.standard_normal((1, N, cfg.gesture_dim))}
    aud = rng.standard_normal((1, N, cfg.audio_dim))
    t = np.array([500])
    with no_grad():
        base = model.forward(z["exp"], z["ges"], t, t, aud)
        out = np.zeros((2, 2), dtype=bool)
        for s, src in enumerate(("exp", "ges")):
            pert = {k: v.copy() for k, v in z.items()}
            pert[src] = pert[src] + rng.standard_normal(pert[src].shape)
            moved = model.forward(pert["exp"], pert["ges"], t, t, aud)
            for d in range(2):
                out[s, d] = np.max(np.abs(moved[d].data - base[d].data)) > tol
    return out


EXPECTED_PATTERN = {
    "none": np.array([[True, False], [False, True]]),
    "uni_E2G": np.array([[True, True], [False, True]]),
    "uni_G2E": np.array([[True, False], [True, True]]),
    "cosync": np.ones((2, 2), dtype=bool),
    "concat": np.ones((2, 2), dtype=bool),
    "gated": np.ones((2, 2), dtype=bool),
}


def run_variant(split: Split, schedule: NoiseSchedule, model_cfg: ModelConfig, train_cfg: TrainConfig,
                weights: LossWeights, fusion: str, seed: int, ba_sigma: float = 0.1,
                eval_strategy: str = "ddim", progress=None) -> tuple[dict, DualBranchModel]:
    """Train one interaction variant and evaluate it on the held-out split."""
    if fusion not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {fusion!r}")
    pseed = param_seed(seed, fusion)
    cfg = replace(model_cfg, fusion=fusion)
    t0 = time.perf_counter()
    state = train(split.train, schedule, replace(train_cfg, seed=pseed), weights,
                  model=DualBranchModel.init(cfg, pseed), progress=progress)
    seconds = time.perf_counter() - t0
    gen = generate_clips(state.model, split.test_audio, schedule, eval_strategy, seed=seed, fps=split.fps,
                         beats=[c.beats for c in split.test_clips])
    report = evaluate(split.test_clips, gen, ba_sigma)
    tail = [row["total"] for row in state.curve[-50:]]
    row = {"variant": fusion, "seed": seed, "param_seed": pseed, "final_loss": float(np.mean(tail)) if tail else float("nan"),
           "train_seconds": seconds, "median_ms": float("nan"),
           **{k: report[k] for k in ("fmd", "fed", "fgd", "div", "ba")}}
    return row, state.model


def run_sampling_axis(split: Split, schedule: NoiseSchedule, model_cfg: ModelConfig, train_cfg: TrainConfig,
                      weights: LossWeights, cons_cfg: ConsistencyConfig, seed: int, repeats: int = 10,
                      ba_sigma: float = 0.1) -> list[dict]:
    """One teacher, consistency heads for both branches, then every strategy."""
    from dualsync.sampler import bench_strategies

    pseed = param_seed(seed, "sampling")
    teacher = train(split.train, schedule, replace(train_cfg, seed=pseed), weights,
                    model=DualBranchModel.init(model_cfg, pseed)).model
    heads = {b: train_consistency(teacher, b, split.train, schedule, replace(cons_cfg, seed=pseed))
             for b in ("exp", "ges")}
    head = DualBranchModel.combine(heads["exp"], heads["ges"])
    plans = [make_plan("ddim", schedule, seed=seed), make_plan("lcm_sync", schedule, seed=seed),
             make_plan("lcm_async", schedule, seed=seed)]
    rows = []
    for plan in plans:
        model = teacher if plan.strategy == "ddim" else head
        bench = bench_strategies(model, [plan], split.test_audio[0], schedule, repeats)[0]
        gen = generate_clips(model, split.test_audio, schedule, plan.strategy, seed=seed, fps=split.fps,
                             beats=[c.beats for c in split.test_clips])
        report = evaluate(split.test_clips, gen, ba_sigma)
        rows.append({"variant": f"{plan.strategy} {plan.steps_exp}/{plan.steps_ges}", "seed": seed,
                     "param_seed": pseed, "final_loss": float("nan"), "train_seconds": float("nan"),
                     "median_ms": bench.median_ms, **{k: report[k] for k in ("fmd", "fed", "fgd", "div", "ba")}})
    return rows


def write_ablation_csv(rows: list[dict], axis: str, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({"axis": axis, **{k: row.get(k, "") for k in ABLATION_COLUMNS if k != "axis"}})
