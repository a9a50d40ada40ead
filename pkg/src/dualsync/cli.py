"""Command-line entry point: data generation, training, sampling, evaluation and ablations.

Exit codes: 0 success, 1 runtime error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from dualsync.ablation import AXES, EXPECTED_PATTERN, run_sampling_axis, run_variant, sensitivity_pattern, \
    split_data, write_ablation_csv
from dualsync.config import RunConfig, load_config, override, write_resolved
from dualsync.data import MotionClip, generate_dataset, load_clip_dir, save_dataset, write_clip
from dualsync.diffusion import make_schedule
from dualsync.errors import ConfigError, DualSyncError
from dualsync.metrics import evaluate, extract_audio_beats, write_report
from dualsync.model import DualBranchModel, load_checkpoint, save_checkpoint
from dualsync.sampler import (bench_strategies, generate_long, make_plan, sample, sample_async, write_bench_csv,
                              write_trace)
from dualsync.training import TrainState, train, train_consistency, write_loss_curve


def _schedule(cfg: RunConfig):
    return make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        s = args.seed
        cfg = replace(cfg, seed=s, data=replace(cfg.data, seed=s), train=replace(cfg.train, seed=s),
                      consistency=replace(cfg.consistency, seed=s))
    return cfg


def _load_data(path: str):
    clips, audio = load_clip_dir(path)
    if not clips:
        raise ConfigError(f"no clips found in {path}")
    if audio is None:
        raise ConfigError(f"{path} has no audio features next to its clips")
    return clips, audio


def _fit_model_dims(cfg: RunConfig, clips: list[MotionClip], audio: np.ndarray) -> RunConfig:
    c = clips[0]
    return override(cfg, "model", n_frames=c.n_frames, joints=c.joints, expr_dim=c.expr_dim,
                    audio_dim=int(audio.shape[-1]))


def _arrays(clips, audio):
    exp = np.stack([c.expression for c in clips]).astype(np.float64)
    ges = np.stack([c.gesture for c in clips]).astype(np.float64)
    return exp, ges, audio


# -- commands -------------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    cfg = _resolve(args)
    cfg = override(cfg, "data", n_clips=args.n_clips, coupling=args.coupling)
    out = Path(args.out)
    save_dataset(generate_dataset(cfg.data), out)
    write_resolved(cfg, out)


def cmd_train(args) -> None:
    cfg = _resolve(args)
    cfg = override(cfg, "model", fusion=args.fusion)
    cfg = override(cfg, "train", steps=args.steps)
    clips, audio = _load_data(args.data)
    cfg = _fit_model_dims(cfg, clips, audio)
    out = Path(args.out)
    write_resolved(cfg, out)
    state = None
    if args.resume:
        state = TrainState.load(args.resume)
        if state.model.config != cfg.model:
            raise ConfigError("resumed state was trained with a different model config")
    state = train(_arrays(clips, audio), _schedule(cfg), cfg.train, cfg.loss, model_config=cfg.model,
                  state=state, until=args.until)
    write_loss_curve(state.curve, out / "loss.csv")
    state.save(out / "state.npz")
    save_checkpoint(state.model, out / "model.ckpt")
    print(f"step {state.step}/{cfg.train.steps}; checkpoint at {out / 'model.ckpt'}")


def cmd_distill(args) -> None:
    cfg = _resolve(args)
    cfg = override(cfg, "consistency", steps=args.steps, mode=args.mode)
    clips, audio = _load_data(args.data)
    teacher = load_checkpoint(args.ckpt)
    out = Path(args.out)
    write_resolved(cfg, out)
    data = _arrays(clips, audio)
    schedule = _schedule(cfg)
    heads = {b: train_consistency(teacher, b, data, schedule, cfg.consistency) for b in ("exp", "ges")}
    head = DualBranchModel.combine(heads["exp"], heads["ges"])
    head.meta = {"consistency_branch": "both", "teacher_steps": teacher.trained_steps,
                 "consistency_steps": cfg.consistency.steps}
    save_checkpoint(head, out / "head.ckpt")
    with open(out / "consistency_loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss_exp", "loss_ges"])
        for i, (le, lg) in enumerate(zip(heads["exp"].meta["curve"], heads["ges"].meta["curve"])):
            writer.writerow([i, repr(le), repr(lg)])
    print(f"consistency head at {out / 'head.ckpt'}")


def _audio_inputs(path: Path):
    """(names, audio arrays, beats or None per clip) from an .npy file or a clip directory."""
    if path.is_dir():
        clips, audio = _load_data(str(path))
        return [f"clip_{i:05d}" for i in range(len(clips))], list(audio), [c.beats for c in clips]
    if not path.exists():
        raise ConfigError(f"audio file {path} not found")
    aud = np.load(path)
    if aud.ndim == 2:
        return ["sample"], [aud], [None]
    if aud.ndim == 3:
        return [f"clip_{i:05d}" for i in range(len(aud))], list(aud), [None] * len(aud)
    raise ConfigError(f"audio features must be (frames, dim) or (clips, frames, dim), got {aud.shape}")


def cmd_sample(args) -> None:
    cfg = _resolve(args)
    cfg = override(cfg, "sampler", strategy=args.strategy, steps_exp=args.steps_exp, steps_ges=args.steps_ges,
                   overlap=args.overlap)
    if args.concurrent:
        cfg = override(cfg, "sampler", concurrent=True)
    model = load_checkpoint(args.ckpt)
    schedule = _schedule(cfg)
    sc = cfg.sampler
    plan = make_plan(sc.strategy, schedule, sc.steps_exp, sc.steps_ges, seed=cfg.seed)
    out = Path(args.out)
    write_resolved(cfg, out)
    names, audio, beats = _audio_inputs(Path(args.audio))
    fps = cfg.data.fps
    n_model = model.config.n_frames
    entries, traces = [], []
    for k, (name, aud, bt) in enumerate(zip(names, audio, beats)):
        seed = plan.seed + k
        if aud.shape[0] > n_model:
            res = generate_long(model, plan, aud, schedule, n_model, sc.overlap, seed=seed)
        elif plan.strategy == "lcm_async":
            res = sample_async(model, plan, aud, schedule, seed=seed, concurrent=sc.concurrent)
        else:
            res = sample(model, plan, aud, schedule, seed=seed)
        traces.extend(dict(rec, sample=name) for rec in res.trace)
        if bt is None:
            bt = extract_audio_beats(aud, fps).times
        write_clip(out / f"{name}.mclip", MotionClip.from_parts(res.gesture, res.expression, fps, bt))
        entries.append({"clip": f"{name}.mclip", "n_frames": int(res.n_frames)})
    (out / "manifest.json").write_text(json.dumps(
        {"seed": cfg.seed, "strategy": plan.strategy, "steps_exp": plan.steps_exp, "steps_ges": plan.steps_ges,
         "clips": entries}, indent=2, sort_keys=True))
    if traces:
        write_trace(traces, out / "trace.jsonl")
    print(f"{len(entries)} clip(s) written to {out}")


def cmd_eval(args) -> None:
    cfg = _resolve(args)
    cfg = override(cfg, "metrics", ba_sigma=args.ba_sigma)
    real, _ = load_clip_dir(args.real)
    gen, _ = load_clip_dir(args.gen)
    report = evaluate(real, gen, cfg.metrics.ba_sigma, cfg.metrics.encoder_seed, cfg.metrics.div_batch)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, out, out.with_suffix(".csv"))
    write_resolved(cfg, out.parent)
    print(json.dumps({k: report[k] for k in ("fmd", "fed", "fgd", "div", "ba")}))


def cmd_bench(args) -> None:
    cfg = _resolve(args)
    model = load_checkpoint(args.ckpt)
    teacher = load_checkpoint(args.teacher) if args.teacher else model
    schedule = _schedule(cfg)
    out = Path(args.out)
    write_resolved(cfg, out)
    real = eval_audio = None
    if args.data:
        real, audio = _load_data(args.data)
        aud = audio[0]
        eval_audio = audio
    else:
        rng = np.random.default_rng(cfg.seed)
        aud = rng.standard_normal((model.config.n_frames, model.config.audio_dim))
    plans = [make_plan("ddim", schedule, seed=cfg.seed), make_plan("lcm_sync", schedule, seed=cfg.seed),
             make_plan("lcm_async", schedule, seed=cfg.seed)]
    rows = bench_strategies(teacher, plans[:1], aud, schedule, args.repeats, real_clips=real,
                            eval_audio=eval_audio, fps=cfg.data.fps)
    rows += bench_strategies(model, plans[1:], aud, schedule, args.repeats, real_clips=real,
                             eval_audio=eval_audio, fps=cfg.data.fps)
    write_bench_csv(rows, out / "bench.csv")
    for r in rows:
        print(f"{r.strategy} {r.steps_exp}/{r.steps_ges}: {r.median_ms:.1f} ms")


def cmd_ablate(args) -> None:
    cfg = _resolve(args)
    cfg = override(cfg, "train", steps=args.steps)
    out = Path(args.out)
    if args.data:
        clips, audio = _load_data(args.data)
    else:
        ds = generate_dataset(cfg.data)
        clips, audio = ds.clips, ds.audio
    cfg = _fit_model_dims(cfg, clips, audio)
    write_resolved(cfg, out)
    split = split_data(clips, audio, cfg.holdout)
    schedule = _schedule(cfg)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    rows, patterns = [], {}
    for seed in seeds:
        if args.axis == "sampling":
            rows += run_sampling_axis(split, schedule, cfg.model, cfg.train, cfg.loss, cfg.consistency, seed,
                                      args.repeats, cfg.metrics.ba_sigma)
            continue
        for variant in AXES[args.axis]:
            row, model = run_variant(split, schedule, cfg.model, cfg.train, cfg.loss, variant, seed,
                                     cfg.metrics.ba_sigma)
            rows.append(row)
            pattern = sensitivity_pattern(model)
            patterns[variant] = {"observed": pattern.tolist(),
                                 "expected": EXPECTED_PATTERN[variant].tolist(),
                                 "match": bool(np.array_equal(pattern, EXPECTED_PATTERN[variant]))}
            print(f"seed {seed} {variant}: fmd {row['fmd']:.4f}", flush=True)
    write_ablation_csv(rows, args.axis, out / f"ablation_{args.axis}.csv")
    if patterns:
        (out / "sensitivity.json").write_text(json.dumps(patterns, indent=2, sort_keys=True))


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualsync", description="Dual-branch expression and gesture diffusion.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", help="JSON run config; flags override its keys")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help=out_help)

    sp = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(sp)
    sp.add_argument("--n-clips", type=int)
    sp.add_argument("--coupling", type=float)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train the dual-branch denoiser")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--fusion")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--resume", help="state.npz written by an earlier run")
    sp.add_argument("--until", type=int, help="stop after this many total steps")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("distill", help="train consistency heads for both branches from a teacher")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True, help="teacher checkpoint")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--mode", choices=["direct", "distill"])
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("sample", help="generate motion for audio features")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--strategy", choices=["ddpm", "ddim", "lcm-sync", "lcm-async"])
    sp.add_argument("--steps-exp", type=int)
    sp.add_argument("--steps-ges", type=int)
    sp.add_argument("--audio", required=True, help=".npy features or a dataset directory")
    sp.add_argument("--overlap", type=int)
    sp.add_argument("--concurrent", action="store_true", help="run the branches on separate threads")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("eval", help="metric report for generated against real clips")
    common(sp, "report JSON path")
    sp.add_argument("--real", required=True)
    sp.add_argument("--gen", required=True)
    sp.add_argument("--ba-sigma", type=float)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="wall-clock comparison of sampling strategies")
    common(sp)
    sp.add_argument("--ckpt", required=True, help="consistency head for the few-step strategies")
    sp.add_argument("--teacher", help="checkpoint for ddim (defaults to --ckpt)")
    sp.add_argument("--repeats", type=int, default=10)
    sp.add_argument("--data", help="dataset directory for audio and Fréchet metrics")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("ablate", help="train and evaluate the variants of one ablation axis")
    common(sp)
    sp.add_argument("--axis", required=True, choices=sorted(AXES))
    sp.add_argument("--data")
    sp.add_argument("--seeds", help="comma-separated seeds")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--repeats", type=int, default=10)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DualSyncError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
