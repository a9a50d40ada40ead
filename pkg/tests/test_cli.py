import csv
import json
from pathlib import Path

import numpy as np
import pytest

from dualsync.cli import main
from dualsync.config import RESOLVED_NAME
from dualsync.data import read_clip

TINY = {
    "model": {"d_model": 16, "heads": 2, "layers": 2},
    "data": {"n_clips": 10, "n_frames": 10, "joints": 2, "expr_dim": 3, "audio_dim": 4},
    "train": {"steps": 4, "batch_size": 4, "warmup": 1},
    "consistency": {"steps": 3, "batch_size": 4},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "c.json").write_text(json.dumps(TINY))
    assert main(["gen-data", "--config", str(root / "c.json"), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(root / "c.json"), "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root


def _run(root, *argv):
    return main([argv[0], "--config", str(root / "c.json"), *map(str, argv[1:])])


def _digest(directory: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.is_file()}


def test_gen_data_writes_clips_manifest_and_config(workdir):
    manifest = json.loads((workdir / "data" / "manifest.json").read_text())
    assert len(manifest["clips"]) == 10
    assert (workdir / "data" / RESOLVED_NAME).exists()
    assert read_clip(workdir / "data" / manifest["clips"][0]["clip"]).n_frames == 10


def test_gen_data_is_reproducible_and_creates_nested_dirs(workdir, tmp_path):
    out = tmp_path / "a" / "b"
    assert _run(workdir, "gen-data", "--out", out) == 0
    assert _digest(out) == _digest(workdir / "data")
    assert _run(workdir, "gen-data", "--out", tmp_path / "s1", "--seed", 1) == 0
    assert _digest(tmp_path / "s1")["manifest.json"] != _digest(out)["manifest.json"]


def test_train_outputs_and_reproducibility(workdir, tmp_path):
    rows = list(csv.DictReader(open(workdir / "run" / "loss.csv")))
    assert len(rows) == 4
    assert (workdir / "run" / "model.ckpt").exists()
    assert _run(workdir, "train", "--data", workdir / "data", "--out", tmp_path / "again") == 0
    assert _digest(tmp_path / "again") == _digest(workdir / "run")


def test_train_resume_is_bit_identical(workdir, tmp_path):
    assert _run(workdir, "train", "--data", workdir / "data", "--out", tmp_path / "half", "--until", 2) == 0
    assert _run(workdir, "train", "--data", workdir / "data", "--out", tmp_path / "rest",
                "--resume", tmp_path / "half" / "state.npz") == 0
    assert _digest(tmp_path / "rest") == _digest(workdir / "run")


def test_invalid_fusion_is_config_error(workdir, tmp_path, capsys):
    assert _run(workdir, "train", "--data", workdir / "data", "--out", tmp_path / "x", "--fusion", "bogus") == 2
    assert "fusion" in capsys.readouterr().err


def test_unknown_config_key_is_config_error(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"model": {"depth": 3}}))
    assert main(["gen-data", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "broken.json").write_text("{")
    assert main(["gen-data", "--config", str(tmp_path / "broken.json"), "--out", str(tmp_path / "o")]) == 2


def test_sample_strategies(workdir, tmp_path):
    ckpt = workdir / "run" / "model.ckpt"
    assert _run(workdir, "sample", "--ckpt", ckpt, "--strategy", "lcm-async", "--steps-exp", 8,
                "--steps-ges", 4, "--audio", workdir / "data", "--out", tmp_path / "bad") == 2
    for strategy in ("ddim", "lcm-sync", "lcm-async"):
        out = tmp_path / strategy
        assert _run(workdir, "sample", "--ckpt", ckpt, "--strategy", strategy, "--audio", workdir / "data",
                    "--out", out) == 0
        clip = read_clip(out / "clip_00000.mclip")
        assert clip.n_frames == 10 and clip.joints == 2 and clip.expr_dim == 3
        assert (out / RESOLVED_NAME).exists()
    assert (tmp_path / "lcm-async" / "trace.jsonl").exists()


def test_sample_long_audio_file(workdir, tmp_path):
    aud = np.random.default_rng(0).standard_normal((27, 4))
    np.save(tmp_path / "a.npy", aud)
    args = ("sample", "--ckpt", workdir / "run" / "model.ckpt", "--strategy", "lcm-async",
            "--audio", tmp_path / "a.npy", "--overlap", 4)
    assert _run(workdir, *args, "--out", tmp_path / "o1") == 0
    assert _run(workdir, *args, "--out", tmp_path / "o2") == 0
    assert read_clip(tmp_path / "o1" / "sample.mclip").n_frames == 27
    assert _digest(tmp_path / "o1") == _digest(tmp_path / "o2")


def test_sample_concurrent_runs(workdir, tmp_path):
    assert _run(workdir, "sample", "--ckpt", workdir / "run" / "model.ckpt", "--strategy", "lcm-async",
                "--audio", workdir / "data", "--out", tmp_path / "c", "--concurrent") == 0


def test_eval_identical_sets(workdir, tmp_path):
    out = tmp_path / "rep" / "report.json"
    assert _run(workdir, "eval", "--real", workdir / "data", "--gen", workdir / "data", "--out", out,
                "--ba-sigma", 0.2) == 0
    report = json.loads(out.read_text())
    assert report["fmd"] == pytest.approx(0.0, abs=1e-6)
    assert report["fed"] == pytest.approx(0.0, abs=1e-6)
    assert report["fgd"] == pytest.approx(0.0, abs=1e-6)
    assert report["ba_sigma"] == 0.2
    assert (out.parent / "report.csv").exists() and (out.parent / RESOLVED_NAME).exists()


def test_eval_singleton_generated_set_fails(workdir, tmp_path):
    single = tmp_path / "single"
    single.mkdir()
    (single / "one.mclip").write_bytes((workdir / "data" / "clip_00000.mclip").read_bytes())
    assert _run(workdir, "eval", "--real", workdir / "data", "--gen", single, "--out", tmp_path / "r.json") == 1


def test_distill_bench_and_sampling_reproducible(workdir, tmp_path):
    for tag in ("a", "b"):
        assert _run(workdir, "distill", "--data", workdir / "data", "--ckpt", workdir / "run" / "model.ckpt",
                    "--out", tmp_path / f"head_{tag}") == 0
    assert _digest(tmp_path / "head_a") == _digest(tmp_path / "head_b")
    assert _run(workdir, "bench", "--ckpt", tmp_path / "head_a" / "head.ckpt", "--teacher",
                workdir / "run" / "model.ckpt", "--repeats", 3, "--data", workdir / "data",
                "--out", tmp_path / "bench") == 0
    rows = list(csv.DictReader(open(tmp_path / "bench" / "bench.csv")))
    assert [(r["strategy"], r["calls_exp"], r["calls_ges"]) for r in rows] == [
        ("ddim", "25", "25"), ("lcm_sync", "8", "8"), ("lcm_async", "4", "8")]
    assert all(float(r["fmd"]) >= 0 for r in rows)


def test_ablate_interaction_axis(workdir, tmp_path):
    assert _run(workdir, "ablate", "--axis", "interaction", "--data", workdir / "data", "--steps", 2,
                "--out", tmp_path / "abl") == 0
    rows = list(csv.DictReader(open(tmp_path / "abl" / "ablation_interaction.csv")))
    assert [r["variant"] for r in rows] == ["none", "uni_E2G", "uni_G2E", "concat", "cosync"]
    patterns = json.loads((tmp_path / "abl" / "sensitivity.json").read_text())
    assert all(p["match"] for p in patterns.values())
