import json

import numpy as np
import pytest

from dualsync.data import (MCLIP_MAGIC, MotionClip, SynthConfig, generate_dataset, load_clip_dir, read_clip,
                           save_dataset, write_clip)
from dualsync.errors import ConfigError, FormatError


def test_generator_is_deterministic():
    a = generate_dataset(SynthConfig(n_clips=8, seed=3))
    b = generate_dataset(SynthConfig(n_clips=8, seed=3))
    for ca, cb in zip(a.clips, b.clips):
        assert np.array_equal(ca.frames, cb.frames) and np.array_equal(ca.beats, cb.beats)
    assert np.array_equal(a.audio, b.audio)


def test_uncoupled_factors_are_uncorrelated():
    ds = generate_dataset(SynthConfig(n_clips=1000, coupling=0.0, seed=11))
    fe = ds.factors_exp.reshape(-1, ds.factors_exp.shape[-1])
    fg = ds.factors_ges.reshape(-1, ds.factors_ges.shape[-1])
    k = fe.shape[1]
    rho = np.corrcoef(fe.T, fg.T)[:k, k:]
    assert np.abs(rho).max() < 0.1


def test_fully_coupled_gesture_is_linear_in_expression_factors():
    ds = generate_dataset(SynthConfig(n_clips=300, coupling=1.0, seed=5))
    x = ds.factors_exp.reshape(-1, ds.factors_exp.shape[-1])
    y = np.stack([c.gesture for c in ds.clips]).reshape(-1, 3 * ds.config.joints).astype(np.float64)
    a = np.c_[x, np.ones(len(x))]
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    r2 = 1 - (y - a @ coef).var(axis=0).sum() / y.var(axis=0).sum()
    assert r2 > 0.9


def test_clips_respect_invariants():
    cfg = SynthConfig(n_clips=20, seed=2)
    ds = generate_dataset(cfg)
    for clip in ds.clips:
        assert clip.frames.shape == (cfg.n_frames, 3 * cfg.joints + cfg.expr_dim)
        assert np.isfinite(clip.frames).all()
        assert np.all(clip.beats >= 0) and np.all(clip.beats < cfg.n_frames / cfg.fps)
    assert ds.audio.shape == (20, cfg.n_frames, cfg.audio_dim)


def test_gesture_rests_on_beats():
    cfg = SynthConfig(n_clips=5, noise=0.0, seed=4, n_frames=300, fps=100.0)
    ds = generate_dataset(cfg)
    for clip in ds.clips:
        speed = np.linalg.norm(np.gradient(clip.gesture.astype(np.float64), axis=0), axis=1)
        for b in clip.beats:
            f = int(round(b * cfg.fps))
            if 2 <= f < cfg.n_frames - 2:
                assert speed[f] < 0.1 * speed.max()


def test_synth_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(coupling=1.5)
    with pytest.raises(ConfigError):
        SynthConfig(n_clips=0)


def test_mclip_round_trip_is_bit_exact(tmp_path, rng):
    clip = MotionClip(rng.standard_normal((7, 3 * 2 + 4)), 15.0, 2, 4, [0.1, 0.33])
    write_clip(tmp_path / "a.mclip", clip)
    back = read_clip(tmp_path / "a.mclip")
    assert back.frames.tobytes() == clip.frames.tobytes()
    assert back.beats.tobytes() == clip.beats.tobytes()
    assert (back.fps, back.joints, back.expr_dim) == (15.0, 2, 4)


def test_mclip_layout(tmp_path):
    clip = MotionClip(np.arange(2 * 5, dtype=np.float32).reshape(2, 5), 30.0, 1, 2, [0.5])
    write_clip(tmp_path / "a.mclip", clip)
    raw = (tmp_path / "a.mclip").read_bytes()
    assert raw[:6] == MCLIP_MAGIC
    n, j, d = np.frombuffer(raw[6:18], "<u4")
    assert (n, j, d) == (2, 1, 2)
    assert np.frombuffer(raw[18:22], "<f4")[0] == 30.0
    assert np.frombuffer(raw[22:26], "<u4")[0] == 1
    assert np.array_equal(np.frombuffer(raw[26:66], "<f4"), np.arange(10, dtype=np.float32))
    assert np.frombuffer(raw[66:70], "<f4")[0] == 0.5
    assert len(raw) == 70


def test_mclip_errors(tmp_path, rng):
    clip = MotionClip(rng.standard_normal((4, 5)), 15.0, 1, 2)
    path = tmp_path / "a.mclip"
    write_clip(path, clip)
    raw = path.read_bytes()
    (tmp_path / "trunc.mclip").write_bytes(raw[:-3])
    with pytest.raises(FormatError) as info:
        read_clip(tmp_path / "trunc.mclip")
    assert info.value.offset > 0
    (tmp_path / "magic.mclip").write_bytes(b"XXXXXX" + raw[6:])
    with pytest.raises(FormatError) as info:
        read_clip(tmp_path / "magic.mclip")
    assert info.value.offset == 0
    huge = bytearray(raw)
    huge[6:10] = np.array([2 ** 31], "<u4").tobytes()
    (tmp_path / "huge.mclip").write_bytes(bytes(huge))
    with pytest.raises(FormatError):
        read_clip(tmp_path / "huge.mclip")
    with pytest.raises(ConfigError):
        write_clip(tmp_path / "empty.mclip", MotionClip(np.zeros((0, 5)), 15.0, 1, 2))


def test_dataset_directory_round_trip(tmp_path):
    ds = generate_dataset(SynthConfig(n_clips=3, seed=9))
    manifest = save_dataset(ds, tmp_path / "new" / "dir")
    meta = json.loads(manifest.read_text())
    assert meta["seed"] == 9 and len(meta["clips"]) == 3
    clips, audio = load_clip_dir(tmp_path / "new" / "dir")
    assert all(np.array_equal(a.frames, b.frames) for a, b in zip(clips, ds.clips))
    assert np.array_equal(audio, ds.audio)
