"""Fréchet distances over encoded motion, diversity and beat alignment."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dualsync.data import MotionClip
from dualsync.errors import ConfigError, ContractError, DimensionError, NumericalError
from dualsync.numerics import psd_sqrt_with_clamp

ENCODER_SEED = 0xA5F
LATENT_DIM = 16
CHANNEL_SETS = ("all", "expression", "gesture")
REPORT_KEYS = ["fmd", "fed", "fgd", "div", "ba", "ba_sigma", "sqrt_clamp", "encoder_id", "n_real", "n_gen"]


def clip_channels(clip: MotionClip, channels: str) -> np.ndarray:
    if channels == "all":
        return clip.frames.astype(np.float64)
    if channels == "expression":
        return clip.expression.astype(np.float64)
    if channels == "gesture":
        return clip.gesture.astype(np.float64)
    raise ConfigError(f"channel set must be one of {CHANNEL_SETS}, got {channels!r}")


@dataclass
class LatentEncoder:
    """Per-frame MLP (tanh hidden layer, linear read-out) then temporal mean pooling.

    ``w2``/``b2`` may be absent, in which case the frame map is the single
    linear layer ``x @ w1 + b1``.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray | None = None
    b2: np.ndarray | None = None
    tag: str = "custom"

    @classmethod
    def seeded(cls, in_dim: int, seed: int = ENCODER_SEED, hidden: int = 64,
               latent: int = LATENT_DIM) -> "LatentEncoder":
        rng = np.random.default_rng(seed)
        w1 = rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(in_dim, hidden))
        b1 = rng.normal(0.0, 0.1, size=hidden)
        w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, latent))
        return cls(w1, b1, w2, np.zeros(latent), tag=f"seed{seed}")

    @classmethod
    def linear(cls, w: np.ndarray, b: np.ndarray | None = None) -> "LatentEncoder":
        w = np.asarray(w, dtype=np.float64)
        return cls(w, np.zeros(w.shape[1]) if b is None else np.asarray(b, np.float64), tag="linear")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def latent_dim(self) -> int:
        return (self.w2 if self.w2 is not None else self.w1).shape[1]

    @property
    def encoder_id(self) -> str:
        h = hashlib.sha256()
        for arr in (self.w1, self.b1, self.w2, self.b2):
            if arr is not None:
                h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return f"{self.tag}-{self.in_dim}x{self.latent_dim}-{h.hexdigest()[:12]}"

    def frame_features(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape[-1] != self.in_dim:
            raise DimensionError(f"encoder expects {self.in_dim} channels, got {frames.shape[-1]}")
        h = frames @ self.w1 + self.b1
        if self.w2 is None:
            return h
        return np.tanh(h) @ self.w2 + self.b2

    def encode(self, frames: np.ndarray) -> np.ndarray:
        """(N, C) or (B, N, C) -> latent (d,) or (B, d)."""
        return self.frame_features(frames).mean(axis=-2)

    @classmethod
    def fit_autoencoder(cls, frames: np.ndarray, steps: int = 500, seed: int = ENCODER_SEED,
                        hidden: int = 64, latent: int = LATENT_DIM, lr: float = 1e-2) -> "LatentEncoder":
        """Train the encoder jointly with a linear decoder to reconstruct frames.

        ``frames`` is any (..., C) array of per-frame motion vectors.
        """
        from dualsync.numerics import Graph, Tensor, square, tanh

        x = np.asarray(frames, dtype=np.float64).reshape(-1, np.shape(frames)[-1])
        enc = cls.seeded(x.shape[1], seed, hidden, latent)
        rng = np.random.default_rng(seed)
        params = {"w1": enc.w1, "b1": enc.b1, "w2": enc.w2, "b2": enc.b2,
                  "dw": rng.normal(0.0, 1.0 / math.sqrt(latent), size=(latent, x.shape[1])),
                  "db": np.zeros(x.shape[1])}
        m = {k: np.zeros_like(v) for k, v in params.items()}
        v2 = {k: np.zeros_like(v) for k, v in params.items()}
        for step in range(1, steps + 1):
            batch = x[rng.integers(0, len(x), size=min(256, len(x)))]
            tp = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            with Graph() as g:
                z = tanh(Tensor(batch) @ tp["w1"] + tp["b1"]) @ tp["w2"] + tp["b2"]
                loss = square(z @ tp["dw"] + tp["db"] - batch).mean()
                grads = g.backward(loss, list(tp.values()))
            for (k, val), gr in zip(params.items(), grads):
                m[k] = 0.9 * m[k] + 0.1 * gr
                v2[k] = 0.999 * v2[k] + 0.001 * gr * gr
                params[k] = val - lr * (m[k] / (1 - 0.9 ** step)) / (np.sqrt(v2[k] / (1 - 0.999 ** step)) + 1e-8)
        return cls(params["w1"], params["b1"], params["w2"], params["b2"], tag=f"ae{seed}")

    def save(self, path: str | Path) -> None:
        arrays = {k: v for k, v in (("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2))
                  if v is not None}
        with open(path, "wb") as fh:
            np.savez(fh, tag=np.array(self.tag), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "LatentEncoder":
        with np.load(path) as npz:
            return cls(npz["w1"], npz["b1"], npz["w2"] if "w2" in npz else None,
                       npz["b2"] if "b2" in npz else None, tag=str(npz["tag"]))


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    encoder_id: str | None = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        s = np.asarray(self.sigma, dtype=np.float64)
        if s.ndim == 0:
            s = s.reshape(1, 1)
        if s.shape != (self.mu.size, self.mu.size):
            raise DimensionError(f"covariance {s.shape} does not match mean of size {self.mu.size}")
        self.sigma = 0.5 * (s + s.T)

    @classmethod
    def fit(cls, latents: np.ndarray, encoder_id: str | None = None) -> "GaussianStats":
        z = np.asarray(latents, dtype=np.float64)
        if z.ndim != 2:
            raise DimensionError(f"latents must be (n, d), got {z.shape}")
        if z.shape[0] < 2:
            raise ContractError("covariance needs at least two samples")
        return cls(z.mean(axis=0), np.cov(z, rowvar=False, ddof=1).reshape(z.shape[1], z.shape[1]),
                   encoder_id)


def frechet_distance(r: GaussianStats, s: GaussianStats) -> float:
    """||mu_r - mu_s||^2 + Tr(S_r + S_s - 2 sqrt(S_r^1/2 S_s S_r^1/2))."""
    return frechet_distance_with_clamp(r, s)[0]


def frechet_distance_with_clamp(r: GaussianStats, s: GaussianStats) -> tuple[float, float]:
    """Distance plus the largest negative eigenvalue clamped inside either square root."""
    if r.mu.shape != s.mu.shape:
        raise DimensionError(f"latent dims differ: {r.mu.size} vs {s.mu.size}")
    if r.encoder_id is not None and s.encoder_id is not None and r.encoder_id != s.encoder_id:
        raise ConfigError(f"statistics come from different encoders: {r.encoder_id} vs {s.encoder_id}")
    root_r, clamp_r = psd_sqrt_with_clamp(r.sigma)
    inner = root_r @ s.sigma @ root_r
    cross, clamp_x = psd_sqrt_with_clamp(inner)
    diff = r.mu - s.mu
    value = float(diff @ diff + np.trace(r.sigma) + np.trace(s.sigma) - 2.0 * np.trace(cross))
    # round-off of size eps*|M| in a near-zero eigenvalue becomes sqrt(eps*|M|) after the root
    tol = 1e-8 + 10.0 * r.mu.size * math.sqrt(np.finfo(float).eps * max(np.abs(inner).max(), 0.0))
    if value < -tol:
        raise NumericalError(f"Fréchet distance is negative beyond tolerance: {value}")
    return max(value, 0.0), max(clamp_r, clamp_x)


def _encoder_for(clips: Sequence[MotionClip], channels: str, enc: LatentEncoder | None) -> LatentEncoder:
    if enc is not None:
        return enc
    return LatentEncoder.seeded(clip_channels(clips[0], channels).shape[1])


def encode_set(clips: Sequence[MotionClip], channels: str, enc: LatentEncoder) -> np.ndarray:
    return np.stack([enc.encode(clip_channels(c, channels)) for c in clips])


def set_distance(real: Sequence[MotionClip], gen: Sequence[MotionClip], channels: str = "all",
                 enc: LatentEncoder | None = None) -> float:
    return _set_distance(real, gen, channels, enc)[0]


def _set_distance(real, gen, channels, enc):
    if len(real) < 2 or len(gen) < 2:
        raise ContractError("each set needs at least two clips")
    enc = _encoder_for(real, channels, enc)
    r = GaussianStats.fit(encode_set(real, channels, enc), enc.encoder_id)
    s = GaussianStats.fit(encode_set(gen, channels, enc), enc.encoder_id)
    return frechet_distance_with_clamp(r, s)


def fmd(real, gen, enc: LatentEncoder | None = None) -> float:
    return set_distance(real, gen, "all", enc)


def fed(real, gen, enc: LatentEncoder | None = None) -> float:
    return set_distance(real, gen, "expression", enc)


def fgd(real, gen, enc: LatentEncoder | None = None) -> float:
    return set_distance(real, gen, "gesture", enc)


def diversity(batch, batch_size: int = 50) -> float:
    """Mean per-element L1 distance over all unordered pairs of the first
    ``batch_size`` samples."""
    arrs = [np.asarray(c.frames if isinstance(c, MotionClip) else c, dtype=np.float64)
            for c in batch][:batch_size]
    if len(arrs) < 2:
        raise ContractError("diversity needs at least two samples")
    x = np.stack(arrs).reshape(len(arrs), -1)
    total = 0.0
    for i in range(len(x) - 1):
        total += np.abs(x[i + 1:] - x[i]).mean(axis=1).sum()
    B = len(x)
    return float(2.0 * total / (B * (B - 1)))


# -- beats --------------------------------------------------------------------------

@dataclass
class BeatSet:
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    source: str = "motion"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if self.source not in ("audio", "motion"):
            raise ConfigError(f"beat source must be 'audio' or 'motion', got {self.source!r}")
        if self.times.size and (self.times[0] < 0 or np.any(np.diff(self.times) <= 0)):
            raise ContractError("beat times must be non-negative and strictly increasing")

    def __len__(self) -> int:
        return self.times.size


def _local_minima(signal: np.ndarray) -> list[int]:
    """Interior minima; a flat bottom counts once, at its first frame."""
    out = []
    n = len(signal)
    i = 1
    while i < n - 1:
        if signal[i] < signal[i - 1]:
            j = i
            while j + 1 < n and signal[j + 1] == signal[i]:
                j += 1
            if j + 1 >= n or signal[j + 1] > signal[i]:
                out.append(i)
            i = j + 1
        else:
            i += 1
    return out


def _pick_separated(candidates: list[int], values: np.ndarray, min_gap: int) -> list[int]:
    """Greedy non-maximum suppression keeping the lowest values first."""
    kept: list[int] = []
    for i in sorted(candidates, key=lambda k: (values[k], k)):
        if all(abs(i - k) >= min_gap for k in kept):
            kept.append(i)
    return sorted(kept)


def motion_speed(gesture: np.ndarray) -> np.ndarray:
    """Per-frame velocity magnitude (central differences, one-sided at the ends)."""
    return np.linalg.norm(np.gradient(np.asarray(gesture, dtype=np.float64), axis=0), axis=1)


def extract_motion_beats(clip: MotionClip, fps: float | None = None, min_sep: float = 0.2,
                         edge_rest: float = 0.25) -> BeatSet:
    """Beats at local minima of the gesture speed, at least ``min_sep`` seconds apart.

    A first or last frame counts as a minimum only when it is slower than its
    neighbour and below ``edge_rest`` times the clip's peak speed, so beats
    cut by the clip boundary are kept without turning every clip edge into one.
    """
    fps = clip.fps if fps is None else fps
    if clip.n_frames < 3:
        raise ContractError("beat extraction needs at least three frames")
    speed = motion_speed(clip.gesture)
    candidates = _local_minima(speed)
    limit = edge_rest * speed.max()
    if speed[0] < speed[1] and speed[0] < limit:
        candidates.insert(0, 0)
    if speed[-1] < speed[-2] and speed[-1] < limit:
        candidates.append(len(speed) - 1)
    gap = max(1, int(math.ceil(min_sep * fps - 1e-9)))
    frames = _pick_separated(candidates, speed, gap)
    return BeatSet(np.array(frames, dtype=np.float64) / fps, "motion")


def extract_audio_beats(audio: np.ndarray, fps: float, min_sep: float = 0.2) -> BeatSet:
    """Peaks of the per-frame audio-feature energy, at least ``min_sep`` apart."""
    energy = np.linalg.norm(np.asarray(audio, dtype=np.float64), axis=1)
    gap = max(1, int(math.ceil(min_sep * fps - 1e-9)))
    frames = _pick_separated(_local_minima(-energy), -energy, gap)
    return BeatSet(np.array(frames, dtype=np.float64) / fps, "audio")


def beat_alignment(motion: BeatSet, audio: BeatSet, sigma: float = 0.1) -> float:
    """Mean over motion beats of exp(-d^2 / (2 sigma^2)), d the distance to the
    nearest audio beat."""
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    if len(motion) == 0:
        warnings.warn("no motion beats; beat alignment defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    if len(audio) == 0:
        raise ContractError("beat alignment needs at least one audio beat")
    d = np.min(np.abs(motion.times[:, None] - audio.times[None, :]), axis=1)
    return float(np.mean(np.exp(-d * d / (2.0 * sigma * sigma))))


# -- reports ------------------------------------------------------------------------

def evaluate(real: Sequence[MotionClip], gen: Sequence[MotionClip], ba_sigma: float = 0.1,
             encoder_seed: int = ENCODER_SEED, div_batch: int = 50) -> dict:
    """Full metric suite. Audio beats for BA are taken from each generated clip."""
    if len(real) < 2 or len(gen) < 2:
        raise ContractError("each set needs at least two clips")
    encs = {ch: LatentEncoder.seeded(clip_channels(real[0], ch).shape[1], encoder_seed)
            for ch in CHANNEL_SETS}
    scores = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for clip in gen:
            if clip.beats.size:
                scores.append(beat_alignment(extract_motion_beats(clip), BeatSet(clip.beats, "audio"),
                                             ba_sigma))
    dist = {ch: _set_distance(real, gen, ch, encs[ch]) for ch in CHANNEL_SETS}
    return {
        "fmd": dist["all"][0],
        "fed": dist["expression"][0],
        "fgd": dist["gesture"][0],
        "div": diversity(gen, div_batch),
        "ba": float(np.mean(scores)) if scores else float("nan"),
        "ba_sigma": ba_sigma,
        "sqrt_clamp": max(d[1] for d in dist.values()),
        "encoder_id": "+".join(encs[ch].encoder_id for ch in CHANNEL_SETS),
        "n_real": len(real),
        "n_gen": len(gen),
    }


def write_report(report: dict, json_path: str | Path, csv_path: str | Path | None = None) -> None:
    with open(json_path, "w") as fh:
        json.dump(report, fh, indent=2)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_KEYS)
            writer.writeheader()
            writer.writerow({k: report[k] for k in REPORT_KEYS})
