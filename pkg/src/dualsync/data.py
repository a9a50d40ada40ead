"""Synthetic coupled audio/motion corpus and the MCLIP clip file format.

Each synthetic clip is built from three kinds of latent trajectories:

* shared factors ``u(t)`` common to face and body,
* private factors ``v_E(t)``, ``v_G(t)`` for each modality,

mixed with coupling strength ``kappa``::

    f_E = kappa * u + (1 - kappa) * v_E
    f_G = kappa * u + (1 - kappa) * v_G

Expression channels are a linear read-out of ``f_E`` plus an oscillation
driven by the audio envelope. Gesture channels move between keyposes
``A_G f_G(b_k)`` sampled at the audio beats ``b_k`` with a cosine ease, so the
body comes to rest exactly on every beat. Audio features carry the envelope
and the beat impulses but no trace of the latent factors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dualsync.errors import ConfigError, FormatError

MCLIP_MAGIC = b"MCLP1\x00"
_HEADER = struct.Struct("<IIIfI")


@dataclass(frozen=True)
class SynthConfig:
    n_clips: int = 256
    n_frames: int = 34
    fps: float = 15.0
    joints: int = 8
    expr_dim: int = 16
    audio_dim: int = 32
    beat_rate: float = 2.0
    coupling: float = 0.8
    noise: float = 0.01
    n_factors: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_clips < 1 or self.n_frames < 2:
            raise ConfigError("need n_clips >= 1 and n_frames >= 2")
        if self.fps <= 0 or self.beat_rate <= 0:
            raise ConfigError("fps and beat_rate must be positive")
        if not 0.0 <= self.coupling <= 1.0:
            raise ConfigError(f"coupling must lie in [0, 1], got {self.coupling}")
        if self.noise < 0:
            raise ConfigError("noise level must be non-negative")
        if min(self.joints, self.expr_dim, self.audio_dim, self.n_factors) < 1:
            raise ConfigError("channel counts must be positive")


@dataclass
class MotionClip:
    """Frames are stored as float32 so the file round trip is bit-exact.

    Columns: gesture block (first ``3 * joints``), then expression block.
    """

    frames: np.ndarray
    fps: float
    joints: int
    expr_dim: int
    beats: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float32))

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.beats = np.asarray(self.beats, dtype=np.float32).reshape(-1)
        if self.frames.ndim != 2 or self.frames.shape[1] != 3 * self.joints + self.expr_dim:
            raise ConfigError(f"frames shape {self.frames.shape} does not match "
                              f"3*{self.joints}+{self.expr_dim} channels")
        if not np.isfinite(self.frames).all():
            raise ConfigError("clip contains non-finite frames")
        if self.fps <= 0:
            raise ConfigError("fps must be positive")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def gesture(self) -> np.ndarray:
        return self.frames[:, :3 * self.joints]

    @property
    def expression(self) -> np.ndarray:
        return self.frames[:, 3 * self.joints:]

    @classmethod
    def from_parts(cls, gesture, expression, fps: float, beats=()) -> "MotionClip":
        gesture = np.asarray(gesture)
        expression = np.asarray(expression)
        if gesture.shape[0] != expression.shape[0]:
            raise ConfigError("gesture and expression frame counts differ")
        return cls(np.concatenate([gesture, expression], axis=1), fps,
                   gesture.shape[1] // 3, expression.shape[1], np.asarray(beats))


@dataclass
class SynthDataset:
    config: SynthConfig
    clips: list[MotionClip]
    audio: np.ndarray            # (n_clips, N, audio_dim)
    beats: list[np.ndarray]
    factors_exp: np.ndarray      # (n_clips, N, n_factors)
    factors_ges: np.ndarray

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(expression, gesture, audio) stacked as float64 batches."""
        exp = np.stack([c.expression for c in self.clips]).astype(np.float64)
        ges = np.stack([c.gesture for c in self.clips]).astype(np.float64)
        return exp, ges, self.audio


def _smooth_factors(rng, n_clips, times, n_factors, n_waves=3, f_lo=0.2, f_hi=0.9):
    """Band-limited random trajectories: constant offset plus a few slow sinusoids."""
    offset = rng.normal(0.0, 1.0, size=(n_clips, 1, n_factors))
    amp = rng.normal(0.0, 0.6, size=(n_clips, n_waves, n_factors))
    freq = rng.uniform(f_lo, f_hi, size=(n_clips, n_waves, n_factors))
    phase = rng.uniform(0.0, 2 * np.pi, size=(n_clips, n_waves, n_factors))
    waves = amp[:, None] * np.sin(2 * np.pi * freq[:, None] * times[None, :, None, None] + phase[:, None])
    return offset + waves.sum(axis=2)


def _beat_times(rng, duration, rate):
    """Jittered periodic beat grid extending one period past both clip ends."""
    period = 1.0 / rate
    start = rng.uniform(0.1, 0.6) * period - period
    times = np.arange(start, duration + period, period)
    return np.sort(times + rng.uniform(-0.1, 0.1, size=times.shape) * period)


def _ease_between_beats(times, knots, keyposes):
    """Piecewise cosine ease between keyposes placed on the knots.

    Knots must bracket ``times``. Velocity vanishes at every knot.
    """
    out = np.empty((len(times), keyposes.shape[1]))
    for f, t in enumerate(times):
        k = min(np.searchsorted(knots, t, side="right") - 1, len(knots) - 2)
        u = (t - knots[k]) / (knots[k + 1] - knots[k])
        w = 0.5 * (1.0 - np.cos(np.pi * u))
        out[f] = (1.0 - w) * keyposes[k] + w * keyposes[k + 1]
    return out


def generate_dataset(cfg: SynthConfig) -> SynthDataset:
    rng = np.random.default_rng(cfg.seed)
    N, fps = cfg.n_frames, cfg.fps
    times = np.arange(N) / fps
    duration = N / fps
    kappa = cfg.coupling
    G = 3 * cfg.joints

    # fixed read-out maps shared by every clip of the corpus
    maps = np.random.default_rng([cfg.seed, 1])
    read_exp = maps.normal(0.0, 1.0 / np.sqrt(cfg.n_factors), size=(cfg.n_factors, cfg.expr_dim))
    read_ges = maps.normal(0.0, 1.0 / np.sqrt(cfg.n_factors), size=(cfg.n_factors, G))
    env_exp = maps.normal(0.0, 0.3, size=(2, cfg.expr_dim))
    aud_env = maps.normal(0.0, 1.0, size=(2, cfg.audio_dim))
    aud_beat = maps.normal(0.0, 1.0, size=(cfg.audio_dim,))

    shared = _smooth_factors(rng, cfg.n_clips, times, cfg.n_factors)
    priv_e = _smooth_factors(rng, cfg.n_clips, times, cfg.n_factors)
    priv_g = _smooth_factors(rng, cfg.n_clips, times, cfg.n_factors)
    f_exp = kappa * shared + (1.0 - kappa) * priv_e
    f_ges = kappa * shared + (1.0 - kappa) * priv_g

    clips, audio, beats_all = [], [], []
    for c in range(cfg.n_clips):
        knots = _beat_times(rng, duration, cfg.beat_rate)
        beats = knots[(knots >= 0.0) & (knots < duration)]
        env_freq = rng.uniform(0.3, 1.2)
        env_phase = rng.uniform(0, 2 * np.pi)
        envelope = np.stack([np.sin(2 * np.pi * env_freq * times + env_phase),
                             np.cos(2 * np.pi * env_freq * times + env_phase)], axis=1)
        impulses = np.zeros(N)
        for b in beats:
            impulses += np.exp(-0.5 * ((times - b) * fps / 0.75) ** 2)
        aud = envelope @ aud_env + impulses[:, None] * aud_beat[None]
        aud = aud + cfg.noise * rng.normal(size=aud.shape)

        expression = f_exp[c] @ read_exp + envelope @ env_exp
        # keyposes follow the gesture factors sampled at the beats
        knot_factors = np.stack([np.interp(knots, times, f_ges[c, :, j])
                                 for j in range(cfg.n_factors)], axis=1)
        gesture = _ease_between_beats(times, knots, knot_factors @ read_ges)

        expression = expression + cfg.noise * rng.normal(size=expression.shape)
        gesture = gesture + cfg.noise * rng.normal(size=gesture.shape)
        clips.append(MotionClip.from_parts(gesture, expression, fps, beats))
        audio.append(aud)
        beats_all.append(beats)

    return SynthDataset(cfg, clips, np.stack(audio), beats_all, f_exp, f_ges)


# -- MCLIP files ----------------------------------------------------------------

def write_clip(path: str | Path, clip: MotionClip) -> None:
    if clip.n_frames == 0:
        raise ConfigError("refusing to write a clip with zero frames")
    payload = bytearray(MCLIP_MAGIC)
    payload += _HEADER.pack(clip.n_frames, clip.joints, clip.expr_dim, float(clip.fps), len(clip.beats))
    payload += np.ascontiguousarray(clip.frames, dtype="<f4").tobytes()
    payload += np.ascontiguousarray(clip.beats, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(payload))


def read_clip(path: str | Path) -> MotionClip:
    raw = Path(path).read_bytes()
    if raw[:len(MCLIP_MAGIC)] != MCLIP_MAGIC:
        raise FormatError("bad MCLIP magic", 0)
    pos = len(MCLIP_MAGIC)
    if len(raw) < pos + _HEADER.size:
        raise FormatError("truncated MCLIP header", len(raw))
    n, joints, expr_dim, fps, n_beats = _HEADER.unpack_from(raw, pos)
    pos += _HEADER.size
    if n == 0:
        raise FormatError("clip declares zero frames", len(MCLIP_MAGIC))
    width = 3 * joints + expr_dim
    frame_bytes = 4 * n * width
    needed = pos + frame_bytes + 4 * n_beats
    if width == 0 or frame_bytes // 4 // n != width or needed > len(raw):
        # report where the data runs out
        raise FormatError(f"MCLIP body needs {needed} bytes, file has {len(raw)}",
                          min(len(raw), pos + frame_bytes))
    if needed != len(raw):
        raise FormatError(f"{len(raw) - needed} trailing bytes", needed)
    frames = np.frombuffer(raw, dtype="<f4", count=n * width, offset=pos).reshape(n, width)
    beats = np.frombuffer(raw, dtype="<f4", count=n_beats, offset=pos + frame_bytes)
    if not np.isfinite(frames).all():
        raise FormatError("non-finite frame values", pos)
    return MotionClip(frames.astype(np.float32), float(fps), joints, expr_dim, beats.astype(np.float32))


def save_dataset(ds: SynthDataset, out_dir: str | Path) -> Path:
    """Write one MCLIP per clip, one ``.npy`` of audio features per clip and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, clip in enumerate(ds.clips):
        name = f"clip_{i:05d}"
        write_clip(out / f"{name}.mclip", clip)
        np.save(out / f"{name}.audio.npy", ds.audio[i])
        entries.append({"clip": f"{name}.mclip", "audio": f"{name}.audio.npy",
                        "n_frames": clip.n_frames, "n_beats": int(len(clip.beats))})
    manifest = {"seed": ds.config.seed, "config": asdict(ds.config), "clips": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_clip_dir(path: str | Path) -> tuple[list[MotionClip], np.ndarray | None]:
    """Clips of a directory (manifest order if present, else sorted) and
    stacked audio features when every clip has a matching ``.audio.npy``."""
    root = Path(path)
    manifest = root / "manifest.json"
    if manifest.exists():
        entries = json.loads(manifest.read_text())["clips"]
        clip_files = [root / e["clip"] for e in entries]
        audio_files = [root / e["audio"] if e.get("audio") else None for e in entries]
    else:
        clip_files = sorted(root.glob("*.mclip"))
        audio_files = [f.with_name(f.name[:-len(".mclip")] + ".audio.npy") for f in clip_files]
    clips = [read_clip(f) for f in clip_files]
    audio = None
    if audio_files and all(a is not None and a.exists() for a in audio_files):
        audio = np.stack([np.load(a) for a in audio_files])
    return clips, audio
