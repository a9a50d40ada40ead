"""Dual-branch diffusion transformer with cross-branch synchronisation layers.

Each branch (``"exp"`` for facial expression, ``"ges"`` for body gesture) is
a stack of adaLN-modulated transformer blocks over the frame axis. After the
self-attention of every block the branch publishes its features; the fusion
step then mixes in the counterpart branch's features of the same layer
before the block MLP.

A branch forward pass is exposed as a coroutine (:meth:`DualBranchModel.branch_coroutine`)
that yields ``(layer, features)`` and expects the counterpart features for
that layer to be sent back. Lockstep joint passes, single-branch passes with
fixed counterpart features and the buffered asynchronous sampler are all
drivers of that one coroutine.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Generator, Sequence

import numpy as np

from dualsync.errors import ConfigError, ContractError, DimensionError, FormatError
from dualsync.numerics import (
    Tensor,
    concat,
    gelu,
    layernorm,
    sigmoid,
    silu,
    softmax,
    swapaxes,
)

BRANCHES = ("exp", "ges")
FUSION_MODES = ("none", "uni_E2G", "uni_G2E", "cosync", "concat", "gated")
CROSS_MODES = ("uni_E2G", "uni_G2E", "cosync")
PREDICTIONS = ("eps", "x0")

CKPT_MAGIC = b"AFCKPT1"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_frames: int = 34
    joints: int = 8
    expr_dim: int = 16
    audio_dim: int = 32
    d_model: int = 64
    heads: int = 4
    layers: int = 4
    fusion: str = "cosync"
    mlp_ratio: int = 2
    prediction: str = "eps"
    stop_grad_sync: bool = False

    def __post_init__(self):
        for name in ("n_frames", "joints", "expr_dim", "audio_dim", "d_model", "heads",
                     "layers", "mlp_ratio"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion!r}; choose from {FUSION_MODES}")
        if self.prediction not in PREDICTIONS:
            raise ConfigError(f"unknown prediction target {self.prediction!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def gesture_dim(self) -> int:
        return 3 * self.joints

    @property
    def motion_dim(self) -> int:
        return 3 * self.joints + self.expr_dim

    def channels(self, branch: str) -> int:
        return self.expr_dim if branch == "exp" else self.gesture_dim


def receives(fusion: str, branch: str) -> bool:
    """Whether ``branch`` consumes counterpart features under ``fusion``."""
    if fusion in ("none",):
        return False
    if fusion == "uni_E2G":
        return branch == "ges"
    if fusion == "uni_G2E":
        return branch == "exp"
    return True


def sinusoidal(values, dim: int) -> np.ndarray:
    """Interleaved [sin, cos, sin, cos, ...] encoding of each value."""
    values = np.asarray(values, dtype=np.float64)
    k = np.arange(dim // 2 + dim % 2)
    freqs = np.exp(-math.log(10000.0) * 2.0 * k / dim)
    angles = values[..., None] * freqs
    out = np.empty(values.shape + (2 * len(k),))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out[..., :dim]


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (scale + 1.0) + shift


def multihead_attention(q_in: Tensor, kv_in: Tensor, heads: int,
                        wq, bq, wk, bk, wv, bv) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V per head, heads concatenated back to width."""
    B, N, d = q_in.shape
    M = kv_in.shape[1]
    if kv_in.shape[0] != B or kv_in.shape[2] != d:
        raise DimensionError(f"attention inputs {q_in.shape} vs {kv_in.shape}")
    dh = d // heads
    q = _linear(q_in, wq, bq).reshape(B, N, heads, dh).transpose(0, 2, 1, 3)
    k = _linear(kv_in, wk, bk).reshape(B, M, heads, dh).transpose(0, 2, 1, 3)
    v = _linear(kv_in, wv, bv).reshape(B, M, heads, dh).transpose(0, 2, 1, 3)
    scores = (q @ swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    attended = softmax(scores, axis=-1) @ v
    return attended.transpose(0, 2, 1, 3).reshape(B, N, d)


def cosync_attend(f_self: Tensor, f_other: Tensor, p: dict[str, Tensor], heads: int) -> Tensor:
    """Cross-branch synchronisation: queries from ``f_self``, keys/values from
    ``f_other`` over the frame axis, then ``MLP(LN(A)) + f_self``."""
    if f_self.shape != f_other.shape:
        raise DimensionError(f"cosync inputs differ: {f_self.shape} vs {f_other.shape}")
    a = multihead_attention(f_self, f_other, heads,
                            p["wq"], p["bq"], p["wk"], p["bk"], p["wv"], p["bv"])
    a = layernorm(a, p["ln_g"], p["ln_b"])
    return _linear(gelu(_linear(a, p["w1"], p["b1"])), p["w2"], p["b2"]) + f_self


def gated_fuse(f_exp: Tensor, f_ges: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """g * f_exp + (1 - g) * f_ges with g = sigmoid([f_exp; f_ges] W + b)."""
    if f_exp.shape != f_ges.shape:
        raise DimensionError(f"gated fusion inputs differ: {f_exp.shape} vs {f_ges.shape}")
    g = sigmoid(_linear(concat([f_exp, f_ges], axis=-1), w, b))
    return g * f_exp + (1.0 - g) * f_ges


def _param_shapes(cfg: ModelConfig, branch: str) -> list[tuple[str, tuple[int, ...]]]:
    d, r = cfg.d_model, cfg.mlp_ratio * cfg.d_model
    c = cfg.channels(branch)
    shapes = [
        ("in.w", (c, d)), ("in.b", (d,)),
        ("aud.w", (cfg.audio_dim, d)), ("aud.b", (d,)),
        ("temb.w1", (d, d)), ("temb.b1", (d,)), ("temb.w2", (d, d)), ("temb.b2", (d,)),
    ]
    for i in range(cfg.layers):
        blk = f"l{i}."
        shapes += [
            (blk + "ada.w", (d, 6 * d)), (blk + "ada.b", (6 * d,)),
            (blk + "attn.wq", (d, d)), (blk + "attn.bq", (d,)),
            (blk + "attn.wk", (d, d)), (blk + "attn.bk", (d,)),
            (blk + "attn.wv", (d, d)), (blk + "attn.bv", (d,)),
            (blk + "attn.wo", (d, d)), (blk + "attn.bo", (d,)),
            (blk + "mlp.w1", (d, r)), (blk + "mlp.b1", (r,)),
            (blk + "mlp.w2", (r, d)), (blk + "mlp.b2", (d,)),
        ]
        if cfg.fusion in CROSS_MODES:
            shapes += [
                (blk + "sync.wq", (d, d)), (blk + "sync.bq", (d,)),
                (blk + "sync.wk", (d, d)), (blk + "sync.bk", (d,)),
                (blk + "sync.wv", (d, d)), (blk + "sync.bv", (d,)),
                (blk + "sync.ln_g", (d,)), (blk + "sync.ln_b", (d,)),
                (blk + "sync.w1", (d, r)), (blk + "sync.b1", (r,)),
                (blk + "sync.w2", (r, d)), (blk + "sync.b2", (d,)),
            ]
        elif cfg.fusion == "concat":
            shapes += [(blk + "cat.w", (2 * d, d)), (blk + "cat.b", (d,))]
        elif cfg.fusion == "gated":
            shapes += [(blk + "gate.w", (2 * d, d)), (blk + "gate.b", (d,))]
    shapes += [("final.ada.w", (d, 2 * d)), ("final.ada.b", (2 * d,)),
               ("out.w", (d, c)), ("out.b", (c,))]
    return [(f"{branch}.{name}", shape) for name, shape in shapes]


def param_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration (checkpoint) order."""
    return _param_shapes(cfg, "exp") + _param_shapes(cfg, "ges")


_ZERO_INIT = ("ada.w", "ada.b", "out.w", "out.b")


@dataclass
class DualBranchModel:
    config: ModelConfig
    params: dict[str, Tensor]
    trained_steps: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, zero_init: bool = True) -> "DualBranchModel":
        """Seeded initialisation. ``zero_init`` zeroes the adaLN modulation and
        output projections so every block starts as the identity map."""
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        for name, shape in param_layout(config):
            if name.endswith("ln_g"):
                arr = np.ones(shape)
            elif len(shape) == 1:
                arr = np.zeros(shape)
            else:
                arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
            if zero_init and name.endswith(_ZERO_INIT):
                arr = np.zeros(shape)
            params[name] = Tensor(arr, requires_grad=True)
        return cls(config, params)

    # -- bookkeeping ----------------------------------------------------------

    @property
    def fusion(self) -> str:
        return self.config.fusion

    def receives(self, branch: str) -> bool:
        return receives(self.config.fusion, branch)

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def branch_params(self, branch: str) -> list[str]:
        return [name for name in self.params if name.startswith(branch + ".")]

    def copy(self) -> "DualBranchModel":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return DualBranchModel(self.config, params, self.trained_steps, dict(self.meta))

    def with_config(self, **changes) -> "DualBranchModel":
        """Same parameters under an adjusted config (fusion mode must keep the layout)."""
        cfg = replace(self.config, **changes)
        if [n for n, _ in param_layout(cfg)] != list(self.params):
            raise ConfigError("config change alters the parameter layout")
        return DualBranchModel(cfg, self.params, self.trained_steps, dict(self.meta))

    @staticmethod
    def combine(exp_model: "DualBranchModel", ges_model: "DualBranchModel") -> "DualBranchModel":
        """Expression branch from one model, gesture branch from another."""
        if param_layout(exp_model.config) != param_layout(ges_model.config):
            raise ConfigError("cannot combine models with different layouts")
        params = {}
        for name in exp_model.params:
            src = exp_model if name.startswith("exp.") else ges_model
            params[name] = src.params[name]
        return DualBranchModel(exp_model.config, params,
                               min(exp_model.trained_steps, ges_model.trained_steps))

    # -- forward pieces ---------------------------------------------------------

    def _p(self, branch: str, name: str) -> Tensor:
        return self.params[f"{branch}.{name}"]

    def embed_timestep(self, t, branch: str = "exp") -> Tensor:
        """gamma(t): sinusoidal base followed by the branch's 2-layer MLP."""
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0):
            raise ContractError("timesteps must be non-negative")
        base = Tensor(sinusoidal(np.atleast_1d(t), self.config.d_model))
        hidden = silu(_linear(base, self._p(branch, "temb.w1"), self._p(branch, "temb.b1")))
        out = _linear(hidden, self._p(branch, "temb.w2"), self._p(branch, "temb.b2"))
        return out.reshape(self.config.d_model) if t.ndim == 0 else out

    def _fuse(self, branch: str, i: int, h: Tensor, other: Tensor | None) -> Tensor:
        if not self.receives(branch):
            return h
        if other is None:
            raise ContractError(f"fusion mode {self.fusion!r} needs counterpart features "
                                f"for branch {branch!r} at layer {i}")
        other = other if isinstance(other, Tensor) else Tensor(other)
        if other.shape != h.shape:
            raise DimensionError(f"counterpart features {other.shape} vs own {h.shape}")
        blk = f"l{i}."
        if self.fusion in CROSS_MODES:
            p = {k: self._p(branch, blk + "sync." + k) for k in
                 ("wq", "bq", "wk", "bk", "wv", "bv", "ln_g", "ln_b", "w1", "b1", "w2", "b2")}
            return cosync_attend(h, other, p, self.config.heads)
        if self.fusion == "concat":
            mixed = concat([h, other], axis=-1)
            return h + _linear(mixed, self._p(branch, blk + "cat.w"), self._p(branch, blk + "cat.b"))
        w, b = self._p(branch, blk + "gate.w"), self._p(branch, blk + "gate.b")
        return gated_fuse(h, other, w, b) if branch == "exp" else gated_fuse(other, h, w, b)

    def branch_coroutine(self, branch: str, z, t, aud) -> Generator[tuple[int, Tensor], Tensor | None, tuple[Tensor, list[Tensor]]]:
        """Run one branch layer by layer.

        Yields ``(layer, features)`` right after each self-attention block and
        expects the counterpart's layer features (or ``None``) to be sent back.
        Returns ``(prediction, per_layer_features)``.
        """
        cfg = self.config
        z = z if isinstance(z, Tensor) else Tensor(z)
        aud = aud if isinstance(aud, Tensor) else Tensor(aud)
        if z.ndim != 3 or aud.ndim != 3:
            raise DimensionError("branch inputs must be (batch, frames, channels)")
        B, N, C = z.shape
        if C != cfg.channels(branch):
            raise DimensionError(f"{branch} input has {C} channels, expected {cfg.channels(branch)}")
        if aud.shape != (B, N, cfg.audio_dim):
            raise DimensionError(f"audio features {aud.shape}, expected {(B, N, cfg.audio_dim)}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        d = cfg.d_model

        pos = Tensor(sinusoidal(np.arange(N), d))
        h = (_linear(z, self._p(branch, "in.w"), self._p(branch, "in.b"))
             + _linear(aud, self._p(branch, "aud.w"), self._p(branch, "aud.b")) + pos)
        cond = silu(self.embed_timestep(t, branch)).reshape(B, 1, d)

        features: list[Tensor] = []
        for i in range(cfg.layers):
            blk = f"l{i}."
            mod = _linear(cond, self._p(branch, blk + "ada.w"), self._p(branch, blk + "ada.b"))
            shift1, scale1, gate1 = mod[..., 0:d], mod[..., d:2 * d], mod[..., 2 * d:3 * d]
            shift2, scale2, gate2 = mod[..., 3 * d:4 * d], mod[..., 4 * d:5 * d], mod[..., 5 * d:]

            x = _modulate(layernorm(h), shift1, scale1)
            a = multihead_attention(x, x, cfg.heads,
                                    *(self._p(branch, blk + "attn." + k)
                                      for k in ("wq", "bq", "wk", "bk", "wv", "bv")))
            a = _linear(a, self._p(branch, blk + "attn.wo"), self._p(branch, blk + "attn.bo"))
            h = h + gate1 * a
            features.append(h)
            other = yield i, h
            h = self._fuse(branch, i, h, other)

            x = _modulate(layernorm(h), shift2, scale2)
            m = _linear(gelu(_linear(x, self._p(branch, blk + "mlp.w1"), self._p(branch, blk + "mlp.b1"))),
                        self._p(branch, blk + "mlp.w2"), self._p(branch, blk + "mlp.b2"))
            h = h + gate2 * m

        mod = _linear(cond, self._p(branch, "final.ada.w"), self._p(branch, "final.ada.b"))
        x = _modulate(layernorm(h), mod[..., :d], mod[..., d:])
        out = _linear(x, self._p(branch, "out.w"), self._p(branch, "out.b"))
        return out, features

    def branch_forward(self, branch: str, z, t, aud,
                       counterpart_features: Sequence | None = None) -> tuple[Tensor, list[Tensor]]:
        """One branch on its own, with fixed counterpart features per layer."""
        if self.receives(branch) and counterpart_features is None:
            raise ContractError(f"fusion mode {self.fusion!r} needs counterpart features for {branch!r}")
        squeeze = np.ndim(z) == 2
        z, aud = _batched(z), _batched(aud)
        co = self.branch_coroutine(branch, z, t, aud)
        try:
            i, _ = next(co)
            while True:
                other = None if counterpart_features is None else _batched(counterpart_features[i])
                i, _ = co.send(other)
        except StopIteration as stop:
            out, feats = stop.value
        if squeeze:
            out = out.reshape(out.shape[1:])
            feats = [f.reshape(f.shape[1:]) for f in feats]
        return out, feats

    def forward(self, z_exp, z_ges, t_exp, t_ges, aud):
        """Both branches in lockstep; layer ``i`` of each reads layer ``i`` of the other.

        Returns ``(pred_exp, pred_ges, features_exp, features_ges)``.
        """
        squeeze = np.ndim(z_exp) == 2
        z_exp, z_ges, aud = _batched(z_exp), _batched(z_ges), _batched(aud)
        co_e = self.branch_coroutine("exp", z_exp, t_exp, aud)
        co_g = self.branch_coroutine("ges", z_ges, t_ges, aud)
        results = run_lockstep(co_e, co_g, detach=self.config.stop_grad_sync)
        out_e, feats_e = results[0]
        out_g, feats_g = results[1]
        if squeeze:
            out_e = out_e.reshape(out_e.shape[1:])
            out_g = out_g.reshape(out_g.shape[1:])
            feats_e = [f.reshape(f.shape[1:]) for f in feats_e]
            feats_g = [f.reshape(f.shape[1:]) for f in feats_g]
        return out_e, out_g, feats_e, feats_g


def model_forward(model: DualBranchModel, z_exp, z_ges, t_exp, t_ges, aud):
    return model.forward(z_exp, z_ges, t_exp, t_ges, aud)


def _batched(x):
    if x is None:
        return None
    if isinstance(x, Tensor):
        return x if x.ndim == 3 else x.reshape((1,) + x.shape)
    x = np.asarray(x, dtype=np.float64)
    return Tensor(x if x.ndim == 3 else x[None])


def run_lockstep(co_e, co_g, detach: bool = False):
    """Drive two branch coroutines layer by layer.

    Expression publishes first, then gesture; each then receives the other's
    features of the same layer.
    """
    i_e, f_e = next(co_e)
    i_g, f_g = next(co_g)
    done_e = done_g = None
    while True:
        send_to_e = f_g.detach() if detach else f_g
        send_to_g = f_e.detach() if detach else f_e
        try:
            i_e, f_e = co_e.send(send_to_e)
        except StopIteration as stop:
            done_e = stop.value
        try:
            i_g, f_g = co_g.send(send_to_g)
        except StopIteration as stop:
            done_g = stop.value
        if done_e is not None and done_g is not None:
            return done_e, done_g
        if (done_e is None) != (done_g is None):
            raise ContractError("branches have different depths")


# -- checkpoint IO ----------------------------------------------------------------

def save_checkpoint(model: DualBranchModel, path: str | Path) -> None:
    """Binary checkpoint: magic, JSON header, then float64 LE tensors with shape headers."""
    header = json.dumps({
        "version": CKPT_VERSION,
        "config": asdict(model.config),
        "trained_steps": model.trained_steps,
        "meta": model.meta,
    }, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    names = [n for n, _ in param_layout(model.config)]
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = model.params[name].data
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> DualBranchModel:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"checkpoint truncated, needed {n} bytes", pos)
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    (hlen,) = struct.unpack("<I", take(4))
    start = pos
    try:
        header = json.loads(take(hlen).decode("utf-8"))
        config = ModelConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}", start) from exc
    layout = param_layout(config)
    (count,) = struct.unpack("<I", take(4))
    if count != len(layout):
        raise FormatError(f"expected {len(layout)} tensors, found {count}", pos - 4)
    params = {}
    for name, shape in layout:
        at = pos
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if tuple(dims) != shape:
            raise FormatError(f"tensor {name} has shape {dims}, expected {shape}", at)
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = Tensor(arr, requires_grad=True)
    if pos != len(raw):
        raise FormatError("trailing bytes after last tensor", pos)
    return DualBranchModel(config, params, int(header.get("trained_steps", 0)),
                           dict(header.get("meta", {})))
