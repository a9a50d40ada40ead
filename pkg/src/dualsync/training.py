"""Three-term diffusion loss, AdamW training loop and consistency fine-tuning."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dualsync.diffusion import ConsistencyParam, NoiseSchedule, consistency_apply
from dualsync.errors import ConfigError, ContractError, NumericalError
from dualsync.model import BRANCHES, DualBranchModel, ModelConfig
from dualsync.numerics import Graph, Tensor, huber, no_grad, square

LOSS_COLUMNS = ["step", "Lt_exp", "Lv_exp", "Ld_exp", "Lt_ges", "Lv_ges", "Ld_ges", "total"]


class TrainingDivergedError(NumericalError):
    """Loss or parameters became non-finite."""


@dataclass(frozen=True)
class LossWeights:
    lambda_t: float = 10.0
    lambda_v: float = 1.0
    lambda_delta: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        if min(self.lambda_t, self.lambda_v, self.lambda_delta) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.delta <= 0:
            raise ConfigError(f"huber delta must be positive, got {self.delta}")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def loss_noise(eps, eps_hat) -> Tensor:
    """Mean squared noise-prediction error."""
    return square(_t(eps) - _t(eps_hat)).mean()


def loss_velocity(x0, x0_hat) -> Tensor:
    """MSE between first-order frame differences (frames on axis -2)."""
    x0, x0_hat = _t(x0), _t(x0_hat)
    if x0.shape[-2] < 2:
        raise ContractError("velocity loss needs at least two frames")
    vel = x0[..., 1:, :] - x0[..., :-1, :]
    vel_hat = x0_hat[..., 1:, :] - x0_hat[..., :-1, :]
    return square(vel - vel_hat).mean()


def loss_huber(x0, x0_hat, delta: float = 1.0) -> Tensor:
    return huber(_t(x0) - _t(x0_hat), delta).mean()


def x0_from_eps(xt: np.ndarray, eps_hat: Tensor, t: np.ndarray, schedule: NoiseSchedule) -> Tensor:
    """(x_t - sqrt(1 - abar) * eps_hat) / sqrt(abar), differentiable in eps_hat."""
    ab = schedule.abar_array(t).reshape(-1, 1, 1)
    return Tensor(xt / np.sqrt(ab)) - eps_hat * np.sqrt((1.0 - ab) / ab)


def draw_noise(batch, schedule: NoiseSchedule, rng: np.random.Generator) -> dict:
    """Independent timesteps and Gaussian noise per branch."""
    x_exp, x_ges, _ = batch
    B = x_exp.shape[0]
    return {
        "t_exp": rng.integers(1, schedule.T + 1, size=B),
        "t_ges": rng.integers(1, schedule.T + 1, size=B),
        "eps_exp": rng.standard_normal(x_exp.shape),
        "eps_ges": rng.standard_normal(x_ges.shape),
    }


def _noisy(x0, t, eps, schedule):
    ab = schedule.abar_array(t).reshape(-1, 1, 1)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def loss_terms(batch, model: DualBranchModel, schedule: NoiseSchedule,
               weights: LossWeights, noise: dict) -> tuple[Tensor, dict[str, float]]:
    """Weighted loss as a graph node plus the six per-branch terms."""
    if model.config.prediction != "eps":
        raise ContractError("the diffusion loss trains noise-prediction models")
    x_exp, x_ges, aud = (np.asarray(b, dtype=np.float64) for b in batch)
    xt = {"exp": _noisy(x_exp, noise["t_exp"], noise["eps_exp"], schedule),
          "ges": _noisy(x_ges, noise["t_ges"], noise["eps_ges"], schedule)}
    pred_e, pred_g, _, _ = model.forward(xt["exp"], xt["ges"], noise["t_exp"], noise["t_ges"], aud)
    preds = {"exp": pred_e, "ges": pred_g}
    clean = {"exp": x_exp, "ges": x_ges}
    total = None
    parts: dict[str, float] = {}
    for br in BRANCHES:
        eps_hat = preds[br]
        x0_hat = x0_from_eps(xt[br], eps_hat, noise[f"t_{br}"], schedule)
        lt = loss_noise(noise[f"eps_{br}"], eps_hat)
        lv = loss_velocity(clean[br], x0_hat)
        ld = loss_huber(clean[br], x0_hat, weights.delta)
        parts.update({f"Lt_{br}": lt.item(), f"Lv_{br}": lv.item(), f"Ld_{br}": ld.item()})
        term = lt * weights.lambda_t + lv * weights.lambda_v + ld * weights.lambda_delta
        total = term if total is None else total + term
    parts["total"] = total.item()
    return total, parts


@dataclass
class LossResult:
    loss: float
    parts: dict[str, float]
    grads: dict[str, np.ndarray]


def total_loss(batch, model: DualBranchModel, schedule: NoiseSchedule,
               weights: LossWeights = LossWeights(), noise: dict | None = None,
               rng: np.random.Generator | None = None) -> LossResult:
    """Loss value, its six components and gradients for every parameter."""
    if noise is None:
        noise = draw_noise(batch, schedule, rng if rng is not None else np.random.default_rng())
    params = list(model.params.items())
    with Graph() as g:
        loss, parts = loss_terms(batch, model, schedule, weights, noise)
        grads = g.backward(loss, [p for _, p in params])
    return LossResult(loss.item(), parts, {name: gr for (name, _), gr in zip(params, grads)})


# -- optimisation -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    warmup: int = 50
    ema_decay: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")

    def lr_at(self, step: int) -> float:
        """Linear warm-up, then cosine decay to zero at ``steps``."""
        if self.steps == 0:
            return self.lr
        if step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        progress = min(1.0, (step - self.warmup) / max(1, self.steps - self.warmup))
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainState:
    model: DualBranchModel
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    step: int
    rng_state: dict
    curve: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, model: DualBranchModel, seed: int) -> "TrainState":
        zeros = {k: np.zeros_like(p.data) for k, p in model.params.items()}
        return cls(model, {k: z.copy() for k, z in zeros.items()},
                   {k: z.copy() for k, z in zeros.items()},
                   {k: p.data.copy() for k, p in model.params.items()},
                   0, np.random.default_rng(seed).bit_generator.state)

    def save(self, path: str | Path) -> None:
        arrays = {}
        for prefix, group in (("param", {k: p.data for k, p in self.model.params.items()}),
                              ("m", self.m), ("v", self.v), ("ema", self.ema)):
            for k, arr in group.items():
                arrays[f"{prefix}/{k}"] = arr
        meta = {"config": asdict(self.model.config), "step": self.step,
                "rng_state": self.rng_state, "curve": self.curve,
                "trained_steps": self.model.trained_steps, "model_meta": self.model.meta}
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "TrainState":
        with np.load(path) as npz:
            meta = json.loads(bytes(npz["meta"]).decode("utf-8"))
            groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "m": {}, "v": {}, "ema": {}}
            for key in npz.files:
                if key == "meta":
                    continue
                prefix, name = key.split("/", 1)
                groups[prefix][name] = npz[key].copy()
        config = ModelConfig(**meta["config"])
        model = DualBranchModel(config, {k: Tensor(a, requires_grad=True) for k, a in groups["param"].items()},
                                meta["trained_steps"], meta.get("model_meta", {}))
        return cls(model, groups["m"], groups["v"], groups["ema"], meta["step"],
                   meta["rng_state"], meta["curve"])


def adamw_update(state: TrainState, grads: dict[str, np.ndarray], cfg: TrainConfig,
                 names: list[str] | None = None) -> None:
    """One decoupled-weight-decay Adam step with global-norm clipping."""
    names = list(grads) if names is None else names
    norm = math.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in names))
    scale = 1.0 if cfg.grad_clip <= 0 or norm <= cfg.grad_clip else cfg.grad_clip / norm
    lr = cfg.lr_at(state.step)
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for k in names:
        g = grads[k] * scale
        state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g
        p = state.model.params[k]
        if lr == 0.0:
            continue
        update = (state.m[k] / bc1) / (np.sqrt(state.v[k] / bc2) + cfg.adam_eps)
        decay = cfg.weight_decay * p.data if p.ndim > 1 else 0.0
        new = p.data - lr * (update + decay)
        if not np.isfinite(new).all():
            raise TrainingDivergedError(f"parameter {k} became non-finite at step {state.step}")
        p.data = new
    for k in names:
        state.ema[k] = cfg.ema_decay * state.ema[k] + (1.0 - cfg.ema_decay) * state.model.params[k].data


def _batch(data, idx):
    x_exp, x_ges, aud = data
    return x_exp[idx], x_ges[idx], aud[idx]


def train(data, schedule: NoiseSchedule, cfg: TrainConfig,
          weights: LossWeights = LossWeights(), model: DualBranchModel | None = None,
          model_config: ModelConfig | None = None, state: TrainState | None = None,
          until: int | None = None, progress=None) -> TrainState:
    """Optimise the three-term loss on ``data = (x_exp, x_ges, audio)`` arrays.

    Pass ``state`` to resume; ``until`` stops early (for checkpointed runs)
    without changing the learning-rate schedule.
    """
    n = len(data[0])
    if n == 0:
        raise ContractError("training set is empty")
    if state is None:
        if model is None:
            model = DualBranchModel.init(model_config or ModelConfig(), seed=cfg.seed)
        state = TrainState.fresh(model, cfg.seed)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    stop = cfg.steps if until is None else min(until, cfg.steps)
    while state.step < stop:
        idx = rng.integers(0, n, size=cfg.batch_size)
        batch = _batch(data, idx)
        try:
            result = total_loss(batch, state.model, schedule, weights, rng=rng)
        except NumericalError as exc:
            last = state.curve[-1] if state.curve else {}
            raise TrainingDivergedError(f"loss diverged at step {state.step}: {exc}; last={last}") from exc
        bad = [k for k, v in result.parts.items() if not np.isfinite(v)]
        if bad:
            last = state.curve[-1] if state.curve else {}
            raise TrainingDivergedError(f"non-finite {bad} at step {state.step}; last={last}")
        adamw_update(state, result.grads, cfg)
        state.curve.append({"step": state.step, **result.parts})
        state.step += 1
        state.model.trained_steps += 1
        if progress is not None:
            progress(state)
        state.rng_state = rng.bit_generator.state
    state.rng_state = rng.bit_generator.state
    return state


def write_loss_curve(curve: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        writer.writeheader()
        for row in curve:
            writer.writerow({k: (repr(row[k]) if k != "step" else row[k]) for k in LOSS_COLUMNS})


def ema_curve(values, decay: float = 0.98) -> np.ndarray:
    out = np.empty(len(values))
    acc = values[0]
    for i, v in enumerate(values):
        acc = decay * acc + (1.0 - decay) * v if i else v
        out[i] = acc
    return out


# -- consistency heads --------------------------------------------------------------

@dataclass(frozen=True)
class ConsistencyConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 3e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    warmup: int = 20
    ema_decay: float = 0.999
    consistency_weight: float = 1.0
    mode: str = "direct"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("direct", "distill"):
            raise ConfigError(f"consistency mode must be 'direct' or 'distill', got {self.mode!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")

    def as_train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, grad_clip=self.grad_clip,
                           warmup=self.warmup, ema_decay=self.ema_decay, seed=self.seed)


def consistency_output(model: DualBranchModel, branch: str, xt: dict, t: dict, aud,
                       schedule: NoiseSchedule, param: ConsistencyParam):
    """f(x_t, t) for ``branch`` as a graph node (both branches run for fusion)."""
    pred_e, pred_g, _, _ = model.forward(xt["exp"], xt["ges"], t["exp"], t["ges"], aud)
    pred = pred_e if branch == "exp" else pred_g
    if model.config.prediction == "eps":
        pred = x0_from_eps(xt[branch], pred, t[branch], schedule)
    return consistency_apply(pred, Tensor(xt[branch]), t[branch], param, schedule.T)


def consistency_loss(head: DualBranchModel, branch: str, batch, schedule: NoiseSchedule,
                     param: ConsistencyParam, noise: dict, target: np.ndarray | None,
                     weight: float) -> Tensor:
    """Regression of f(x_t, t) onto x0 plus an optional self-consistency term."""
    clean = {"exp": np.asarray(batch[0], np.float64), "ges": np.asarray(batch[1], np.float64)}
    xt = {br: _noisy(clean[br], noise[f"t_{br}"], noise[f"eps_{br}"], schedule) for br in BRANCHES}
    t = {br: noise[f"t_{br}"] for br in BRANCHES}
    f = consistency_output(head, branch, xt, t, batch[2], schedule, param)
    loss = square(f - clean[branch]).mean()
    if target is not None and weight > 0:
        loss = loss + square(f - target).mean() * weight
    return loss


def train_consistency(teacher: DualBranchModel, branch: str, data, schedule: NoiseSchedule,
                      cfg: ConsistencyConfig = ConsistencyConfig(),
                      param: ConsistencyParam = ConsistencyParam()) -> DualBranchModel:
    """Fine-tune a copy of ``teacher`` into a consistency model for one branch.

    The head predicts x0 directly; only parameters of ``branch`` are updated,
    the counterpart branch keeps the teacher weights and only supplies
    features. The self-consistency target is the EMA head evaluated one
    timestep closer to the data, on the same noise (``direct``) or on the
    teacher's deterministic step (``distill``).
    """
    if branch not in BRANCHES:
        raise ConfigError(f"branch must be one of {BRANCHES}, got {branch!r}")
    if teacher.trained_steps == 0:
        warnings.warn("consistency training from an untrained teacher", RuntimeWarning, stacklevel=2)
    head = teacher.copy().with_config(prediction="x0")
    head.meta = {"consistency_branch": branch, "teacher_steps": teacher.trained_steps}
    tcfg = cfg.as_train_config()
    state = TrainState.fresh(head, cfg.seed)
    ema = head.copy()
    rng = np.random.default_rng(cfg.seed)
    names = head.branch_params(branch)
    other = "ges" if branch == "exp" else "exp"
    n = len(data[0])
    lo = param.eps_min + 1

    for _ in range(cfg.steps):
        idx = rng.integers(0, n, size=cfg.batch_size)
        batch = _batch(data, idx)
        B = len(idx)
        noise = {
            f"t_{branch}": rng.integers(lo, schedule.T + 1, size=B),
            f"t_{other}": rng.integers(1, schedule.T + 1, size=B),
            "eps_exp": rng.standard_normal(batch[0].shape),
            "eps_ges": rng.standard_normal(batch[1].shape),
        }
        target = None
        if cfg.consistency_weight > 0:
            with no_grad():
                t_prev = noise[f"t_{branch}"] - 1
                clean = {"exp": batch[0], "ges": batch[1]}
                xt = {br: _noisy(clean[br], noise[f"t_{br}"], noise[f"eps_{br}"], schedule) for br in BRANCHES}
                if cfg.mode == "distill":
                    xt_prev = dict(xt)
                    pe, pg, _, _ = teacher.forward(xt["exp"], xt["ges"], noise["t_exp"], noise["t_ges"], batch[2])
                    eps_hat = (pe if branch == "exp" else pg).data
                    ab = schedule.abar_array(noise[f"t_{branch}"]).reshape(-1, 1, 1)
                    ab_prev = schedule.abar_array(t_prev).reshape(-1, 1, 1)
                    x0_hat = (xt[branch] - np.sqrt(1 - ab) * eps_hat) / np.sqrt(ab)
                    xt_prev[branch] = np.sqrt(ab_prev) * x0_hat + np.sqrt(1 - ab_prev) * eps_hat
                else:
                    xt_prev = dict(xt)
                    xt_prev[branch] = _noisy(clean[branch], t_prev, noise[f"eps_{branch}"], schedule)
                t_map = {branch: t_prev, other: noise[f"t_{other}"]}
                target = consistency_output(ema, branch, xt_prev, t_map, batch[2], schedule, param).data
        with Graph() as g:
            loss = consistency_loss(head, branch, batch, schedule, param, noise, target,
                                    cfg.consistency_weight)
            grads = g.backward(loss, [head.params[k] for k in names])
        adamw_update(state, dict(zip(names, grads)), tcfg, names)
        for k in names:
            ema.params[k] = Tensor(state.ema[k])
        state.curve.append({"step": state.step, "loss": loss.item()})
        state.step += 1
    head.trained_steps = teacher.trained_steps + cfg.steps
    head.meta["curve"] = [row["loss"] for row in state.curve]
    return head
