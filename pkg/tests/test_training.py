import csv

import numpy as np
import pytest

from dualsync.data import SynthConfig, generate_dataset
from dualsync.errors import ConfigError, ContractError
from dualsync.model import DualBranchModel, ModelConfig
from dualsync.numerics import Graph, Tensor
from dualsync.numerics.gradcheck import central_difference, relative_error
from dualsync.training import (LOSS_COLUMNS, ConsistencyConfig, LossWeights, TrainConfig, TrainState,
                               TrainingDivergedError, consistency_loss, draw_noise, loss_huber, loss_noise,
                               loss_terms, loss_velocity, total_loss, train, train_consistency,
                               write_loss_curve)
from dualsync.diffusion import ConsistencyParam


def _toy_data(cfg, n=6, seed=0):
    ds = generate_dataset(SynthConfig(n_clips=n, n_frames=cfg.n_frames, joints=cfg.joints,
                                      expr_dim=cfg.expr_dim, audio_dim=cfg.audio_dim, seed=seed))
    return ds.arrays()


def test_loss_noise_examples(rng):
    e = rng.standard_normal((3, 4))
    assert loss_noise(e, e).item() == 0.0
    assert loss_noise(np.zeros((2, 2)), np.ones((2, 2))).item() == 1.0
    a, b = rng.standard_normal((5, 6)), rng.standard_normal((5, 6))
    brute = sum((a[i, j] - b[i, j]) ** 2 for i in range(5) for j in range(6)) / 30
    assert loss_noise(a, b).item() == pytest.approx(brute, abs=1e-12)


def test_loss_velocity_examples(rng):
    x = rng.standard_normal((2, 5, 3))
    assert loss_velocity(x, x + 4.2).item() == pytest.approx(0.0, abs=1e-25)
    assert loss_velocity(np.array([[0.0], [1.0], [2.0]]), np.array([[0.0], [2.0], [4.0]])).item() == 1.0
    y = rng.standard_normal((2, 5, 3))
    brute = np.mean([((x[b, f + 1, c] - x[b, f, c]) - (y[b, f + 1, c] - y[b, f, c])) ** 2
                     for b in range(2) for f in range(4) for c in range(3)])
    assert loss_velocity(x, y).item() == pytest.approx(brute, abs=1e-12)
    with pytest.raises(ContractError):
        loss_velocity(np.zeros((1, 3)), np.zeros((1, 3)))


def test_loss_velocity_shift_invariance(rng):
    x, y = rng.standard_normal((2, 6, 3)), rng.standard_normal((2, 6, 3))
    c = rng.standard_normal((2, 1, 3))
    assert loss_velocity(x + c, y + c).item() == pytest.approx(loss_velocity(x, y).item(), abs=1e-12)


def test_loss_huber_examples():
    d = 0.5
    assert loss_huber(np.zeros(3), np.zeros(3), d).item() == 0.0
    assert loss_huber(np.array([d]), np.zeros(1), d).item() == pytest.approx(d * d / 2)
    assert loss_huber(np.array([3 * d]), np.zeros(1), d).item() == pytest.approx(2.5 * d * d)


def test_loss_weights_validation():
    assert LossWeights() == LossWeights(10.0, 1.0, 1.0, 1.0)
    with pytest.raises(ConfigError):
        LossWeights(delta=0.0)
    with pytest.raises(ConfigError):
        LossWeights(lambda_t=-1.0)


def test_zero_weights_give_zero_loss_and_gradients(toy_config, schedule):
    m = DualBranchModel.init(toy_config, 0, zero_init=False)
    data = _toy_data(toy_config)
    res = total_loss(data, m, schedule, LossWeights(0, 0, 0), rng=np.random.default_rng(0))
    assert res.loss == 0.0
    assert all(not g.any() for g in res.grads.values())


def test_initial_loss_is_finite_and_positive(schedule):
    cfg = ModelConfig()
    m = DualBranchModel.init(cfg, 0)
    data = _toy_data(cfg, n=4)
    res = total_loss(data, m, schedule, rng=np.random.default_rng(0))
    assert np.isfinite(res.loss) and res.loss > 0
    assert set(res.parts) == set(LOSS_COLUMNS) - {"step"}


@pytest.mark.parametrize("fusion", ["cosync", "gated"])
def test_total_loss_gradient_spot_check(toy_config, schedule, fusion):
    cfg = ModelConfig(**{**toy_config.__dict__, "fusion": fusion})
    m = DualBranchModel.init(cfg, 4, zero_init=False)
    data = _toy_data(cfg, n=2)
    noise = draw_noise(data, schedule, np.random.default_rng(3))
    noise["t_exp"] = np.array([40, 300])
    noise["t_ges"] = np.array([120, 15])
    res = total_loss(data, m, schedule, LossWeights(), noise=noise)
    f = lambda: loss_terms(data, m, schedule, LossWeights(), noise)[0].item()
    r = np.random.default_rng(0)
    for name in ("exp.l0.sync.wq", "ges.l1.mlp.w1", "exp.in.w", "ges.temb.w2", "exp.l1.ada.w"):
        if name not in m.params:
            continue
        arr = m.params[name].data
        idx = tuple(r.integers(0, s) for s in arr.shape)
        fd = central_difference(f, arr, idx)
        assert relative_error(fd, res.grads[name][idx]) <= 1e-4


def test_x0_prediction_models_are_rejected(toy_config, schedule):
    m = DualBranchModel.init(toy_config, 0).with_config(prediction="x0")
    with pytest.raises(ContractError):
        total_loss(_toy_data(toy_config), m, schedule, rng=np.random.default_rng(0))


def test_zero_learning_rate_keeps_parameters(toy_config, schedule):
    data = _toy_data(toy_config)
    m = DualBranchModel.init(toy_config, 0, zero_init=False)
    before = {k: v.data.copy() for k, v in m.params.items()}
    state = train(data, schedule, TrainConfig(steps=3, batch_size=2, lr=0.0, warmup=0), model=m)
    assert all(np.array_equal(before[k], state.model.params[k].data) for k in before)


def test_training_is_reproducible(toy_config, schedule):
    data = _toy_data(toy_config)
    cfg = TrainConfig(steps=4, batch_size=2, warmup=1)
    a = train(data, schedule, cfg, model_config=toy_config)
    b = train(data, schedule, cfg, model_config=toy_config)
    assert all(np.array_equal(a.model.params[k].data, b.model.params[k].data) for k in a.model.params)


def test_resume_matches_uninterrupted_run(tmp_path, toy_config, schedule):
    data = _toy_data(toy_config)
    cfg = TrainConfig(steps=6, batch_size=2, warmup=2)
    full = train(data, schedule, cfg, model_config=toy_config)
    half = train(data, schedule, cfg, model_config=toy_config, until=3)
    half.save(tmp_path / "state.npz")
    resumed = train(data, schedule, cfg, state=TrainState.load(tmp_path / "state.npz"))
    assert resumed.step == full.step == 6
    for k in full.model.params:
        assert full.model.params[k].data.tobytes() == resumed.model.params[k].data.tobytes()
        assert full.ema[k].tobytes() == resumed.ema[k].tobytes()
    assert [r["total"] for r in full.curve] == [r["total"] for r in resumed.curve]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_diagnostic(toy_config, schedule):
    data = list(_toy_data(toy_config))
    data[0] = data[0] * 1e200                    # squares overflow
    with pytest.raises(TrainingDivergedError, match="step 0"):
        train(tuple(data), schedule, TrainConfig(steps=2, batch_size=2), model_config=toy_config)


def test_empty_dataset_rejected(toy_config, schedule):
    empty = (np.zeros((0, 8, 3)), np.zeros((0, 8, 6)), np.zeros((0, 8, 4)))
    with pytest.raises(ContractError):
        train(empty, schedule, TrainConfig(steps=1), model_config=toy_config)


def test_loss_curve_csv(tmp_path, toy_config, schedule):
    state = train(_toy_data(toy_config), schedule, TrainConfig(steps=2, batch_size=2), model_config=toy_config)
    write_loss_curve(state.curve, tmp_path / "loss.csv")
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == LOSS_COLUMNS and len(rows) == 3


def test_cosine_schedule():
    cfg = TrainConfig(steps=100, lr=1.0, warmup=10)
    assert cfg.lr_at(0) == pytest.approx(0.1)
    assert cfg.lr_at(10) == pytest.approx(1.0)
    assert cfg.lr_at(100) == pytest.approx(0.0, abs=1e-15)
    lrs = [cfg.lr_at(s) for s in range(10, 101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_consistency_objective_ignores_parameters_at_boundary(toy_config, schedule):
    head = DualBranchModel.init(toy_config, 0, zero_init=False).with_config(prediction="x0")
    data = _toy_data(toy_config, n=2)
    noise = draw_noise(data, schedule, np.random.default_rng(1))
    noise["t_exp"] = np.array([1, 1])
    names = head.branch_params("exp")
    with Graph() as g:
        loss = consistency_loss(head, "exp", data, schedule, ConsistencyParam(), noise, None, 1.0)
        grads = g.backward(loss, [head.params[k] for k in names])
    assert all(not gr.any() for gr in grads)


def test_untrained_teacher_warns_and_only_branch_changes(toy_config, schedule):
    teacher = DualBranchModel.init(toy_config, 0, zero_init=False)
    data = _toy_data(toy_config)
    with pytest.warns(RuntimeWarning, match="untrained"):
        head = train_consistency(teacher, "ges", data, schedule, ConsistencyConfig(steps=2, batch_size=2))
    assert head.config.prediction == "x0"
    for k in teacher.params:
        same = np.array_equal(teacher.params[k].data, head.params[k].data)
        assert same == (not k.startswith("ges."))
    with pytest.raises(ConfigError):
        train_consistency(teacher, "face", data, schedule)


def test_distill_mode_runs(toy_config, schedule):
    teacher = DualBranchModel.init(toy_config, 0, zero_init=False)
    teacher.trained_steps = 1
    head = train_consistency(teacher, "exp", _toy_data(toy_config), schedule,
                             ConsistencyConfig(steps=2, batch_size=2, mode="distill"))
    assert np.isfinite(head.meta["curve"]).all()


@pytest.mark.parametrize("delta", [0.3, 1.0, 2.5])
def test_huber_continuous_at_knee(delta):
    from dualsync.numerics import Graph, Tensor, huber
    vals, grads = [], []
    for e in (delta - 1e-9, delta + 1e-9, -delta - 1e-9, -delta + 1e-9):
        x = Tensor(np.array([e]), requires_grad=True)
        with Graph() as g:
            out = huber(x, delta).sum()
            grads.append(g.backward(out, [x])[0][0])
        vals.append(out.item())
    assert vals[0] == pytest.approx(vals[1], abs=1e-8) and vals[2] == pytest.approx(vals[3], abs=1e-8)
    assert grads[0] == pytest.approx(grads[1], abs=1e-8) and grads[2] == pytest.approx(grads[3], abs=1e-8)
    assert grads[1] == pytest.approx(delta)
