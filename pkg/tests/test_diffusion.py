import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualsync.diffusion import (ConsistencyParam, consistency_apply, ddim_step, ddim_timesteps, ddpm_step,
                                forward_sample, lcm_timesteps, make_schedule, predict_x0)
from dualsync.errors import ConfigError, ContractError, DimensionError
from dualsync.numerics import Graph, Tensor, tsum


def test_default_schedule_terminal_alpha_bar(schedule):
    # independent product oracle
    prod = 1.0
    for b in np.linspace(1e-4, 2e-2, 1000):
        prod *= 1.0 - float(b)
    assert schedule.alpha_bar[-1] == pytest.approx(prod, rel=1e-10)
    assert schedule.alpha_bar[-1] == pytest.approx(4.0e-5, rel=0.02)


def test_two_step_schedule():
    s = make_schedule(2, 0.1, 0.1)
    assert np.allclose(s.alpha_bar, [0.9, 0.81], atol=1e-15)
    assert s.sigma[0] == 0.0


@pytest.mark.parametrize("bounds", [(0.2, 0.1), (0.0, 0.1), (0.1, 1.0)])
def test_schedule_rejects_bad_bounds(bounds):
    with pytest.raises(ConfigError):
        make_schedule(10, *bounds)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 400), st.floats(1e-5, 0.05), st.floats(0.0, 0.5))
def test_schedule_invariants(T, b0, span):
    b1 = min(b0 + span, 0.9)
    s = make_schedule(T, b0, b1)
    assert np.all(np.diff(s.beta) >= 0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] < s.alpha_bar[0] < 1
    assert s.sigma[0] == 0.0
    prev = np.concatenate([[1.0], s.alpha_bar[:-1]])
    assert np.allclose(s.sigma[1:] ** 2, (s.beta * (1 - prev) / (1 - s.alpha_bar))[1:], rtol=1e-12)


def test_schedule_csv(tmp_path, schedule):
    path = tmp_path / "s.csv"
    schedule.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "beta", "alpha", "alpha_bar", "sigma"]
    assert len(rows) == 1001
    assert float(rows[-1][3]) == schedule.alpha_bar[-1]


def test_forward_sample_examples(schedule, rng):
    x0 = rng.standard_normal((4, 3))
    assert np.array_equal(forward_sample(x0, 10, np.zeros_like(x0), schedule),
                          math.sqrt(schedule.abar(10)) * x0)
    with pytest.raises(ContractError):
        forward_sample(x0, 0, x0, schedule)
    with pytest.raises(ContractError):
        forward_sample(x0, 1001, x0, schedule)
    with pytest.raises(DimensionError):
        forward_sample(x0, 5, np.zeros(3), schedule)


def test_forward_sample_terminal_correlation(schedule, rng):
    x0 = rng.standard_normal(20000)
    xt = forward_sample(x0, schedule.T, rng.standard_normal(20000), schedule)
    assert abs(np.corrcoef(x0, xt)[0, 1]) <= 0.03   # sqrt(abar_T) ~ 0.006 plus sampling error


def test_ddpm_step_examples(schedule, rng):
    x = rng.standard_normal(5)
    z = rng.standard_normal(5)
    assert np.array_equal(ddpm_step(x, 1, x * 0.3, schedule, z), ddpm_step(x, 1, x * 0.3, schedule, 0 * z))
    assert np.array_equal(ddpm_step(np.zeros(3), 50, np.zeros(3), schedule, np.zeros(3)), np.zeros(3))
    with pytest.raises(DimensionError):
        ddpm_step(x, 3, x, schedule, np.zeros(4))


@pytest.mark.parametrize("T", [2, 10, 64])
def test_ddpm_round_trip_with_oracle_noise(T, rng):
    s = make_schedule(T, 1e-4, 0.2)
    x0 = rng.standard_normal(6)
    eps = rng.standard_normal(6)
    x = forward_sample(x0, T, eps, s)
    for t in range(T, 0, -1):
        # noise that x_t carries relative to x0 on the zero-variance chain
        ab = s.abar(t)
        eps_t = (x - math.sqrt(ab) * x0) / math.sqrt(1 - ab)
        x = ddpm_step(x, t, eps_t, s, np.zeros(6))
    assert np.abs(x - x0).max() <= 1e-8


def test_ddim_examples(schedule, rng):
    x0, eps = rng.standard_normal(8), rng.standard_normal(8)
    xt = forward_sample(x0, 700, eps, schedule)
    assert np.array_equal(ddim_step(xt, 700, 700, eps, schedule), xt)
    assert np.abs(ddim_step(xt, 700, 0, eps, schedule) - x0).max() <= 1e-10
    assert np.array_equal(ddim_step(xt, 700, 300, eps, schedule), ddim_step(xt, 700, 300, eps, schedule))
    with pytest.raises(ContractError):
        ddim_step(xt, 300, 700, eps, schedule)


def test_ddim_25_steps_finite(schedule, rng):
    ts = ddim_timesteps(schedule, 25)
    assert len(ts) == 25 and ts[0] == 1000 and ts[-1] == 40
    x = rng.standard_normal(10)
    for i, t in enumerate(ts):
        x = ddim_step(x, t, ts[i + 1] if i + 1 < len(ts) else 0, rng.standard_normal(10), schedule)
    assert np.isfinite(x).all()


def test_predict_x0_inverts_forward(schedule, rng):
    x0, eps = rng.standard_normal((3, 4, 2)), rng.standard_normal((3, 4, 2))
    t = np.array([1, 500, 1000])
    xt = np.stack([forward_sample(x0[i], t[i], eps[i], schedule) for i in range(3)])
    assert np.allclose(predict_x0(xt, t, eps, schedule), x0, atol=1e-9)


def test_consistency_boundary_and_closed_form(rng):
    p = ConsistencyParam()
    assert p.c_skip(p.eps_min) == 1.0 and p.c_out(p.eps_min) == 0.0
    xt, out = rng.standard_normal(5), rng.standard_normal(5)
    assert np.array_equal(consistency_apply(out, xt, 1, p), xt)
    # independent recomputation of the coefficients
    for t in (2, 17, 400, 1000):
        u = 10.0 * (t - 1)
        cs, co = 0.25 / (u * u + 0.25), u / math.sqrt(u * u + 0.25)
        assert np.allclose(consistency_apply(out, xt, t, p, 1000), cs * xt + co * out, atol=1e-15)
    far = ConsistencyParam(sigma_data=1e-9)
    assert np.allclose(consistency_apply(out, xt, 1000, far), out, atol=1e-12)
    with pytest.raises(ContractError):
        consistency_apply(out, xt, 0, p)


def test_consistency_apply_on_tensors_is_differentiable(rng):
    out = Tensor(rng.standard_normal((2, 3, 1)), requires_grad=True)
    xt = rng.standard_normal((2, 3, 1))
    t = np.array([1, 100])
    with Graph() as g:
        (grad,) = g.backward(tsum(consistency_apply(out, xt, t, ConsistencyParam())), [out])
    assert np.all(grad[0] == 0.0)                    # c_out(eps_min) = 0
    assert np.allclose(grad[1], ConsistencyParam().c_out(100))


def test_lcm_timesteps(schedule):
    assert lcm_timesteps(schedule, 1) == [1000]
    for k in (2, 4, 8, 25):
        ts = lcm_timesteps(schedule, k)
        assert len(ts) == k and ts[0] == 1000 and ts[-1] == 1
        assert all(a > b for a, b in zip(ts, ts[1:]))
    # uniform in alpha_bar: interior points sit near the evenly spaced targets
    ts = lcm_timesteps(schedule, 4)
    targets = np.linspace(schedule.abar(1000), schedule.abar(1), 4)
    for t, target in zip(ts, targets):
        assert abs(schedule.abar(t) - target) < 2e-3
    with pytest.raises(ConfigError):
        lcm_timesteps(schedule, 0)
