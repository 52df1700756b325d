import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_grad
from tilt_matching.interpolant import make_linear_schedule
from tilt_matching.oracle import ExactConditional, GaussianProblem, covariance_rhs_mc, esscher_velocity_mc
from tilt_matching.targets import linear_reward
from tilt_matching.velocity import (
    Adam, AnalyticGaussianVelocity, GradientReport, GridExtrapolationWarning, GridVelocity,
    MlpVelocity, NonFiniteGradientWarning, analytic_gaussian_tilted, checkpoint_bytes,
    load_checkpoint, model_from_bytes, save_checkpoint, train_step,
)

LIN = make_linear_schedule()


def _standard_field():
    return AnalyticGaussianVelocity([0.0], [[1.0]], [0.0], [[1.0]], LIN)


def _tilted_closed_form(t, x, a):
    al, be = 1 - t, t
    return (-al + be) * (x - be * a) / (al ** 2 + be ** 2) + a


def _backends(rng):
    return {
        "analytic": AnalyticGaussianVelocity([0.1, -0.2], [[1.0, 0.2], [0.2, 0.8]], [0.5, 0.3],
                                             [[1.5, 0.4], [0.4, 0.9]], LIN),
        "grid1d": GridVelocity(1, 4, 4, -2.0, 2.0, rng.normal(size=16)),
        "grid2d": GridVelocity(2, 3, (3, 4), [-2, -1], [2, 1], rng.normal(size=72)),
        "mlp_tanh": MlpVelocity(2, hidden=(5, 4), seed=3),
        "mlp_silu": MlpVelocity(1, hidden=(6,), activation="silu", seed=4),
    }


# Analytic backend


def test_standard_field_closed_form():
    t = np.linspace(0.05, 0.95, 19)
    x = np.linspace(-3, 3, 19)[:, None]
    expected = x[:, 0] * (2 * t - 1) / ((1 - t) ** 2 + t ** 2)
    np.testing.assert_allclose(_standard_field()(t, x)[:, 0], expected, atol=1e-14)


@pytest.mark.parametrize("a", [0.0, 0.5, 1.0])
def test_tilted_field_closed_form(a):
    field = analytic_gaussian_tilted([0.0], [[1.0]], [0.0], [[1.0]], LIN, a, linear_reward([1.0]))
    t = np.linspace(0.05, 0.999, 25)
    x = np.linspace(-3, 3, 25)[:, None]
    np.testing.assert_allclose(field(t, x)[:, 0], _tilted_closed_form(t, x[:, 0], a), atol=1e-13)


def test_tilted_zero_tilt_is_untilted():
    f0 = analytic_gaussian_tilted([0.0], [[1.0]], [0.4], [[2.0]], LIN, 0.0, linear_reward([1.0]))
    f = AnalyticGaussianVelocity([0.0], [[1.0]], [0.4], [[2.0]], LIN)
    np.testing.assert_array_equal(f0.params, f.params)


def test_tilted_field_matches_esscher_mc(rng):
    problem = GaussianProblem([0.0], [[1.0]], [0.0], [[1.0]], linear_reward([1.0]))
    field = analytic_gaussian_tilted([0.0], [[1.0]], [0.0], [[1.0]], LIN, 1.0, linear_reward([1.0]))
    src = ExactConditional(problem, 0.0)
    for t in np.linspace(0.1, 0.9, 4):
        for x in np.linspace(-1.5, 1.5, 5):
            est = esscher_velocity_mc(src, problem.reward, t, [x], 1.0, 20_000, rng)
            assert abs(est.z_score(field.eval(t, [x]))[0]) < 4.0


def test_tilted_field_near_one_matches_mc(rng):
    problem = GaussianProblem([0.0], [[1.0]], [0.0], [[1.0]], linear_reward([1.0]))
    field = analytic_gaussian_tilted([0.0], [[1.0]], [0.0], [[1.0]], LIN, 1.0, linear_reward([1.0]))
    t, x = 0.999, 0.7
    est = esscher_velocity_mc(ExactConditional(problem, 1.0), problem.reward, t, [x], 0.0, 100_000, rng)
    assert abs(est.z_score(field.eval(t, [x]))[0]) < 3.0
    # the closed form tends to (x - a) + a = x as t -> 1
    assert field.eval(t, [x])[0] == pytest.approx(_tilted_closed_form(t, x, 1.0), abs=1e-13)
    assert field.eval(t, [x])[0] == pytest.approx(x, abs=5e-3)


def test_covariance_ode_at_probe_points(rng):
    problem = GaussianProblem([0.0], [[1.0]], [0.3], [[1.5]], linear_reward([0.8]))
    step = 1e-3
    for _ in range(10):
        t, x, a = rng.uniform(0.1, 0.9), rng.uniform(-1.5, 1.5), rng.uniform(0.0, 1.0)
        f = lambda aa: analytic_gaussian_tilted([0.0], [[1.0]], [0.3], [[1.5]], LIN, aa, problem.reward)
        fd = (f(a + step).eval(t, [x]) - f(a - step).eval(t, [x])) / (2 * step)
        est = covariance_rhs_mc(ExactConditional(problem, a), problem.reward, t, [x], 50_000, rng)
        assert abs(est.z_score(fd)[0]) < 3.5


# Grid backend


def test_grid_constant_field():
    g = GridVelocity(2, 4, 5, -1.0, 1.0, np.tile([0.3, -0.7], 4 * 5 * 5))
    x = np.random.default_rng(0).uniform(-1, 1, size=(50, 2))
    np.testing.assert_allclose(g(np.linspace(0, 1, 50), x), np.tile([0.3, -0.7], (50, 1)), atol=1e-15)


def test_grid_interpolates_linear_function_exactly():
    fn = lambda t, x: (2 * t + 3 * x[:, 0])[:, None]
    g = GridVelocity.from_function(fn, 1, 5, 9, -2.0, 2.0)
    t = np.random.default_rng(1).uniform(0, 1, 40)
    x = np.random.default_rng(2).uniform(-2, 2, (40, 1))
    np.testing.assert_allclose(g(t, x), fn(t, x), atol=1e-12)


def test_grid_extrapolation_clamps_and_warns():
    g = GridVelocity.from_function(lambda t, x: x.copy(), 1, 3, 5, -1.0, 1.0)
    with pytest.warns(GridExtrapolationWarning):
        out = g(np.array([0.5]), np.array([[3.0]]))
    assert out[0, 0] == pytest.approx(1.0)
    _, clamped = g.forward_with_flags(np.array([0.5, 0.5]), np.array([[0.0], [-5.0]]))
    assert list(clamped) == [False, True]


def test_grid_rejects_bad_shapes():
    with pytest.raises(ValueError):
        GridVelocity(3, 2, 2, 0, 1)
    with pytest.raises(ValueError):
        GridVelocity(1, 2, 2, 0, 1, np.zeros(5))


# Shared contract


@pytest.mark.parametrize("name", ["analytic", "grid1d", "grid2d", "mlp_tanh", "mlp_silu"])
def test_pullback_matches_finite_differences(name, rng):
    model = _backends(rng)[name]
    n = 7
    t = rng.uniform(0.05, 0.95, n)
    lo = -0.9 if "grid" in name else -2.0
    x = rng.uniform(lo, -lo, (n, model.dim))
    cot = rng.normal(size=(n, model.out_dim))
    _, pullback = model.forward_with_pullback(t, x)
    grad = pullback(cot)
    base = model.snapshot()

    def loss(p):
        model.restore(p)
        return float(np.sum(cot * model(t, x)))

    fd = fd_grad(loss, base)
    model.restore(base)
    scale = max(np.max(np.abs(fd)), 1e-8)
    assert np.max(np.abs(grad - fd)) / scale < 1e-4


@pytest.mark.parametrize("name", ["analytic", "grid2d", "mlp_tanh"])
def test_per_sample_grads_sum_to_pullback(name, rng):
    model = _backends(rng)[name]
    t, x = rng.uniform(0.1, 0.9, 5), rng.uniform(-0.9, 0.9, (5, model.dim))
    cot = rng.normal(size=(5, model.out_dim))
    rows = model.per_sample_grads(t, x, cot)
    np.testing.assert_allclose(rows.sum(axis=0), model.forward_with_pullback(t, x)[1](cot), atol=1e-12)


@pytest.mark.parametrize("name", ["analytic", "grid1d", "mlp_tanh"])
def test_batched_equals_single_calls(name, rng):
    model = _backends(rng)[name]
    t, x = rng.uniform(0.1, 0.9, 6), rng.uniform(-0.9, 0.9, (6, model.dim))
    batched = model(t, x)
    singles = np.array([model.eval(t[i], x[i]) for i in range(6)])
    np.testing.assert_allclose(batched, singles, rtol=0, atol=1e-14)


@pytest.mark.parametrize("name", ["analytic", "grid2d", "mlp_silu"])
def test_snapshot_restore_roundtrip(name, rng):
    model = _backends(rng)[name]
    t, x = rng.uniform(0.1, 0.9, 4), rng.uniform(-0.9, 0.9, (4, model.dim))
    before, snap = model(t, x), model.snapshot()
    model.params += rng.normal(size=model.n_params) * 0.1
    model.restore(snap)
    np.testing.assert_array_equal(model.params, snap)
    np.testing.assert_array_equal(model(t, x), before)


def test_copy_is_independent(rng):
    m = MlpVelocity(1, hidden=(4,), seed=0)
    c = m.copy()
    c.params += 1.0
    assert not np.array_equal(m.params, c.params)


def test_mlp_is_pure_function_of_inputs(rng):
    a, b = MlpVelocity(2, seed=7), MlpVelocity(2, seed=7)
    t, x = rng.uniform(size=10), rng.normal(size=(10, 2))
    np.testing.assert_array_equal(a(t, x), b(t, x))
    np.testing.assert_array_equal(a(t, x), a(t, x))
    assert a.n_params == (5 * 64 + 64) + 2 * (64 * 64 + 64) + (64 * 2 + 2)


def test_mlp_finite_on_training_domain(rng):
    m = MlpVelocity(3, seed=1)
    assert np.all(np.isfinite(m(rng.uniform(1e-4, 1 - 1e-4, 100), rng.normal(scale=10, size=(100, 3)))))


@pytest.mark.parametrize("name", ["analytic", "grid2d", "mlp_tanh", "mlp_silu"])
def test_checkpoint_roundtrip(name, rng, tmp_path):
    model = _backends(rng)[name]
    path = tmp_path / "m.tmck"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert type(back) is type(model)
    np.testing.assert_array_equal(back.params, model.params)
    t, x = rng.uniform(0.1, 0.9, 4), rng.uniform(-0.9, 0.9, (4, model.dim))
    np.testing.assert_array_equal(back(t, x), model(t, x))
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_header_layout():
    data = checkpoint_bytes(MlpVelocity(1, hidden=(3,), seed=0))
    assert data[:4] == b"TMCK"
    assert np.frombuffer(data[4:20], dtype="<u4").tolist() == [1, 2, 1, 1]
    with pytest.raises(ValueError):
        model_from_bytes(b"XXXX" + data[4:])


# Optimiser


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0, 3.0])
    opt = Adam()
    for _ in range(5):
        opt.update(p, np.zeros(3))
    np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])


def test_adam_deterministic_trajectories(rng):
    grads = rng.normal(size=(20, 4))
    runs = []
    for _ in range(2):
        p, opt = np.zeros(4), Adam(lr=0.01)
        for g in grads:
            opt.update(p, g)
        runs.append(p.copy())
    np.testing.assert_array_equal(*runs)


def test_adam_quadratic_bowl():
    target = np.array([1.0, -0.5, 2.0, 0.25])
    p, opt = np.zeros(4), Adam(lr=0.05)
    for k in range(500):
        opt.lr = 0.05 * (1 - k / 500) + 1e-4
        opt.update(p, 2 * (p - target))
    assert np.linalg.norm(p - target) < 1e-3


def test_adam_skips_non_finite_gradient():
    p, opt = np.ones(2), Adam()
    with pytest.warns(NonFiniteGradientWarning):
        assert opt.update(p, np.array([np.nan, 1.0])) is False
    np.testing.assert_array_equal(p, [1.0, 1.0])
    assert opt.nan_skips == 1 and opt.step_count == 0


def test_adam_state_dict_roundtrip(rng):
    p, opt = np.zeros(3), Adam(lr=0.01)
    for _ in range(3):
        opt.update(p, rng.normal(size=3))
    clone, q = Adam.from_state_dict(opt.state_dict()), p.copy()
    g = rng.normal(size=3)
    opt.update(p, g)
    clone.update(q, g)
    np.testing.assert_array_equal(p, q)


def test_train_step_applies_update():
    m = MlpVelocity(1, hidden=(2,), seed=0)
    before = m.snapshot()
    train_step(m, GradientReport(0.0, np.ones(m.n_params)), Adam(lr=0.1))
    np.testing.assert_allclose(m.params, before - 0.1, atol=1e-6)
