import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from tilt_matching.anneal import (
    ANNEAL_LOSSES, AdaptiveConfig, AnnealAbort, AnnealConfig, AnnealState, TiltProblem, adapt_step,
    config_dict, distill_velocity, pretrain_flow_matching, run_anneal, substream,
)
from tilt_matching.interpolant import make_linear_schedule
from tilt_matching.sampler import integrate_ode
from tilt_matching.targets import circle_gmm, gaussian_target, linear_reward, standard_normal, temperature_path, zero_reward
from tilt_matching.velocity import AnalyticGaussianVelocity, GridVelocity, MlpVelocity

LIN = make_linear_schedule()


def gaussian_problem(reward=None):
    return TiltProblem(standard_normal(1), standard_normal(1), reward or linear_reward([1.0]), LIN)


def small_config(**kw):
    base = dict(fixed_h=0.5, epochs_per_level=5, batch_size=64, buffer_size=128, ess_samples=128,
                ode_steps=10, seed=3)
    base.update(kw)
    return AnnealConfig(**base)


def base_field():
    return AnalyticGaussianVelocity([0.0], [[1.0]], [0.0], [[1.0]], LIN)


# Configuration


@pytest.mark.parametrize("levels", [[0.1, 1.0], [0.0, 0.5], [0.0, 0.6, 0.4, 1.0], [0.0]])
def test_invalid_levels_rejected(levels):
    with pytest.raises(ValueError):
        AnnealConfig(levels=levels)


@pytest.mark.parametrize("kw", [dict(), dict(fixed_h=0.0), dict(fixed_h=0.1, loss="FM"),
                                dict(fixed_h=0.1, batch_size=0), dict(fixed_h=0.1, integrator="rk4"),
                                dict(fixed_h=0.1, refresh_policy="sometimes")])
def test_invalid_config_rejected(kw):
    with pytest.raises(ValueError):
        AnnealConfig(**kw)


def test_config_dict_roundtrip():
    cfg = small_config(adaptive=AdaptiveConfig())
    d = config_dict(cfg)
    assert d["fixed_h"] == 0.5 and d["adaptive"]["ess_floor"] == 0.3


def test_substreams_are_independent_and_reproducible():
    a = substream(0, "buffer", 1).normal(size=3)
    np.testing.assert_array_equal(a, substream(0, "buffer", 1).normal(size=3))
    assert not np.array_equal(a, substream(0, "buffer", 2).normal(size=3))
    assert not np.array_equal(a, substream(0, "train", 1).normal(size=3))


# adapt_step


def test_adapt_step_rules():
    ad = AdaptiveConfig(ess_floor=0.3, h_max=0.1)
    assert adapt_step([], 0.04, 0.3, ad) == 0.04
    assert adapt_step([], 0.04, 0.01, ad) == 0.02
    assert adapt_step([], 0.04, 0.9, ad) == pytest.approx(0.05)
    assert adapt_step([], 0.09, 0.9, ad) == 0.1
    assert adapt_step([], 0.04, 0.5, ad) == 0.04
    assert adapt_step([], 1e-6, 0.0, ad) == 1e-6


def test_adapt_step_recovering_run_keeps_h():
    ad = AdaptiveConfig(ess_floor=0.3)
    assert adapt_step([{"ess": 0.1}], 0.04, 0.2, ad) == 0.04
    assert adapt_step([{"ess": 0.25}], 0.04, 0.2, ad) == 0.02


@settings(max_examples=60)
@given(ess=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30), h0=st.floats(1e-4, 0.1))
def test_monotone_ess_gives_non_decreasing_h(ess, h0):
    ad = AdaptiveConfig()
    trace, h, hs = [], h0, []
    for e in sorted(set(ess)):
        h_new = adapt_step(trace, h, e, ad)
        hs.append(h_new)
        trace.append({"ess": e})
        h = h_new
    assert all(b >= a for a, b in zip(hs, hs[1:]))


@settings(max_examples=60)
@given(trace_ess=st.lists(st.floats(0.0, 1.0), max_size=5), h=st.floats(1e-5, 0.1), ess=st.floats(0.0, 1.0))
def test_adapt_step_deterministic_and_bounded(trace_ess, h, ess):
    ad = AdaptiveConfig()
    trace = [{"ess": e} for e in trace_ess]
    out = adapt_step(trace, h, ess, ad)
    assert out == adapt_step(trace, h, ess, ad)
    assert ad.h_min <= out <= max(h, ad.h_max)


# Driver


def test_zero_reward_single_level_keeps_base_law():
    problem = gaussian_problem(zero_reward(1))
    cfg = AnnealConfig(levels=[0.0, 1.0], epochs_per_level=50, batch_size=256, buffer_size=1024,
                       ess_samples=256, ode_steps=50, lr=1e-3, seed=0)
    base = base_field()
    result = run_anneal(cfg, problem, base)
    rng = np.random.default_rng(99)
    a = integrate_ode(base, rng.normal(size=(5000, 1)), 100).x1[:, 0]
    b = integrate_ode(result.model, rng.normal(size=(5000, 1)), 100).x1[:, 0]
    assert stats.ks_2samp(a, b).pvalue > 0.01
    assert len(result.trace) == 1 and result.trace[0]["a"] == 1.0


def test_frozen_reference_unchanged_within_level():
    snapshots = {}

    def on_step(k, step, frozen, trainee):
        snap = frozen.params.tobytes()
        assert snapshots.setdefault(k, snap) == snap
        assert trainee is not frozen

    cfg = small_config(levels=[0.0, 0.5, 1.0], fixed_h=None)
    result = run_anneal(cfg, gaussian_problem(), MlpVelocity(1, hidden=(8,), seed=0), on_step=on_step)
    assert set(snapshots) == {0, 1}
    assert snapshots[1] != snapshots[0]


def test_first_reference_is_base_model():
    base = MlpVelocity(1, hidden=(8,), seed=0)
    seen = []
    run_anneal(small_config(), gaussian_problem(), base,
               on_step=lambda k, s, f, tr: seen.append(f.params.copy()) if k == 0 and s == 0 else None)
    np.testing.assert_array_equal(seen[0], base.params)


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg = small_config(fixed_h=0.25)
    problem = gaussian_problem()
    base = MlpVelocity(1, hidden=(8,), seed=1)
    full = run_anneal(cfg, problem, base)
    part = run_anneal(cfg, problem, base, max_levels=2, measure_final_ess=False)
    assert part.state.k == 2 and not part.state.done
    part.state.save(tmp_path / "state")
    resumed = run_anneal(cfg, problem, base, state=AnnealState.load(tmp_path / "state"))
    np.testing.assert_allclose(resumed.model.params, full.model.params, rtol=0, atol=1e-10)
    assert [r["ess"] for r in resumed.trace] == [r["ess"] for r in full.trace]
    assert resumed.final_ess == full.final_ess


def test_trace_jsonl_schema(tmp_path):
    path = tmp_path / "trace.jsonl"
    result = run_anneal(small_config(), gaussian_problem(), base_field(), trace_path=path)
    lines = [json.loads(s) for s in path.read_text().splitlines()]
    assert lines == result.trace and len(lines) == 2
    for rec in lines:
        assert set(rec) == {"k", "a", "h", "ess", "mean_loss", "grad_norm", "clip_count", "wall_ms"}
        assert 0 < rec["ess"] <= 1
    assert [r["a"] for r in lines] == [0.5, 1.0]


def test_hard_floor_abort_keeps_trace():
    cfg = small_config(fixed_h=0.25, ess_hard_floor=0.999999)
    with pytest.raises(AnnealAbort) as info:
        run_anneal(cfg, gaussian_problem(), MlpVelocity(1, hidden=(4,), seed=0))
    assert info.value.trace == [] and info.value.state is not None


@pytest.mark.parametrize("loss", ANNEAL_LOSSES)
def test_every_loss_runs(loss):
    result = run_anneal(small_config(loss=loss, cv_value=0.5), gaussian_problem(), base_field())
    assert result.state.done and np.all(np.isfinite(result.model.params))
    assert 0 < result.final_ess <= 1


def test_adaptive_levels_end_exactly_at_one():
    cfg = small_config(fixed_h=0.3, adaptive=AdaptiveConfig(ess_floor=0.3, h_max=0.4))
    result = run_anneal(cfg, gaussian_problem(), base_field())
    assert result.trace[-1]["a"] == 1.0
    assert all(r["h"] > 0 for r in result.trace)


def test_full_pass_epochs_count_steps():
    counts = []
    cfg = small_config(levels=[0.0, 1.0], fixed_h=None, epoch_semantics="full_pass", epochs_per_level=2,
                       buffer_size=100, batch_size=30)
    run_anneal(cfg, gaussian_problem(), base_field(), on_step=lambda *a: counts.append(1))
    assert len(counts) == 2 * 4


def test_refresh_never_reuses_buffer():
    buffers = []
    cfg = small_config(fixed_h=0.5, refresh_policy="never")
    problem = gaussian_problem()
    state = AnnealState.initial(cfg, base_field())
    run_anneal(cfg, problem, None, state=state, max_levels=1)
    buffers.append(state.buffer.copy())
    run_anneal(cfg, problem, None, state=state, max_levels=1)
    np.testing.assert_array_equal(state.buffer, buffers[0])


def test_mala_and_resampling_paths():
    cfg = small_config(mala_steps=3, mala_warmup=0, importance_resample=True)
    result = run_anneal(cfg, gaussian_problem(), base_field())
    assert result.state.done


def test_grid_backend_anneal():
    grid = GridVelocity.from_function(base_field(), 1, 11, 21, -4.0, 4.0)
    result = run_anneal(small_config(), gaussian_problem(), grid)
    assert result.state.done


# Pretraining


def test_pretrain_flow_matching_moves_toward_target():
    problem = TiltProblem(standard_normal(2), *temperature_path(circle_gmm(4), 3.0), LIN)
    rng = np.random.default_rng(0)
    samples = problem.prior.sampler(rng, 4096) if problem.prior.sampler else rng.normal(size=(4096, 2)) * 2
    model = MlpVelocity(2, hidden=(16, 16), seed=0)
    hist = pretrain_flow_matching(model, problem, 200, 256, rng, lr=3e-3, target_samples=samples)
    assert np.mean(hist[-20:]) < np.mean(hist[:20])


def test_pretrain_requires_samples():
    problem = TiltProblem(standard_normal(2), *temperature_path(circle_gmm(4), 3.0), LIN)
    if problem.prior.sampler is None:
        with pytest.raises(ValueError):
            pretrain_flow_matching(MlpVelocity(2), problem, 1, 8, np.random.default_rng(0))


def test_distill_velocity_fits_reference():
    ref = base_field()
    model = MlpVelocity(1, hidden=(32, 32), seed=0)
    rng = np.random.default_rng(1)
    sample_x = lambda r, t: ((1 - t) * r.normal(size=t.size) + t * r.normal(size=t.size))[:, None]
    hist = distill_velocity(model, ref, sample_x, 1500, 256, rng, lr=3e-3)
    assert hist[-1] < 0.01 * hist[0]
