"""Objective values, optimization, slack search, and end-to-end fitting."""

import time

import numpy as np
import pytest

import lgp.model as mdl
from lgp.baseline import BaselineGP, baseline_predict, baseline_rollout
from lgp.kernels import HyperParams, baseline_kernel, force_kernel, lagrangian_kernel
from lgp.model import Dataset, GramSystem, build_model, residual_mean
from lgp.operators import continuous_mode, default_normalization
from lgp.rollout import simulate_true
from lgp.systems import PendulumParams, make_test_scenario, pendulum_system, sample_triplets
from lgp.training import (
    FitReport,
    SlackSearchError,
    TrainConfig,
    Trajectory,
    _map_penalty,
    _ObjectiveSplit,
    fit,
    fit_baseline_gp,
    nlml_from_gram,
    objective,
    optimize_hyperparameters,
    tune_slack,
)


def _pendulum_dataset(n=20, seed=0, h=0.05):
    return sample_triplets(pendulum_system(PendulumParams(n_q=1)), n, h=h, seed=seed)


def _heldout(steps=40, seed=991, h=0.05):
    sys1 = pendulum_system(PendulumParams(n_q=1))
    sc = make_test_scenario(sys1, seed=seed, steps=steps, h=h)
    truth = simulate_true(sys1, sc.q0, (sc.q1 - sc.q0) / h, sc.inputs, h, steps)
    return Trajectory(truth, np.vstack([sc.inputs, sc.inputs[-1:]]), h)


def _setup(kind="physics", n=20, seed=0):
    ds = _pendulum_dataset(n, seed)
    k_l = lagrangian_kernel(kind, 1)
    k_f = force_kernel(kind if kind == "physics" else "generic", 1)
    norm = default_normalization(kind, 1, ds.h, qd_std=ds.standardization.qd_std)
    return ds, k_l, k_f, norm


# -- objective -----------------------------------------------------------------


def test_nlml_identity_gram():
    gram = GramSystem(np.eye(4), np.zeros(4), n_q=1, n_data=2)
    assert nlml_from_gram(gram) == pytest.approx(0.0)


def test_nlml_scaled_identity():
    gram = GramSystem(4.0 * np.eye(2), np.zeros(2), n_q=1, n_data=0)
    assert nlml_from_gram(gram) == pytest.approx(0.5 * 2 * np.log(4.0))


def test_map_penalty_arithmetic():
    assert _map_penalty(np.array([2.0, 0.0]), 0.0, 2.0) == pytest.approx(0.5)


def test_objective_finite_in_bounds():
    ds, k_l, k_f, norm = _setup("physics")
    cfg = TrainConfig()
    rng = np.random.default_rng(0)
    mode = continuous_mode(ds.h)
    for _ in range(5):
        x = rng.uniform(-6, 6, k_l.n_params + k_f.n_params)
        v = objective(ds, k_l, k_f, x, norm, 1e-4, mode, cfg)
        assert np.isfinite(v)


def test_objective_matches_manual_assembly():
    ds, k_l, k_f, norm = _setup("generic")
    cfg = TrainConfig()
    x = 0.2 * np.ones(k_l.n_params + k_f.n_params)
    sigma = 1e-3
    got = objective(ds, k_l, k_f, x, norm, sigma, continuous_mode(ds.h), cfg)
    th_l = HyperParams.from_vector(k_l, x[: k_l.n_params])
    th_f = HyperParams.from_vector(k_f, x[k_l.n_params :])
    gram = mdl.assemble(ds, k_l, th_l, k_f, th_f, norm, sigma, continuous_mode(ds.h))
    expect = nlml_from_gram(gram, _map_penalty(x, cfg.map_mean, cfg.map_std))
    assert got == pytest.approx(expect, rel=1e-9)


def test_fd_gradient_self_consistency():
    # the optimizer's gradient (step 1e-5) against a half-step secondary FD
    ds, k_l, k_f, norm = _setup("physics", n=10)
    cfg = TrainConfig()
    split = _ObjectiveSplit(ds, k_l, k_f, norm, cfg.sigma_optimize, continuous_mode(ds.h), cfg)
    x = 0.3 * np.ones(k_l.n_params + k_f.n_params)
    _, grad = split.value_and_grad(x)
    half = 0.5e-5
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += half
        xm[i] -= half
        fd = (split.value(xp) - split.value(xm)) / (2 * half)
        assert fd == pytest.approx(grad[i], rel=1e-3, abs=1e-6)


# -- optimizer -----------------------------------------------------------------


def test_optimize_descends_and_selects_best():
    ds, k_l, k_f, norm = _setup("physics", n=12)
    cfg = TrainConfig(restarts=3, seed=4, max_iters=60)
    mode = continuous_mode(ds.h)
    th_l, th_f, report = optimize_hyperparameters(ds, k_l, k_f, norm, cfg, mode)
    assert report.best_objective <= min(report.restart_objectives) + 1e-12
    # regenerate the restart start points: finals must not exceed the starts
    split = _ObjectiveSplit(ds, k_l, k_f, norm, cfg.sigma_optimize, mode, cfg)
    n_par = k_l.n_params + k_f.n_params
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    starts = [np.zeros(n_par)] + [rng.uniform(-6, 6, n_par) for _ in range(cfg.restarts - 1)]
    for x0, final in zip(starts, report.restart_objectives):
        assert final <= split.value(x0) + 1e-9


def test_optimize_deterministic():
    ds, k_l, k_f, norm = _setup("generic", n=10)
    cfg = TrainConfig(restarts=2, seed=7, max_iters=40)
    mode = continuous_mode(ds.h)
    a_l, a_f, _ = optimize_hyperparameters(ds, k_l, k_f, norm, cfg, mode)
    b_l, b_f, _ = optimize_hyperparameters(ds, k_l, k_f, norm, cfg, mode)
    assert np.array_equal(a_l.to_vector(), b_l.to_vector())
    assert np.array_equal(a_f.to_vector(), b_f.to_vector())


def test_heuristic_start_finite():
    ds, k_l, k_f, norm = _setup("physics", n=50)
    cfg = TrainConfig()
    v = objective(ds, k_l, k_f, np.zeros(k_l.n_params + k_f.n_params), norm,
                  cfg.sigma_optimize, continuous_mode(ds.h), cfg)
    assert np.isfinite(v)


# -- slack search ----------------------------------------------------------------


def test_tune_slack_single_element_grid():
    ds, k_l, k_f, norm = _setup("physics", n=12)
    th_l = HyperParams.default(k_l)
    th_f = HyperParams.default(k_f)
    sigma, scores = tune_slack(ds, _heldout(10), k_l, th_l, k_f, th_f, norm, [1e-4],
                               continuous_mode(ds.h))
    assert sigma == 1e-4
    assert len(scores) == 1


def test_tune_slack_noise_free_prefers_small_sigma():
    ds, k_l, k_f, norm = _setup("physics", n=40, seed=3)
    cfg = TrainConfig(restarts=2, seed=0, max_iters=80)
    mode = continuous_mode(ds.h)
    th_l, th_f, _ = optimize_hyperparameters(ds, k_l, k_f, norm, cfg, mode)
    grid = list(np.geomspace(1e-8, 1e-1, 8))
    sigma, scores = tune_slack(ds, _heldout(30), k_l, th_l, k_f, th_f, norm, grid, mode)
    best = min(scores)
    small_near_best = [g for g, s in zip(grid, scores) if s <= 1.01 * best]
    assert sigma <= max(small_near_best)
    assert min(small_near_best) <= grid[2]  # noise-free: small slack is competitive


def test_tune_slack_all_divergent_raises():
    ds, k_l, k_f, norm = _setup("physics", n=6)
    dead_l = HyperParams(HyperParams.default(k_l).log_variances - 80.0,
                         HyperParams.default(k_l).log_lengthscales)
    dead_f = HyperParams(HyperParams.default(k_f).log_variances - 80.0,
                         HyperParams.default(k_f).log_lengthscales)
    with pytest.raises(SlackSearchError, match="sigma"):
        tune_slack(ds, _heldout(10), k_l, dead_l, k_f, dead_f, norm, [1e-6, 1e-4],
                   continuous_mode(ds.h))


# -- end-to-end fit ---------------------------------------------------------------


def test_fit_pendulum_completes_quickly():
    ds, k_l, k_f, _ = _setup("physics", n=25)
    cfg = TrainConfig(restarts=2, seed=0, max_iters=80)
    t0 = time.perf_counter()
    model, report = fit(ds, k_l, k_f, cfg, continuous_mode(ds.h), heldout=_heldout(40))
    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    assert isinstance(report, FitReport)
    assert report.sigma in report.sigma_grid
    assert np.isfinite(report.best_objective)
    # near-interpolation at the tuned slack
    worst = max(np.linalg.norm(residual_mean(model, ds.triplet(i))) for i in range(ds.n))
    assert worst <= 1e-2


def test_fit_with_fixed_sigma_skips_line_search():
    ds, k_l, k_f, _ = _setup("generic", n=10)
    cfg = TrainConfig(restarts=1, seed=0, max_iters=40)
    model, report = fit(ds, k_l, k_f, cfg, continuous_mode(ds.h), sigma=1e-5)
    assert model.sigma == 1e-5
    assert report.sigma_scores == []
    with pytest.raises(ValueError):
        fit(ds, k_l, k_f, cfg, continuous_mode(ds.h))


def test_fit_learns_dissipation_sign():
    # trained pendulum: the force posterior opposes positive velocity
    ds, k_l, k_f, _ = _setup("physics", n=60, seed=5)
    cfg = TrainConfig(restarts=2, seed=0, max_iters=100)
    model, _ = fit(ds, k_l, k_f, cfg, continuous_mode(ds.h), heldout=_heldout(40))
    post = mdl.posterior_force(model, np.array([0.0, 0.0, 1.0]))
    assert post.mean[0] < 0.0
    mom = mdl.posterior_momentum(model, np.array([0.0, 1.0]))
    assert abs(float(mom.mean[0])) > 0.0


# -- baseline ---------------------------------------------------------------------


def test_baseline_requires_two_points():
    ds = _pendulum_dataset(1)
    with pytest.raises(ValueError):
        fit_baseline_gp(ds)


def test_baseline_interpolates_with_tiny_noise():
    ds = _pendulum_dataset(30, seed=2)
    from lgp.baseline import _feature_arrays, _feature_scaling

    shift, scale = _feature_scaling(ds)
    x = (_feature_arrays(ds) - shift) / scale
    s = ds.standardization
    y = (ds.q_next - s.q_mean) / s.q_std
    spec = baseline_kernel(4)
    params = np.zeros((1, 6))
    params[0, -1] = np.log(1e-12)
    gp = BaselineGP(x, y, shift, scale, s.q_mean.copy(), s.q_std.copy(), params)
    for i in (0, 7, 29):
        t = ds.triplet(i)
        pred = baseline_predict(gp, t.q_prev, t.q_curr, t.u_prev, t.u_curr)
        assert np.allclose(pred, t.q_next, atol=1e-6)


def test_baseline_far_from_data_returns_target_mean():
    ds = _pendulum_dataset(20, seed=4)
    gp = fit_baseline_gp(ds, TrainConfig(restarts=2, seed=0, max_iters=60))
    far = 1e3 * np.ones(1)
    pred = baseline_predict(gp, far, far, far, far)
    assert np.allclose(pred, gp.targ_shift, atol=1e-6)


def test_baseline_one_step_accuracy_and_rollout():
    ds = _pendulum_dataset(80, seed=6)
    gp = fit_baseline_gp(ds, TrainConfig(restarts=2, seed=0, max_iters=80))
    sys1 = pendulum_system(PendulumParams(n_q=1))
    sc = make_test_scenario(sys1, seed=123, steps=20, h=0.05)
    truth = simulate_true(sys1, sc.q0, (sc.q1 - sc.q0) / 0.05, sc.inputs, 0.05, 20)
    pred = baseline_rollout(gp, sc.q0, sc.q1, sc.inputs, 20)
    assert pred.shape == (22, 1)
    rmse = np.sqrt(np.mean((pred[2:] - truth[2:]) ** 2))
    assert np.isfinite(rmse)
    one = baseline_predict(gp, truth[0], truth[1], sc.inputs[0], sc.inputs[1])
    assert np.linalg.norm(one - truth[2]) < 0.05


def test_baseline_shares_dataset_statistics():
    ds = _pendulum_dataset(15, seed=7)
    gp = fit_baseline_gp(ds, TrainConfig(restarts=1, seed=0, max_iters=30))
    s = ds.standardization
    assert np.allclose(gp.feat_shift, np.concatenate([s.q_mean, s.q_mean, s.u_mean, s.u_mean]))
    assert np.allclose(gp.targ_scale, s.q_std)
