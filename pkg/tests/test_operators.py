"""Euler-Lagrange operator blocks against independent finite-difference oracles."""

import numpy as np
import pytest

import lgp.operators as ops
from lgp.kernels import (
    HyperParams,
    kernel_cross_hessian,
    kernel_eval,
    kernel_grad,
    physics_force_kernel,
    physics_lagrangian_kernel,
    se_kernel,
)
from lgp.operators import (
    CONTINUOUS,
    DISCRETE,
    InputScaling,
    NormalizationSpec,
    OperatorMode,
    Triplet,
    UnsupportedModeError,
    continuous_mode,
    cross_cov_force,
    cross_cov_lagrangian,
    default_normalization,
    discrete_mode,
    lift_midpoint,
    normalization_blocks,
    observable_cross_cov,
    observable_prior_cov,
    residual_cov_block,
    residual_cross_force,
    residual_cross_functional,
    residual_gram_force,
    residual_gram_lagrangian,
    segment_data,
)


def _random_triplet(rng, n_q):
    return Triplet(*(rng.uniform(-1.5, 1.5, n_q) for _ in range(5)))


def _theta(spec, rng, scale=0.4):
    return HyperParams.from_vector(spec, scale * rng.standard_normal(spec.n_params))


def _tiny_theta(spec):
    # signal variances ~ e^-80: numerically zero prior
    vec = np.zeros(spec.n_params)
    th = HyperParams.from_vector(spec, vec)
    return HyperParams(th.log_variances - 80.0, th.log_lengthscales)


# -- midpoint lift -----------------------------------------------------------


def test_lift_midpoint_values():
    l = lift_midpoint([0.0], [0.0], 0.1)
    assert np.allclose(l.z_mid, [0.0, 0.0])
    l = lift_midpoint([0.0], [0.1], 0.1)
    assert np.allclose(l.z_mid, [0.05, 1.0])
    l = lift_midpoint([0.0, 0.0], [0.1, 0.2], 0.05)
    assert np.allclose(l.j_prev[2:], -20.0 * np.eye(2))
    assert np.allclose(l.j_next[2:], 20.0 * np.eye(2))


def test_lift_midpoint_jacobian_invariant():
    l = lift_midpoint([0.3, -0.2], [0.5, 0.1], 0.07)
    s = l.j_prev + l.j_next
    assert np.allclose(s[:2], np.eye(2))
    assert np.allclose(s[2:], 0.0)


def test_lift_midpoint_rejects_bad_step():
    with pytest.raises(ops.DomainError):
        lift_midpoint([0.0], [1.0], 0.0)


# -- finite-difference oracles ----------------------------------------------
# Everything below only uses kernel_eval composed with the midpoint lift, so
# it is independent of the functional/weight machinery under test.


def _lifted_eval(spec, th, mode, pair_a, pair_b, scaling=None):
    n = len(pair_a) // 2
    za = lift_midpoint(pair_a[:n], pair_a[n:], mode.h).z_mid
    zb = lift_midpoint(pair_b[:n], pair_b[n:], mode.h).z_mid
    if scaling is not None:
        za = (za - scaling.shift) / scaling.scale
        zb = (zb - scaling.shift) / scaling.scale
    scale = mode.h**2 if mode.tag == CONTINUOUS else 1.0
    return scale * kernel_eval(spec, th, za, zb)


def _fd_residual_block_lag(spec, th, mode, t_i, t_j, scaling=None, eps=1e-5):
    """Slot-gradient expansion of the Lagrangian residual covariance via
    central differences of kernel_eval over raw configurations."""
    n = t_i.n_q
    pairs_i = [np.concatenate([t_i.q_prev, t_i.q_curr]), np.concatenate([t_i.q_curr, t_i.q_next])]
    pairs_j = [np.concatenate([t_j.q_prev, t_j.q_curr]), np.concatenate([t_j.q_curr, t_j.q_next])]
    slots_i = [slice(n, 2 * n), slice(0, n)]  # grad_2 on left pair, grad_1 on right pair
    out = np.zeros((n, n))
    for pa, sa in zip(pairs_i, slots_i):
        for pb, sb in zip(pairs_j, slots_i):
            for m in range(n):
                for l in range(n):
                    da = np.zeros(2 * n)
                    db = np.zeros(2 * n)
                    da[sa][m] = eps
                    db[sb][l] = eps
                    out[m, l] += (
                        _lifted_eval(spec, th, mode, pa + da, pb + db, scaling)
                        - _lifted_eval(spec, th, mode, pa + da, pb - db, scaling)
                        - _lifted_eval(spec, th, mode, pa - da, pb + db, scaling)
                        + _lifted_eval(spec, th, mode, pa - da, pb - db, scaling)
                    ) / (4 * eps * eps)
    return out


def _fd_force_block(spec, th, mode, t_i, t_j, scaling=None):
    def pts(t):
        zl = lift_midpoint(t.q_prev, t.q_curr, mode.h).z_mid
        zr = lift_midpoint(t.q_curr, t.q_next, mode.h).z_mid
        return [np.concatenate([t.u_prev, zl]), np.concatenate([t.u_curr, zr])]

    def ev(xa, xb):
        if scaling is not None:
            xa = (xa - scaling.shift) / scaling.scale
            xb = (xb - scaling.shift) / scaling.scale
        return kernel_eval(spec, th, xa, xb)

    w = mode.h / 2.0 if mode.tag == CONTINUOUS else 1.0
    s = sum(ev(xa, xb) for xa in pts(t_i) for xb in pts(t_j))
    return w * w * s * np.eye(t_i.n_q)


@pytest.mark.parametrize("tag", [DISCRETE, CONTINUOUS])
@pytest.mark.parametrize("n_q", [1, 2])
def test_residual_block_matches_fd_oracle(tag, n_q):
    rng = np.random.default_rng(42)
    mode = OperatorMode(tag, 0.08)
    k_l = physics_lagrangian_kernel(n_q)
    k_f = physics_force_kernel(n_q)
    th_l = _theta(k_l, rng)
    th_f = _theta(k_f, rng)
    t_i = _random_triplet(rng, n_q)
    t_j = _random_triplet(rng, n_q)
    blk = residual_cov_block(mode, k_l, th_l, k_f, th_f, t_i, t_j)
    oracle = _fd_residual_block_lag(k_l, th_l, mode, t_i, t_j) + _fd_force_block(k_f, th_f, mode, t_i, t_j)
    assert np.allclose(blk, oracle, rtol=1e-5, atol=1e-6)


def test_residual_block_matches_fd_oracle_with_scaling():
    rng = np.random.default_rng(3)
    mode = discrete_mode(0.05)
    k_l = se_kernel(2)
    k_f = se_kernel(3)
    th_l = _theta(k_l, rng)
    th_f = _theta(k_f, rng)
    sc_l = InputScaling(rng.normal(0, 0.3, 2), rng.uniform(0.5, 2.0, 2))
    sc_f = InputScaling(rng.normal(0, 0.3, 3), rng.uniform(0.5, 2.0, 3))
    t_i = _random_triplet(rng, 1)
    t_j = _random_triplet(rng, 1)
    blk = residual_cov_block(mode, k_l, th_l, k_f, th_f, t_i, t_j, scaling_l=sc_l, scaling_f=sc_f)
    oracle = _fd_residual_block_lag(k_l, th_l, mode, t_i, t_j, sc_l) + _fd_force_block(
        k_f, th_f, mode, t_i, t_j, sc_f
    )
    assert np.allclose(blk, oracle, rtol=1e-5, atol=1e-6)


def test_residual_block_same_point_symmetric():
    rng = np.random.default_rng(0)
    mode = continuous_mode(0.05)
    k_l = physics_lagrangian_kernel(2)
    k_f = physics_force_kernel(2)
    th_l = _theta(k_l, rng)
    th_f = _theta(k_f, rng)
    t = _random_triplet(rng, 2)
    blk = residual_cov_block(mode, k_l, th_l, k_f, th_f, t, t)
    assert np.allclose(blk, blk.T, atol=1e-12)


def test_residual_block_transpose_symmetry():
    rng = np.random.default_rng(1)
    mode = discrete_mode(0.05)
    k_l = se_kernel(4)
    k_f = se_kernel(6)
    th_l = _theta(k_l, rng)
    th_f = _theta(k_f, rng)
    t_i = _random_triplet(rng, 2)
    t_j = _random_triplet(rng, 2)
    b_ij = residual_cov_block(mode, k_l, th_l, k_f, th_f, t_i, t_j)
    b_ji = residual_cov_block(mode, k_l, th_l, k_f, th_f, t_j, t_i)
    assert np.allclose(b_ij, b_ji.T, rtol=1e-10, atol=1e-12)


def test_force_zero_variance_leaves_lagrangian_term():
    rng = np.random.default_rng(2)
    mode = continuous_mode(0.05)
    k_l = se_kernel(2)
    k_f = se_kernel(3)
    th_l = _theta(k_l, rng)
    t_i = _random_triplet(rng, 1)
    t_j = _random_triplet(rng, 1)
    full = residual_cov_block(mode, k_l, th_l, k_f, _tiny_theta(k_f), t_i, t_j)
    lag_only = ops.functional_cov(
        k_l, th_l, ops.residual_functional(mode, t_i), ops.residual_functional(mode, t_j)
    )
    assert np.allclose(full, lag_only, atol=1e-14)


def test_operator_linearity_in_lagrangian_kernel():
    rng = np.random.default_rng(4)
    mode = discrete_mode(0.05)
    k_l = physics_lagrangian_kernel(1)
    k_f = physics_force_kernel(1)
    th_l = _theta(k_l, rng)
    th_f = _theta(k_f, rng)
    th_l2 = HyperParams(th_l.log_variances + np.log(2.0), th_l.log_lengthscales)
    t_i = _random_triplet(rng, 1)
    t_j = _random_triplet(rng, 1)
    force_part = residual_cov_block(mode, k_l, _tiny_theta(k_l), k_f, th_f, t_i, t_j)
    b1 = residual_cov_block(mode, k_l, th_l, k_f, th_f, t_i, t_j)
    b2 = residual_cov_block(mode, k_l, th_l2, k_f, th_f, t_i, t_j)
    assert np.allclose(b2 - force_part, 2.0 * (b1 - force_part), rtol=1e-12)


def test_continuous_equals_discrete_on_pullback_kernel():
    # the midpoint quadrature contributes h on the Lagrangian side and h/2 on
    # the force side, otherwise the operators coincide on lifted coordinates
    rng = np.random.default_rng(5)
    h = 0.07
    k_l = se_kernel(2)
    k_f = se_kernel(3)
    th_l = _theta(k_l, rng)
    th_f = _theta(k_f, rng)
    t_i = _random_triplet(rng, 1)
    t_j = _random_triplet(rng, 1)
    lag_c = residual_cov_block(continuous_mode(h), k_l, th_l, k_f, _tiny_theta(k_f), t_i, t_j)
    lag_d = residual_cov_block(discrete_mode(h), k_l, th_l, k_f, _tiny_theta(k_f), t_i, t_j)
    assert np.allclose(lag_c, h**2 * lag_d, rtol=1e-8)
    frc_c = residual_cov_block(continuous_mode(h), k_l, _tiny_theta(k_l), k_f, th_f, t_i, t_j)
    frc_d = residual_cov_block(discrete_mode(h), k_l, _tiny_theta(k_l), k_f, th_f, t_i, t_j)
    assert np.allclose(frc_c, (h**2 / 4.0) * frc_d, rtol=1e-8)


def test_force_blocks_are_identity_multiples():
    rng = np.random.default_rng(6)
    mode = continuous_mode(0.05)
    k_l = se_kernel(6)
    k_f = physics_force_kernel(3)
    th_f = _theta(k_f, rng)
    t_i = _random_triplet(rng, 3)
    t_j = _random_triplet(rng, 3)
    blk = residual_cov_block(mode, k_l, _tiny_theta(k_l), k_f, th_f, t_i, t_j)
    assert np.allclose(blk, blk[0, 0] * np.eye(3), atol=1e-12)


# -- cross covariances -------------------------------------------------------


def test_cross_cov_lagrangian_zero_prior():
    rng = np.random.default_rng(7)
    mode = continuous_mode(0.05)
    k_l = se_kernel(2)
    t = _random_triplet(rng, 1)
    v = cross_cov_lagrangian(mode, k_l, _tiny_theta(k_l), rng.normal(0, 1, 2), t)
    assert np.allclose(v, 0.0, atol=1e-30)


def test_cross_cov_lagrangian_discrete_fd_oracle():
    rng = np.random.default_rng(8)
    mode = discrete_mode(0.06)
    k_l = se_kernel(2)
    th_l = _theta(k_l, rng)
    t = _random_triplet(rng, 1)
    query = np.concatenate([t.q_prev, t.q_curr])  # coincident with the left pair
    v = cross_cov_lagrangian(mode, k_l, th_l, query, t)

    # FD oracle: d/d(slot of t's pairs) of the lifted kernel, query side fixed
    eps = 1e-5
    n = 1
    pairs = [np.concatenate([t.q_prev, t.q_curr]), np.concatenate([t.q_curr, t.q_next])]
    slots = [slice(n, 2 * n), slice(0, n)]
    oracle = np.zeros(n)
    for pb, sb in zip(pairs, slots):
        for m in range(n):
            db = np.zeros(2 * n)
            db[sb][m] = eps
            oracle[m] += (
                _lifted_eval(k_l, th_l, mode, query, pb + db)
                - _lifted_eval(k_l, th_l, mode, query, pb - db)
            ) / (2 * eps)
    assert np.allclose(v, oracle, rtol=1e-6, atol=1e-8)


def test_cross_cov_lagrangian_affine_in_step():
    # with coincident segment endpoints the lifted points are h-independent,
    # so only the h/2 quadrature factor on the position slot varies
    rng = np.random.default_rng(9)
    k_l = se_kernel(2)
    th_l = _theta(k_l, rng)
    q = rng.normal(0, 1, 1)
    t = Triplet(q, q, q, np.zeros(1), np.zeros(1))
    query = rng.normal(0, 1, 2)
    v = {h: cross_cov_lagrangian(continuous_mode(h), k_l, th_l, query, t) for h in (0.1, 0.05, 0.025)}
    slope1 = (v[0.1] - v[0.05]) / 0.05
    slope2 = (v[0.05] - v[0.025]) / 0.025
    assert np.allclose(slope1, slope2, rtol=1e-10)
    z = np.concatenate([q, np.zeros(1)])
    grad_q = kernel_grad(k_l, th_l, query, z, "b")[0]
    assert np.allclose(slope1, 2 * 0.5 * grad_q, rtol=1e-10)  # two segments, h/2 each


def test_cross_cov_force_structure_and_value():
    rng = np.random.default_rng(10)
    mode = discrete_mode(0.05)
    k_f = se_kernel(3)
    th_f = _theta(k_f, rng)
    t = _random_triplet(rng, 1)
    zl = lift_midpoint(t.q_prev, t.q_curr, mode.h).z_mid
    zr = lift_midpoint(t.q_curr, t.q_next, mode.h).z_mid
    x_left = np.concatenate([t.u_prev, zl])
    x_right = np.concatenate([t.u_curr, zr])
    got = cross_cov_force(mode, k_f, th_f, np.concatenate([t.u_prev, t.q_prev, t.q_curr]), t)
    sig2 = np.exp(th_f.log_variances[0])
    expect = (sig2 + kernel_eval(k_f, th_f, x_left, x_right)) * np.eye(1)
    assert np.allclose(got, expect, rtol=1e-12)
    zero = cross_cov_force(mode, k_f, _tiny_theta(k_f), np.zeros(3), t)
    assert np.allclose(zero, 0.0, atol=1e-30)


# -- normalization -----------------------------------------------------------


def test_normalization_corners():
    rng = np.random.default_rng(11)
    mode = continuous_mode(0.05)
    k_l = se_kernel(4)
    k_f = se_kernel(6)
    th_l = _theta(k_l, rng)
    th_f = _theta(k_f, rng)
    norm = NormalizationSpec(
        anchor_l=rng.normal(0, 1, 4),
        anchor_f=rng.normal(0, 1, 6),
        n_l=1.0,
        n_m=np.zeros(2),
        n_f=np.zeros(2),
    )
    lag, frc = normalization_blocks(mode, k_l, th_l, k_f, th_f, norm)
    z = norm.anchor_l
    assert lag[0, 0] == pytest.approx(kernel_eval(k_l, th_l, z, z))
    # stationary kernel: eval/momentum coupling vanishes at the coincident anchor
    assert np.allclose(lag[0, 1:], 0.0, atol=1e-14)
    assert np.allclose(lag[1:, 0], 0.0, atol=1e-14)
    # momentum corner is the velocity block of the cross-Hessian
    h_full = kernel_cross_hessian(k_l, th_l, z, z)
    assert np.allclose(lag[1:, 1:], h_full[2:, 2:], rtol=1e-12)
    xf = norm.anchor_f
    assert np.allclose(frc, kernel_eval(k_f, th_f, xf, xf) * np.eye(2), rtol=1e-12)


def test_normalization_rows_against_functional_cov():
    rng = np.random.default_rng(12)
    mode = discrete_mode(0.05)
    n_q = 2
    k_l = physics_lagrangian_kernel(n_q)
    k_f = physics_force_kernel(n_q)
    th_l = _theta(k_l, rng)
    th_f = _theta(k_f, rng)
    norm = default_normalization("physics", n_q, mode.h)
    t = _random_triplet(rng, n_q)
    lag, frc = normalization_blocks(mode, k_l, th_l, k_f, th_f, norm, t)
    assert lag.shape == (1 + n_q, n_q)
    assert np.allclose(frc, frc[0, 0] * np.eye(n_q), atol=1e-13)
    # first row equals the Lagrangian-evaluation cross covariance at the anchor
    v = cross_cov_lagrangian(mode, k_l, th_l, np.zeros(2 * n_q), t)
    assert np.allclose(lag[0], v, rtol=1e-12)


def test_default_normalization_variants():
    norm = default_normalization("physics", 2, 0.05)
    assert np.allclose(norm.anchor_l, 0.0)
    assert np.allclose(norm.n_m, 0.0)
    assert norm.n_l == 1.0
    sd = np.array([1.5, 2.0])
    for kind in ("generic", "physics"):
        norm = default_normalization(kind, 2, 0.05, qd_std=sd)
        assert np.allclose(norm.anchor_l[:2], 0.0)
        assert np.allclose(norm.anchor_l[2:], 2e-2 * sd)
        assert np.allclose(norm.n_m, 1e-2 * sd)
    with pytest.raises(ValueError):
        default_normalization("generic", 2, 0.05)
    with pytest.raises(ops.DomainError):
        NormalizationSpec(np.zeros(2), np.zeros(3), 0.0, np.zeros(1), np.zeros(1))


# -- observables -------------------------------------------------------------


def test_observable_eval_reduces_to_cross_cov():
    rng = np.random.default_rng(13)
    mode = continuous_mode(0.05)
    k_l = se_kernel(2)
    th_l = _theta(k_l, rng)
    t = _random_triplet(rng, 1)
    z = rng.normal(0, 1, 2)
    v_eval = observable_cross_cov(mode, k_l, th_l, "eval", z, t)
    v_lag = cross_cov_lagrangian(mode, k_l, th_l, z, t)
    assert np.allclose(v_eval, v_lag, rtol=1e-13)


def test_observable_hamiltonian_at_zero_velocity():
    rng = np.random.default_rng(14)
    mode = continuous_mode(0.05)
    k_l = physics_lagrangian_kernel(1)
    th_l = _theta(k_l, rng)
    t = _random_triplet(rng, 1)
    z = np.array([0.7, 0.0])
    v_h = observable_cross_cov(mode, k_l, th_l, "hamiltonian", z, t)
    v_l = cross_cov_lagrangian(mode, k_l, th_l, z, t)
    assert np.allclose(v_h, -v_l, rtol=1e-13)
    prior = observable_prior_cov(k_l, th_l, "hamiltonian", z)
    assert prior[0, 0] == pytest.approx(kernel_eval(k_l, th_l, z, z))


def test_observable_requires_continuous_mode():
    k_l = se_kernel(2)
    th_l = HyperParams.default(k_l)
    t = Triplet([0.0], [0.1], [0.2], [0.0], [0.0])
    with pytest.raises(UnsupportedModeError):
        observable_cross_cov(discrete_mode(0.05), k_l, th_l, "hamiltonian", np.zeros(2), t)


# -- batched assembly paths match the single-pair operations -----------------


@pytest.mark.parametrize("tag", [DISCRETE, CONTINUOUS])
def test_batched_gram_matches_blockwise(tag):
    rng = np.random.default_rng(15)
    n_q, n = 2, 4
    mode = OperatorMode(tag, 0.05)
    k_l = physics_lagrangian_kernel(n_q)
    k_f = physics_force_kernel(n_q)
    th_l = _theta(k_l, rng)
    th_f = _theta(k_f, rng)
    trips = [_random_triplet(rng, n_q) for _ in range(n)]
    qp = np.stack([t.q_prev for t in trips])
    qc = np.stack([t.q_curr for t in trips])
    qn = np.stack([t.q_next for t in trips])
    up = np.stack([t.u_prev for t in trips])
    uc = np.stack([t.u_curr for t in trips])
    sd = segment_data(mode, qp, qc, qn, up, uc)
    gram = residual_gram_lagrangian(k_l, th_l, sd, sd) + residual_gram_force(k_f, th_f, sd, sd)
    for i in range(n):
        for j in range(n):
            blk = residual_cov_block(mode, k_l, th_l, k_f, th_f, trips[i], trips[j])
            assert np.allclose(gram[i * n_q : (i + 1) * n_q, j * n_q : (j + 1) * n_q], blk, rtol=1e-12)


def test_batched_cross_matches_blockwise():
    rng = np.random.default_rng(16)
    n_q, n = 1, 5
    mode = continuous_mode(0.04)
    k_l = se_kernel(2)
    k_f = se_kernel(3)
    th_l = _theta(k_l, rng)
    th_f = _theta(k_f, rng)
    trips = [_random_triplet(rng, n_q) for _ in range(n)]
    sd = segment_data(
        mode,
        np.stack([t.q_prev for t in trips]),
        np.stack([t.q_curr for t in trips]),
        np.stack([t.q_next for t in trips]),
        np.stack([t.u_prev for t in trips]),
        np.stack([t.u_curr for t in trips]),
    )
    z = rng.normal(0, 1, 2)
    got = residual_cross_functional(k_l, th_l, sd, ops.eval_functional(z))
    for j in range(n):
        v = cross_cov_lagrangian(mode, k_l, th_l, z, trips[j])
        assert np.allclose(got[j * n_q : (j + 1) * n_q, 0], v, rtol=1e-12)
    x = rng.normal(0, 1, 3)
    got_f = residual_cross_force(k_f, th_f, sd, x[None, :], [1.0])
    for j in range(n):
        m = cross_cov_force(mode, k_f, th_f, x, trips[j])
        assert got_f[j] == pytest.approx(m[0, 0], rel=1e-12)
