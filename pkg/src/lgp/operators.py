"""Forced Euler-Lagrange linear operators applied to kernels.

Conditioning a Gaussian process on the three-point recurrence

    grad_2 Ld(q_prev, q_curr) + grad_1 Ld(q_curr, q_next)
        + F+(u_prev, q_prev, q_curr) + F-(u_curr, q_curr, q_next) = 0

requires covariances between linear functionals of the Lagrangian prior and
of the force prior.  Both modes share one bookkeeping scheme: kernels always
see midpoint-lifted points ``z = (q_mid, qd_fd)`` and every functional is a
finite sum of weighted evaluations/gradients at such points.

* ``discrete`` mode learns the discrete Lagrangian itself; slot gradients of
  ``Ld(q_a, q_b) = k((q_a+q_b)/2, (q_b-q_a)/h_train)`` carry the lift
  Jacobians and no further factor.
* ``continuous`` mode learns the continuous Lagrangian; the midpoint
  quadrature contributes an extra factor ``h`` on Lagrangian gradients and
  ``h/2`` on force evaluations, with ``h`` free at prediction time.

The force prior is ``I (x) kbar_F``, so all force covariance blocks are
scalar multiples of the identity.

Component-wise input standardization (owned by the model layer) enters here:
points are standardized before kernel calls and gradient weights pick up the
inverse scale, so every functional below acts in raw coordinates.

All functions are pure; block assembly over index pairs may run concurrently
and is independent of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import HyperParams, KernelSpec, ShapeError, _parts

DISCRETE = "discrete"
CONTINUOUS = "continuous"

OBSERVABLES = ("eval", "momentum", "hamiltonian")


class DomainError(ValueError):
    """A numeric argument is outside its valid domain."""


class UnsupportedModeError(RuntimeError):
    """The requested operation is not defined for this operator mode."""


@dataclass(frozen=True)
class OperatorMode:
    """Residual-operator flavor.

    ``h`` is the lift step: the training step size in discrete mode, the
    per-evaluation step in continuous mode (where it may differ between the
    conditioning side and the query side).
    """

    tag: str
    h: float

    def __post_init__(self):
        if self.tag not in (DISCRETE, CONTINUOUS):
            raise ValueError(f"unknown operator mode {self.tag!r}")
        if not self.h > 0:
            raise DomainError("step size h must be positive")

    def with_step(self, h: float) -> "OperatorMode":
        return OperatorMode(self.tag, h)


def discrete_mode(h_train: float) -> OperatorMode:
    return OperatorMode(DISCRETE, h_train)


def continuous_mode(h: float) -> OperatorMode:
    return OperatorMode(CONTINUOUS, h)


@dataclass(frozen=True)
class Triplet:
    """One training sample: three successive configurations and the two inputs
    acting on the enclosed segments."""

    q_prev: np.ndarray
    q_curr: np.ndarray
    q_next: np.ndarray
    u_prev: np.ndarray
    u_curr: np.ndarray

    def __post_init__(self):
        for name in ("q_prev", "q_curr", "q_next", "u_prev", "u_curr"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), float)))
        n = self.q_prev.shape[0]
        if not all(v.shape == (n,) for v in (self.q_curr, self.q_next, self.u_prev, self.u_curr)):
            raise ShapeError("triplet vectors must share length n_q")
        if not all(
            np.all(np.isfinite(getattr(self, f))) for f in ("q_prev", "q_curr", "q_next", "u_prev", "u_curr")
        ):
            raise ValueError("triplet contains non-finite values")

    @property
    def n_q(self) -> int:
        return self.q_prev.shape[0]


@dataclass(frozen=True)
class MidpointLift:
    """Midpoint state of a configuration pair and its Jacobians."""

    z_mid: np.ndarray  # (2 n_q,) = [q_mid, qd_fd]
    j_prev: np.ndarray  # (2 n_q, n_q), d z_mid / d q_prev
    j_next: np.ndarray  # (2 n_q, n_q), d z_mid / d q_next


def lift_midpoint(q_prev, q_next, h: float) -> MidpointLift:
    """Lift a configuration pair to ``(q_mid, qd_fd)`` with exact Jacobians."""
    q_prev = np.atleast_1d(np.asarray(q_prev, float))
    q_next = np.atleast_1d(np.asarray(q_next, float))
    if q_prev.shape != q_next.shape:
        raise ShapeError("configuration pair must share length")
    if not h > 0:
        raise DomainError("step size h must be positive")
    n = q_prev.shape[0]
    z = np.concatenate([(q_prev + q_next) / 2.0, (q_next - q_prev) / h])
    eye = np.eye(n)
    j_prev = np.vstack([eye / 2.0, -eye / h])
    j_next = np.vstack([eye / 2.0, eye / h])
    return MidpointLift(z, j_prev, j_next)


@dataclass(frozen=True)
class InputScaling:
    """Component-wise affine map applied to kernel inputs (standardization)."""

    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shift", np.asarray(self.shift, float))
        object.__setattr__(self, "scale", np.asarray(self.scale, float))
        if np.any(self.scale <= 0):
            raise DomainError("scales must be strictly positive")

    @staticmethod
    def identity(d: int) -> "InputScaling":
        return InputScaling(np.zeros(d), np.ones(d))


def _scaled_parts(spec, theta, scaling, a, b, order):
    """Kernel jet in raw coordinates: standardize inputs, chain-rule the scale
    into the derivatives."""
    if scaling is None:
        scaling = InputScaling.identity(spec.input_dim)
    a = (np.atleast_2d(a) - scaling.shift) / scaling.scale
    b = (np.atleast_2d(b) - scaling.shift) / scaling.scale
    p = _parts(spec, theta, a, b, order)
    if order == 0:
        return p
    inv = 1.0 / scaling.scale
    ga = p.ga * inv
    gb = p.gb * inv
    if order == 1:
        return p._replace(ga=ga, gb=gb)
    return p._replace(ga=ga, gb=gb, hab=p.hab * (inv[:, None] * inv[None, :]))


# --------------------------------------------------------------------------
# Linear functionals of the Lagrangian prior.  A functional block of k rows
# is a sum of terms c0[t]*L(p_t) + C1[t] @ grad L(p_t).
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearFunctional:
    points: np.ndarray  # (T, d)
    coeff0: np.ndarray  # (T, k)
    coeff1: np.ndarray  # (T, k, d)

    @property
    def n_rows(self) -> int:
        return self.coeff0.shape[1]


def functional_cov(spec, theta, fa: LinearFunctional, fb: LinearFunctional, scaling=None) -> np.ndarray:
    """Covariance matrix between two functional blocks of one GP prior."""
    p = _scaled_parts(spec, theta, scaling, fa.points, fb.points, 2)
    out = np.einsum("tk,sl,ts->kl", fa.coeff0, fb.coeff0, p.val)
    out += np.einsum("tk,sld,tsd->kl", fa.coeff0, fb.coeff1, p.gb)
    out += np.einsum("tkd,tsd,sl->kl", fa.coeff1, p.ga, fb.coeff0)
    out += np.einsum("tkd,tsde,sle->kl", fa.coeff1, p.hab, fb.coeff1)
    return out


def _grad_weights(mode: OperatorMode, n_q: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-weight matrices applied to kernel gradients at the left / right
    lifted segment of a triplet."""
    eye = np.eye(n_q)
    w_left = np.hstack([eye / 2.0, eye / mode.h])  # grad_2 slot
    w_right = np.hstack([eye / 2.0, -eye / mode.h])  # grad_1 slot
    if mode.tag == CONTINUOUS:
        w_left = mode.h * w_left
        w_right = mode.h * w_right
    return w_left, w_right


def _momentum_weights(mode: OperatorMode, n_q: int) -> np.ndarray:
    eye = np.eye(n_q)
    if mode.tag == DISCRETE:
        return np.hstack([eye / 2.0, eye / mode.h])
    return np.hstack([np.zeros((n_q, n_q)), eye])


def _force_weight(mode: OperatorMode) -> float:
    return mode.h / 2.0 if mode.tag == CONTINUOUS else 1.0


def _segment_lifts(mode: OperatorMode, t: Triplet) -> tuple[np.ndarray, np.ndarray]:
    zl = lift_midpoint(t.q_prev, t.q_curr, mode.h).z_mid
    zr = lift_midpoint(t.q_curr, t.q_next, mode.h).z_mid
    return zl, zr


def _force_points(mode: OperatorMode, t: Triplet) -> np.ndarray:
    zl, zr = _segment_lifts(mode, t)
    return np.stack([np.concatenate([t.u_prev, zl]), np.concatenate([t.u_curr, zr])])


def residual_functional(mode: OperatorMode, t: Triplet) -> LinearFunctional:
    """Lagrangian part of the residual operator at one triplet (n_q rows)."""
    n = t.n_q
    zl, zr = _segment_lifts(mode, t)
    wl, wr = _grad_weights(mode, n)
    return LinearFunctional(
        points=np.stack([zl, zr]),
        coeff0=np.zeros((2, n)),
        coeff1=np.stack([wl, wr]),
    )


def eval_functional(z) -> LinearFunctional:
    z = np.atleast_1d(np.asarray(z, float))
    return LinearFunctional(z[None, :], np.ones((1, 1)), np.zeros((1, 1, z.shape[0])))


def momentum_functional(mode: OperatorMode, z) -> LinearFunctional:
    z = np.atleast_1d(np.asarray(z, float))
    n = z.shape[0] // 2
    return LinearFunctional(z[None, :], np.zeros((1, n)), _momentum_weights(mode, n)[None, :, :])


def hamiltonian_functional(z) -> LinearFunctional:
    """Legendre transform ``qd . grad_qd L - L`` as a functional at ``z``."""
    z = np.atleast_1d(np.asarray(z, float))
    n = z.shape[0] // 2
    c1 = np.concatenate([np.zeros(n), z[n:]])
    return LinearFunctional(z[None, :], -np.ones((1, 1)), c1[None, None, :])


def observable_functional(observable: str, z) -> LinearFunctional:
    if observable == "eval":
        return eval_functional(z)
    if observable == "momentum":
        return momentum_functional(OperatorMode(CONTINUOUS, 1.0), z)
    if observable == "hamiltonian":
        return hamiltonian_functional(z)
    raise ValueError(f"unknown observable {observable!r}")


@dataclass(frozen=True)
class NormalizationSpec:
    """Anchor conditions excluding degenerate Lagrangians.

    ``anchor_l`` is a Lagrangian kernel point ``(q_anchor, qd_anchor)``; in
    discrete mode it is the lift (at the training step) of the anchor
    configuration pair.  ``anchor_f`` is a force kernel point
    ``(u, q, qd)``.  ``n_l`` pins the (discrete) Lagrangian value, ``n_m``
    the anchor momentum, ``n_f`` the anchor force (zero: no force at rest).
    """

    anchor_l: np.ndarray
    anchor_f: np.ndarray
    n_l: float
    n_m: np.ndarray
    n_f: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "anchor_l", np.atleast_1d(np.asarray(self.anchor_l, float)))
        object.__setattr__(self, "anchor_f", np.atleast_1d(np.asarray(self.anchor_f, float)))
        object.__setattr__(self, "n_m", np.atleast_1d(np.asarray(self.n_m, float)))
        object.__setattr__(self, "n_f", np.atleast_1d(np.asarray(self.n_f, float)))
        if self.n_l == 0:
            raise DomainError("n_l must be nonzero")

    @property
    def n_q(self) -> int:
        return self.n_m.shape[0]


def default_normalization(
    lagrangian_kind: str, n_q: int, h: float, qd_std=None
) -> NormalizationSpec:
    """Default anchors.

    Whenever training statistics are available (``qd_std``, the per-component
    standard deviation of the finite-difference velocities), both kernel
    kinds perturb the anchor pair by ``+/- 1e-2 * qd_std * h`` and pin the
    momentum at ``1e-2 * qd_std``.  A zero anchor momentum leaves the scale
    of the Lagrangian's variation unpinned: the value condition alone is
    absorbed by a near-constant (degenerate) Lagrangian, for physics kernels
    too, since their gravity component is unconstrained in velocity.

    Physics kernels fall back to the origin anchor with zero momentum when no
    statistics are given (anchor-only diagnostics); generic kernels require
    ``qd_std``.
    """
    if qd_std is not None:
        qd_std = np.atleast_1d(np.asarray(qd_std, float))
        delta = 1e-2 * qd_std * h
        lift = lift_midpoint(-delta, delta, h)
        anchor_l = lift.z_mid
        n_m = 1e-2 * qd_std
    elif lagrangian_kind == "physics":
        anchor_l = np.zeros(2 * n_q)
        n_m = np.zeros(n_q)
    elif lagrangian_kind == "generic":
        raise ValueError("generic anchors need the fd-velocity standard deviation")
    else:
        raise ValueError(f"unknown Lagrangian kernel kind {lagrangian_kind!r}")
    return NormalizationSpec(
        anchor_l=anchor_l,
        anchor_f=np.zeros(3 * n_q),
        n_l=1.0,
        n_m=n_m,
        n_f=np.zeros(n_q),
    )


def norm_functional(mode: OperatorMode, norm: NormalizationSpec) -> LinearFunctional:
    """The (1 + n_q)-row block [evaluation; momentum] at the Lagrangian anchor."""
    n = norm.n_q
    z = norm.anchor_l
    wm = _momentum_weights(mode, n)
    c0 = np.zeros((2, 1 + n))
    c0[0, 0] = 1.0
    c1 = np.zeros((2, 1 + n, 2 * n))
    c1[1, 1:, :] = wm
    return LinearFunctional(np.stack([z, z]), c0, c1)


# --------------------------------------------------------------------------
# Covariance blocks (single pairs)
# --------------------------------------------------------------------------


def force_scalar_cov(
    k_f: KernelSpec, th_f: HyperParams, pts_a, w_a, pts_b, w_b, scaling=None
) -> float:
    """Scalar covariance of two weighted-evaluation force functionals."""
    vals = _scaled_parts(k_f, th_f, scaling, np.atleast_2d(pts_a), np.atleast_2d(pts_b), 0).val
    return float(np.asarray(w_a) @ vals @ np.asarray(w_b))


def residual_cov_block(
    mode: OperatorMode,
    k_l: KernelSpec,
    th_l: HyperParams,
    k_f: KernelSpec,
    th_f: HyperParams,
    t_i: Triplet,
    t_j: Triplet,
    mode_j: OperatorMode | None = None,
    scaling_l: InputScaling | None = None,
    scaling_f: InputScaling | None = None,
) -> np.ndarray:
    """Covariance of the residual operator at two triplets, (n_q, n_q).

    ``mode_j`` lets the two sides use different step sizes (continuous-mode
    prediction at a custom step against training rows).
    """
    mode_j = mode_j or mode
    n = t_i.n_q
    block = functional_cov(
        k_l, th_l, residual_functional(mode, t_i), residual_functional(mode_j, t_j), scaling_l
    )
    wf = np.full(2, _force_weight(mode))
    wf_j = np.full(2, _force_weight(mode_j))
    s = force_scalar_cov(
        k_f, th_f, _force_points(mode, t_i), wf, _force_points(mode_j, t_j), wf_j, scaling_f
    )
    return block + s * np.eye(n)


def cross_cov_lagrangian(
    mode: OperatorMode,
    k_l: KernelSpec,
    th_l: HyperParams,
    query,
    t_j: Triplet,
    scaling_l: InputScaling | None = None,
) -> np.ndarray:
    """Covariance between the Lagrangian at a query point and the residual
    operator at a triplet, (n_q,).

    Discrete queries are configuration pairs ``(q_a, q_b)`` and are lifted at
    the training step; continuous queries are ``(q, qd)`` directly.
    """
    z = _lift_query(mode, query)
    out = functional_cov(k_l, th_l, eval_functional(z), residual_functional(mode, t_j), scaling_l)
    return out[0]


def _lift_query(mode: OperatorMode, query) -> np.ndarray:
    query = np.atleast_1d(np.asarray(query, float))
    if mode.tag == DISCRETE:
        n = query.shape[0] // 2
        return lift_midpoint(query[:n], query[n:], mode.h).z_mid
    return query


def _lift_force_query(mode: OperatorMode, query) -> np.ndarray:
    query = np.atleast_1d(np.asarray(query, float))
    n = query.shape[0] // 3
    if mode.tag == DISCRETE:
        return np.concatenate([query[:n], lift_midpoint(query[n : 2 * n], query[2 * n :], mode.h).z_mid])
    return query


def cross_cov_force(
    mode: OperatorMode,
    k_f: KernelSpec,
    th_f: HyperParams,
    query,
    t_j: Triplet,
    scaling_f: InputScaling | None = None,
) -> np.ndarray:
    """Covariance between the force at a query point and the residual operator
    at a triplet: a scalar multiple of the identity, (n_q, n_q)."""
    x = _lift_force_query(mode, query)
    s = force_scalar_cov(
        k_f, th_f, x[None, :], [1.0], _force_points(mode, t_j), np.full(2, _force_weight(mode)), scaling_f
    )
    return s * np.eye(t_j.n_q)


def normalization_blocks(
    mode: OperatorMode,
    k_l: KernelSpec,
    th_l: HyperParams,
    k_f: KernelSpec,
    th_f: HyperParams,
    norm: NormalizationSpec,
    t: Triplet | None = None,
    scaling_l: InputScaling | None = None,
    scaling_f: InputScaling | None = None,
):
    """Normalization covariance blocks.

    With a triplet: the (1 + n_q, n_q) Lagrangian rows [evaluation; momentum]
    against the triplet's residual columns and the (n_q, n_q) force rows.
    Without: the anchor-anchor corners (the Lagrangian/force coupling corner
    is identically zero and not returned).
    """
    n = norm.n_q
    nf = norm_functional(mode, norm)
    if t is not None:
        lag = functional_cov(k_l, th_l, nf, residual_functional(mode, t), scaling_l)
        s = force_scalar_cov(
            k_f,
            th_f,
            norm.anchor_f[None, :],
            [1.0],
            _force_points(mode, t),
            np.full(2, _force_weight(mode)),
            scaling_f,
        )
        return lag, s * np.eye(n)
    lag_corner = functional_cov(k_l, th_l, nf, nf, scaling_l)
    s = force_scalar_cov(k_f, th_f, norm.anchor_f[None, :], [1.0], norm.anchor_f[None, :], [1.0], scaling_f)
    return lag_corner, s * np.eye(n)


def observable_cross_cov(
    mode: OperatorMode,
    k_l: KernelSpec,
    th_l: HyperParams,
    observable: str,
    z,
    t_j: Triplet,
    scaling_l: InputScaling | None = None,
) -> np.ndarray:
    """Covariance between a linear observable of the Lagrangian at ``z`` and
    the residual operator at a triplet.

    Shape (n_q,) for scalar observables (``eval``, ``hamiltonian``),
    (n_q, n_q) for ``momentum`` (rows: residual components, columns:
    observable outputs).  Continuous mode only.
    """
    if mode.tag != CONTINUOUS:
        raise UnsupportedModeError("linear observables need a continuous-mode model")
    fq = observable_functional(observable, z)
    out = functional_cov(k_l, th_l, residual_functional(mode, t_j), fq, scaling_l)
    return out[:, 0] if fq.n_rows == 1 else out


def observable_prior_cov(
    k_l: KernelSpec, th_l: HyperParams, observable: str, z, scaling_l: InputScaling | None = None
) -> np.ndarray:
    """Prior covariance of a linear observable with itself at ``z``."""
    fq = observable_functional(observable, z)
    return functional_cov(k_l, th_l, fq, fq, scaling_l)


# --------------------------------------------------------------------------
# Batched blocks for Gram assembly and posterior cross rows
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SegmentData:
    """Lifted per-triplet segment points and operator weights for one side."""

    z_left: np.ndarray  # (N, 2 n_q)
    z_right: np.ndarray  # (N, 2 n_q)
    x_left: np.ndarray  # (N, 3 n_q)
    x_right: np.ndarray  # (N, 3 n_q)
    w_left: np.ndarray  # (n_q, 2 n_q)
    w_right: np.ndarray  # (n_q, 2 n_q)
    w_force: float


def segment_data(mode: OperatorMode, q_prev, q_curr, q_next, u_prev, u_curr) -> SegmentData:
    q_prev, q_curr, q_next = (np.atleast_2d(np.asarray(x, float)) for x in (q_prev, q_curr, q_next))
    u_prev, u_curr = (np.atleast_2d(np.asarray(x, float)) for x in (u_prev, u_curr))
    n = q_prev.shape[1]
    h = mode.h
    zl = np.hstack([(q_prev + q_curr) / 2.0, (q_curr - q_prev) / h])
    zr = np.hstack([(q_curr + q_next) / 2.0, (q_next - q_curr) / h])
    wl, wr = _grad_weights(mode, n)
    return SegmentData(
        z_left=zl,
        z_right=zr,
        x_left=np.hstack([u_prev, zl]),
        x_right=np.hstack([u_curr, zr]),
        w_left=wl,
        w_right=wr,
        w_force=_force_weight(mode),
    )


def residual_gram_lagrangian(
    k_l: KernelSpec, th_l: HyperParams, sa: SegmentData, sb: SegmentData, scaling=None
) -> np.ndarray:
    """Lagrangian contribution to all residual-residual blocks, (Na*n_q, Nb*n_q)."""
    na, nb = sa.z_left.shape[0], sb.z_left.shape[0]
    n_q = sa.w_left.shape[0]
    pa = np.vstack([sa.z_left, sa.z_right])
    pb = np.vstack([sb.z_left, sb.z_right])
    hab = _scaled_parts(k_l, th_l, scaling, pa, pb, 2).hab
    out = np.zeros((na, n_q, nb, n_q))
    for wa, ra in ((sa.w_left, slice(0, na)), (sa.w_right, slice(na, 2 * na))):
        for wb, rb in ((sb.w_left, slice(0, nb)), (sb.w_right, slice(nb, 2 * nb))):
            out += np.einsum("ka,ijab,lb->ikjl", wa, hab[ra, rb], wb)
    return out.reshape(na * n_q, nb * n_q)


def residual_gram_force(
    k_f: KernelSpec, th_f: HyperParams, sa: SegmentData, sb: SegmentData, scaling=None
) -> np.ndarray:
    """Force contribution to all residual-residual blocks, (Na*n_q, Nb*n_q)."""
    na, nb = sa.x_left.shape[0], sb.x_left.shape[0]
    n_q = sa.w_left.shape[0]
    pa = np.vstack([sa.x_left, sa.x_right])
    pb = np.vstack([sb.x_left, sb.x_right])
    vals = _scaled_parts(k_f, th_f, scaling, pa, pb, 0).val
    s = vals[:na, :nb] + vals[:na, nb:] + vals[na:, :nb] + vals[na:, nb:]
    return np.kron(sa.w_force * sb.w_force * s, np.eye(n_q))


def residual_cross_functional(
    k_l: KernelSpec, th_l: HyperParams, sd: SegmentData, fq: LinearFunctional, scaling=None
) -> np.ndarray:
    """Covariance of every residual row with a query functional, (N*n_q, k)."""
    na = sd.z_left.shape[0]
    n_q = sd.w_left.shape[0]
    pa = np.vstack([sd.z_left, sd.z_right])
    p = _scaled_parts(k_l, th_l, scaling, pa, fq.points, 2)
    out = np.zeros((na, n_q, fq.n_rows))
    for wa, ra in ((sd.w_left, slice(0, na)), (sd.w_right, slice(na, 2 * na))):
        out += np.einsum("ka,ita,tl->ikl", wa, p.ga[ra], fq.coeff0)
        out += np.einsum("ka,itab,tlb->ikl", wa, p.hab[ra], fq.coeff1)
    return out.reshape(na * n_q, fq.n_rows)


def residual_cross_force(
    k_f: KernelSpec, th_f: HyperParams, sd: SegmentData, pts_q, w_q, scaling=None
) -> np.ndarray:
    """Scalar covariance of each residual block with a weighted-evaluation
    force functional, (N,)."""
    na = sd.x_left.shape[0]
    pa = np.vstack([sd.x_left, sd.x_right])
    vals = _scaled_parts(k_f, th_f, scaling, pa, np.atleast_2d(pts_q), 0).val @ np.asarray(w_q)
    return sd.w_force * (vals[:na] + vals[na:])
