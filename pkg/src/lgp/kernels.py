"""Scalar covariance functions with exact first derivatives and cross-Hessians.

All kernels map pairs of points to a covariance value and are built from two
primitives: anisotropic (ARD) squared-exponential factors over a contiguous
slice of the input, and homogeneous polynomial factors ``(a_I . b_I)^p``.
Products and sums of these cover the generic and physics-structured families:

* ``se`` / ``baseline_separable`` -- plain squared exponential with ARD
  lengthscales over the full input.
* ``physics_lagrangian`` -- input ``z = (q, qd)``; evaluates
  ``k_M(q,q')*(qd.qd')^2 + k_G(q,q') + k_S(q,q')*(q.q')^2``, mirroring a
  kinetic / gravitational / elastic energy split.
* ``physics_force`` -- input ``x = (u, q, qd)``; evaluates
  ``k_R(q,q')*(u.u') + k_D(q,q')*(qd.qd')`` for control- and velocity-affine
  forces.
* ``physics_force_pressure`` -- input ``x = (u, q, qd)``; evaluates
  ``u.u' + k_D([u;q],[u';q'])*(qd.qd')`` so the damping characteristics can
  depend on the drive input.

Hyperparameters live in log-space throughout (positivity for free).  The
polynomial factors carry no hyperparameters of their own; their scale is
absorbed by the paired squared-exponential signal variance.

Every public operation accepts either single points (1-D arrays) or batches
(2-D arrays, one point per row) and is a pure function, safe to call
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

FAMILIES = (
    "se",
    "physics_lagrangian",
    "physics_force",
    "physics_force_pressure",
    "baseline_separable",
)


class ShapeError(ValueError):
    """An input does not conform to the kernel spec's dimensions."""


@dataclass(frozen=True)
class KernelSpec:
    """Identifies a kernel family and its input layout.

    ``input_dim`` is the length of a kernel point.  For the physics families
    ``n_q`` is the configuration dimension and the input is partitioned as
    ``(q, qd)`` (Lagrangian) or ``(u, q, qd)`` (force).
    """

    family: str
    input_dim: int
    n_q: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.input_dim <= 0:
            raise ValueError("input_dim must be positive")
        if self.family == "physics_lagrangian" and self.input_dim != 2 * self.n_q:
            raise ValueError("physics_lagrangian needs input_dim == 2*n_q")
        if self.family in ("physics_force", "physics_force_pressure"):
            if self.input_dim != 3 * self.n_q:
                raise ValueError(f"{self.family} needs input_dim == 3*n_q")

    @property
    def sub_kernel_names(self) -> tuple[str, ...]:
        return {
            "se": ("se",),
            "baseline_separable": ("se",),
            "physics_lagrangian": ("mass", "gravity", "stiffness"),
            "physics_force": ("input", "dissipation"),
            "physics_force_pressure": ("dissipation",),
        }[self.family]

    @property
    def lengthscale_counts(self) -> tuple[int, ...]:
        n = self.n_q
        return {
            "se": (self.input_dim,),
            "baseline_separable": (self.input_dim,),
            "physics_lagrangian": (n, n, n),
            "physics_force": (n, n),
            "physics_force_pressure": (2 * n,),
        }[self.family]

    @property
    def n_params(self) -> int:
        return len(self.sub_kernel_names) + sum(self.lengthscale_counts)


def se_kernel(input_dim: int) -> KernelSpec:
    return KernelSpec("se", input_dim)


def baseline_kernel(input_dim: int) -> KernelSpec:
    return KernelSpec("baseline_separable", input_dim)


def physics_lagrangian_kernel(n_q: int) -> KernelSpec:
    return KernelSpec("physics_lagrangian", 2 * n_q, n_q)


def physics_force_kernel(n_q: int) -> KernelSpec:
    return KernelSpec("physics_force", 3 * n_q, n_q)


def physics_force_pressure_kernel(n_q: int) -> KernelSpec:
    return KernelSpec("physics_force_pressure", 3 * n_q, n_q)


def lagrangian_kernel(kind: str, n_q: int) -> KernelSpec:
    """Lagrangian-side kernel over ``(q, qd)`` points: ``generic`` or ``physics``."""
    if kind == "generic":
        return se_kernel(2 * n_q)
    if kind == "physics":
        return physics_lagrangian_kernel(n_q)
    raise ValueError(f"unknown Lagrangian kernel kind {kind!r}")


def force_kernel(kind: str, n_q: int) -> KernelSpec:
    """Force-side kernel over ``(u, q, qd)`` points."""
    if kind == "generic":
        return se_kernel(3 * n_q)
    if kind == "physics":
        return physics_force_kernel(n_q)
    if kind == "physics_pressure":
        return physics_force_pressure_kernel(n_q)
    raise ValueError(f"unknown force kernel kind {kind!r}")


@dataclass(frozen=True)
class HyperParams:
    """Log-space kernel hyperparameters: one signal variance per sub-kernel
    plus ARD lengthscales (one per input dimension per sub-kernel)."""

    log_variances: np.ndarray
    log_lengthscales: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "log_variances", np.asarray(self.log_variances, float))
        object.__setattr__(
            self, "log_lengthscales", tuple(np.asarray(l, float) for l in self.log_lengthscales)
        )
        if not np.all(np.isfinite(self.log_variances)) or not all(
            np.all(np.isfinite(l)) for l in self.log_lengthscales
        ):
            raise ValueError("hyperparameters must be finite")

    def to_vector(self) -> np.ndarray:
        parts = []
        for lv, ls in zip(self.log_variances, self.log_lengthscales):
            parts.append([lv])
            parts.append(ls)
        return np.concatenate(parts)

    @staticmethod
    def from_vector(spec: KernelSpec, vec: np.ndarray) -> "HyperParams":
        vec = np.asarray(vec, float)
        if vec.shape != (spec.n_params,):
            raise ShapeError(f"expected {spec.n_params} parameters, got {vec.shape}")
        lvs, lss, k = [], [], 0
        for count in spec.lengthscale_counts:
            lvs.append(vec[k])
            lss.append(vec[k + 1 : k + 1 + count])
            k += 1 + count
        return HyperParams(np.array(lvs), tuple(lss))

    @staticmethod
    def default(spec: KernelSpec) -> "HyperParams":
        """Unit signal variances and unit lengthscales (all zeros in log-space)."""
        return HyperParams.from_vector(spec, np.zeros(spec.n_params))


def _check_params(spec: KernelSpec, theta: HyperParams):
    if len(theta.log_variances) != len(spec.sub_kernel_names):
        raise ShapeError("hyperparameter count does not match kernel spec")
    for ls, count in zip(theta.log_lengthscales, spec.lengthscale_counts):
        if len(ls) != count:
            raise ShapeError("lengthscale count does not match kernel spec")


# --------------------------------------------------------------------------
# Batched building blocks.  A `_Parts` holds the kernel value and, depending
# on the requested derivative order, gradients w.r.t. both arguments and the
# cross-Hessian d^2k/da db, all over the full input dimension.
# --------------------------------------------------------------------------


class _Parts(NamedTuple):
    val: np.ndarray  # (M, P)
    ga: np.ndarray | None  # (M, P, d)
    gb: np.ndarray | None  # (M, P, d)
    hab: np.ndarray | None  # (M, P, d, d)


def _se_parts(a, b, sl, log_var, log_ls, d, order) -> _Parts:
    av = a[:, sl]
    bv = b[:, sl]
    ls = np.exp(log_ls)
    diff = (av[:, None, :] - bv[None, :, :]) / ls
    val = np.exp(log_var) * np.exp(-0.5 * np.sum(diff * diff, axis=-1))
    if order == 0:
        return _Parts(val, None, None, None)
    scaled = diff / ls  # (a-b)/ls^2
    m, p = val.shape
    ga = np.zeros((m, p, d))
    gb = np.zeros((m, p, d))
    ga[:, :, sl] = -scaled * val[..., None]
    gb[:, :, sl] = scaled * val[..., None]
    if order == 1:
        return _Parts(val, ga, gb, None)
    hab = np.zeros((m, p, d, d))
    k = av.shape[1]
    hab[:, :, sl, sl] = val[..., None, None] * (
        np.eye(k) / ls**2 - scaled[..., :, None] * scaled[..., None, :]
    )
    return _Parts(val, ga, gb, hab)


def _dot_parts(a, b, sl, power, d, order) -> _Parts:
    av = a[:, sl]
    bv = b[:, sl]
    s = av @ bv.T
    m, p = s.shape
    k = av.shape[1]
    if power == 1:
        val = s
        if order == 0:
            return _Parts(val, None, None, None)
        ga = np.zeros((m, p, d))
        gb = np.zeros((m, p, d))
        ga[:, :, sl] = np.broadcast_to(bv[None, :, :], (m, p, k))
        gb[:, :, sl] = np.broadcast_to(av[:, None, :], (m, p, k))
        if order == 1:
            return _Parts(val, ga, gb, None)
        hab = np.zeros((m, p, d, d))
        hab[:, :, sl, sl] = np.broadcast_to(np.eye(k), (m, p, k, k))
        return _Parts(val, ga, gb, hab)
    if power == 2:
        val = s * s
        if order == 0:
            return _Parts(val, None, None, None)
        ga = np.zeros((m, p, d))
        gb = np.zeros((m, p, d))
        ga[:, :, sl] = 2.0 * s[..., None] * bv[None, :, :]
        gb[:, :, sl] = 2.0 * s[..., None] * av[:, None, :]
        if order == 1:
            return _Parts(val, ga, gb, None)
        hab = np.zeros((m, p, d, d))
        # d^2(s^2)/da_i db_j = 2 (b_i a_j + s delta_ij)
        hab[:, :, sl, sl] = 2.0 * (
            bv[None, :, :, None] * av[:, None, None, :] + s[..., None, None] * np.eye(k)
        )
        return _Parts(val, ga, gb, hab)
    raise ValueError("power must be 1 or 2")


def _prod(x: _Parts, y: _Parts, order) -> _Parts:
    val = x.val * y.val
    if order == 0:
        return _Parts(val, None, None, None)
    ga = x.ga * y.val[..., None] + y.ga * x.val[..., None]
    gb = x.gb * y.val[..., None] + y.gb * x.val[..., None]
    if order == 1:
        return _Parts(val, ga, gb, None)
    hab = (
        x.hab * y.val[..., None, None]
        + y.hab * x.val[..., None, None]
        + x.ga[..., :, None] * y.gb[..., None, :]
        + y.ga[..., :, None] * x.gb[..., None, :]
    )
    return _Parts(val, ga, gb, hab)


def _sum(parts: list[_Parts], order) -> _Parts:
    val = sum(p.val for p in parts)
    if order == 0:
        return _Parts(val, None, None, None)
    ga = sum(p.ga for p in parts)
    gb = sum(p.gb for p in parts)
    if order == 1:
        return _Parts(val, ga, gb, None)
    return _Parts(val, ga, gb, sum(p.hab for p in parts))


def _parts(spec: KernelSpec, theta: HyperParams, a, b, order) -> _Parts:
    _check_params(spec, theta)
    d = spec.input_dim
    lv = theta.log_variances
    ls = theta.log_lengthscales
    n = spec.n_q
    if spec.family in ("se", "baseline_separable"):
        return _se_parts(a, b, slice(0, d), lv[0], ls[0], d, order)
    if spec.family == "physics_lagrangian":
        q, qd = slice(0, n), slice(n, 2 * n)
        mass = _prod(_se_parts(a, b, q, lv[0], ls[0], d, order), _dot_parts(a, b, qd, 2, d, order), order)
        grav = _se_parts(a, b, q, lv[1], ls[1], d, order)
        stif = _prod(_se_parts(a, b, q, lv[2], ls[2], d, order), _dot_parts(a, b, q, 2, d, order), order)
        return _sum([mass, grav, stif], order)
    if spec.family == "physics_force":
        u, q, qd = slice(0, n), slice(n, 2 * n), slice(2 * n, 3 * n)
        inp = _prod(_se_parts(a, b, q, lv[0], ls[0], d, order), _dot_parts(a, b, u, 1, d, order), order)
        dis = _prod(_se_parts(a, b, q, lv[1], ls[1], d, order), _dot_parts(a, b, qd, 1, d, order), order)
        return _sum([inp, dis], order)
    if spec.family == "physics_force_pressure":
        u, uq, qd = slice(0, n), slice(0, 2 * n), slice(2 * n, 3 * n)
        inp = _dot_parts(a, b, u, 1, d, order)
        dis = _prod(_se_parts(a, b, uq, lv[0], ls[0], d, order), _dot_parts(a, b, qd, 1, d, order), order)
        return _sum([inp, dis], order)
    raise ValueError(spec.family)


def _as_batch(spec: KernelSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"point has dimension {x.shape[-1]}, spec wants {spec.input_dim}")
    return x, single


# --------------------------------------------------------------------------
# Public operations
# --------------------------------------------------------------------------


def kernel_eval(spec: KernelSpec, theta: HyperParams, a, b):
    """Covariance between ``a`` and ``b``; batched inputs give the cross matrix."""
    a, sa = _as_batch(spec, a)
    b, sb = _as_batch(spec, b)
    val = _parts(spec, theta, a, b, 0).val
    return float(val[0, 0]) if sa and sb else val


def kernel_grad(spec: KernelSpec, theta: HyperParams, a, b, wrt: str = "a"):
    """Gradient of the kernel w.r.t. the first (``"a"``) or second (``"b"``) argument."""
    if wrt not in ("a", "b"):
        raise ValueError("wrt must be 'a' or 'b'")
    a, sa = _as_batch(spec, a)
    b, sb = _as_batch(spec, b)
    p = _parts(spec, theta, a, b, 1)
    g = p.ga if wrt == "a" else p.gb
    return g[0, 0] if sa and sb else g


def kernel_cross_hessian(spec: KernelSpec, theta: HyperParams, a, b):
    """Matrix of second derivatives ``d^2 k / da_i db_j``."""
    a, sa = _as_batch(spec, a)
    b, sb = _as_batch(spec, b)
    h = _parts(spec, theta, a, b, 2).hab
    return h[0, 0] if sa and sb else h


def fd_check(spec: KernelSpec, theta: HyperParams, a, b, eps: float = 1e-5) -> float:
    """Max relative deviation of the analytic gradient and cross-Hessian from
    central finite differences of ``kernel_eval``.  Test utility.

    Deviations are measured relative to the magnitude of the kernel jet
    (value, gradients, Hessian) at these points, floored at 1; per-entry
    normalization would let float64 roundoff in the second-difference stencil
    dominate wherever an entry is small compared to the kernel value.
    """
    if not (1e-8 < eps < 1e-2):
        raise ValueError("eps must lie in (1e-8, 1e-2)")
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    d = spec.input_dim

    def k(x, y):
        return kernel_eval(spec, theta, x, y)

    def basis(i):
        e = np.zeros(d)
        e[i] = eps
        return e

    ga = kernel_grad(spec, theta, a, b, "a")
    gb = kernel_grad(spec, theta, a, b, "b")
    hab = kernel_cross_hessian(spec, theta, a, b)
    scale = max(
        1.0,
        abs(k(a, b)),
        np.abs(ga).max(),
        np.abs(gb).max(),
        np.abs(hab).max(),
    )
    worst = 0.0
    for i in range(d):
        ei = basis(i)
        fd = (k(a + ei, b) - k(a - ei, b)) / (2 * eps)
        worst = max(worst, abs(fd - ga[i]) / scale)
        fd = (k(a, b + ei) - k(a, b - ei)) / (2 * eps)
        worst = max(worst, abs(fd - gb[i]) / scale)
        for j in range(d):
            ej = basis(j)
            fd = (
                k(a + ei, b + ej) - k(a + ei, b - ej) - k(a - ei, b + ej) + k(a - ei, b - ej)
            ) / (4 * eps * eps)
            worst = max(worst, abs(fd - hab[i, j]) / scale)
    return worst
