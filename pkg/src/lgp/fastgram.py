"""Fast evaluation of the residual-residual Gram blocks.

Hyperparameter optimization evaluates the Gram matrix at many nearby
hyperparameter vectors (finite-difference gradients), so this module computes
the dominant blocks family-by-family with two structural shortcuts the
generic jet machinery cannot exploit:

* every kernel family is a sum of sub-kernels, each a unit-variance shape
  times ``exp(log_variance)``; contributions are cached per sub-kernel at
  unit variance, making signal-variance perturbations free rescalings and
  lengthscale perturbations local to one sub-kernel;
* the residual operator's gradient weights are ``[c I, +/- s I]``, so the
  weighted cross-Hessian contraction reduces to scalar combinations of the
  four (q, qd) derivative blocks, evaluated componentwise without
  materializing full jets.

Results are identical (to floating-point roundoff) to the generic path in
:mod:`lgp.operators`; the equivalence is covered by tests.
"""

from __future__ import annotations

import numpy as np

from .kernels import HyperParams, KernelSpec
from .operators import CONTINUOUS, InputScaling, OperatorMode, SegmentData


class _Memo:
    """Small FIFO cache keyed by lengthscale bytes."""

    def __init__(self, cap: int = 12):
        self.cap = cap
        self.data: dict[bytes, np.ndarray] = {}

    def get(self, key: bytes):
        return self.data.get(key)

    def put(self, key: bytes, value: np.ndarray):
        if len(self.data) >= self.cap:
            self.data.pop(next(iter(self.data)))
        self.data[key] = value


def _weights(mode: OperatorMode) -> tuple[float, float]:
    """Scalar block weights (c, s) of the residual gradient matrices
    ``[c I, +/- s I]`` acting on (d/dq, d/dqd) at a lifted segment."""
    if mode.tag == CONTINUOUS:
        return mode.h / 2.0, 1.0
    return 0.5, 1.0 / mode.h


class ResidualGramBuilder:
    """Precomputes segment geometry once; evaluates the Lagrangian and force
    residual-residual blocks for arbitrary hyperparameters."""

    def __init__(
        self,
        mode: OperatorMode,
        k_l: KernelSpec,
        k_f: KernelSpec,
        sd: SegmentData,
        scaling_l: InputScaling,
        scaling_f: InputScaling,
    ):
        self.k_l = k_l
        self.k_f = k_f
        self.n_q = sd.w_left.shape[0]
        self.n = sd.z_left.shape[0]
        n, n_q = self.n, self.n_q

        z = np.vstack([sd.z_left, sd.z_right])
        zs = (z - scaling_l.shift) / scaling_l.scale
        self.zq = zs[:, :n_q]
        self.zv = zs[:, n_q:]
        self.inv_sq = 1.0 / scaling_l.scale[:n_q]
        self.inv_sv = 1.0 / scaling_l.scale[n_q:]

        x = np.vstack([sd.x_left, sd.x_right])
        self.xs = (x - scaling_f.shift) / scaling_f.scale

        self.c, self.s = _weights(mode)
        m = 2 * n
        sign = np.ones(m)
        sign[n:] = -1.0
        self.sign_row = sign[:, None]
        self.sign_col = sign[None, :]
        self.w_force = sd.w_force

        # dot products of standardized velocity/configuration slots
        self.sv = self.zv @ self.zv.T
        self.sq = self.zq @ self.zq.T
        self._memo_l = [_Memo() for _ in k_l.sub_kernel_names]
        self._memo_f = [_Memo() for _ in k_f.sub_kernel_names]
        self._fixed_force: np.ndarray | None = None

    # -- shared pieces ------------------------------------------------------

    def _se(self, pts: np.ndarray, ls: np.ndarray) -> np.ndarray:
        d = pts[:, None, :] - pts[None, :, :]
        return np.exp(-0.5 * np.einsum("ijc,ijc->ij", d / ls, d / ls)), d

    def _fold(self, b: np.ndarray) -> np.ndarray:
        n = self.n
        return b[:n, :n] + b[:n, n:] + b[n:, :n] + b[n:, n:]

    def _contract(self, hqq, hqv, hvq, hvv) -> np.ndarray:
        """Combine (M, M) component blocks with the operator weights and fold
        the left/right segment quadrants; any argument may be None (zero)."""
        c, s = self.c, self.s
        b = 0.0
        if hqq is not None:
            b = b + c * c * hqq
        if hqv is not None:
            b = b + (c * s) * self.sign_col * hqv
        if hvq is not None:
            b = b + (c * s) * self.sign_row * hvq
        if hvv is not None:
            b = b + (s * s) * (self.sign_row * self.sign_col) * hvv
        return self._fold(b)

    def _assemble(self, blocks) -> np.ndarray:
        """(n_q, n_q) grid of (N, N) arrays -> (N n_q, N n_q)."""
        n, n_q = self.n, self.n_q
        out = np.zeros((n, n_q, n, n_q))
        for a in range(n_q):
            for b in range(n_q):
                out[:, a, :, b] = blocks[a][b]
        return out.reshape(n * n_q, n * n_q)

    # -- Lagrangian families --------------------------------------------------

    def lag_gram(self, th_l: HyperParams) -> np.ndarray:
        out = 0.0
        for j, (lv, ls) in enumerate(zip(th_l.log_variances, th_l.log_lengthscales)):
            key = ls.tobytes()
            unit = self._memo_l[j].get(key)
            if unit is None:
                unit = self._lag_sub(j, np.exp(ls))
                self._memo_l[j].put(key, unit)
            out = out + np.exp(lv) * unit
        return out

    def _lag_sub(self, j: int, ls: np.ndarray) -> np.ndarray:
        fam = self.k_l.family
        if fam in ("se", "baseline_separable"):
            return self._lag_sub_se(ls)
        if fam == "physics_lagrangian":
            return (self._lag_sub_mass, self._lag_sub_gravity, self._lag_sub_stiffness)[j](ls)
        raise ValueError(f"unsupported Lagrangian family {fam!r}")

    def _lag_sub_se(self, ls: np.ndarray) -> np.ndarray:
        n_q = self.n_q
        pts = np.hstack([self.zq, self.zv])
        e, d = self._se(pts, ls)
        inv = np.concatenate([self.inv_sq, self.inv_sv])
        a_fac = [d[:, :, c] / ls[c] ** 2 * inv[c] for c in range(2 * n_q)]
        blocks = [[None] * n_q for _ in range(n_q)]
        for a in range(n_q):
            for b in range(n_q):
                av, bv = a + n_q, b + n_q
                hqq = e * (-a_fac[a] * a_fac[b])
                hvv = e * (-a_fac[av] * a_fac[bv])
                if a == b:
                    hqq = hqq + e * (inv[a] * inv[b] / ls[a] ** 2)
                    hvv = hvv + e * (inv[av] * inv[bv] / ls[av] ** 2)
                hqv = e * (-a_fac[a] * a_fac[bv])
                hvq = e * (-a_fac[av] * a_fac[b])
                blocks[a][b] = self._contract(hqq, hqv, hvq, hvv)
        return self._assemble(blocks)

    def _lag_sub_mass(self, ls: np.ndarray) -> np.ndarray:
        # se(q) * (v . v')^2
        n_q = self.n_q
        e, d = self._se(self.zq, ls)
        a_fac = [d[:, :, c] / ls[c] ** 2 * self.inv_sq[c] for c in range(n_q)]
        g = self.sv * self.sv
        gv_row = [2.0 * self.sv * (self.zv[None, :, a] * self.inv_sv[a]) for a in range(n_q)]
        gv_col = [2.0 * self.sv * (self.zv[:, None, b] * self.inv_sv[b]) for b in range(n_q)]
        blocks = [[None] * n_q for _ in range(n_q)]
        for a in range(n_q):
            for b in range(n_q):
                hqq = e * (-a_fac[a] * a_fac[b]) * g
                if a == b:
                    hqq = hqq + e * (self.inv_sq[a] * self.inv_sq[b] / ls[a] ** 2) * g
                hqv = (-a_fac[a] * e) * gv_col[b]
                hvq = (a_fac[b] * e) * gv_row[a]
                hvv = 2.0 * e * (
                    (self.zv[None, :, a] * self.inv_sv[a]) * (self.zv[:, None, b] * self.inv_sv[b])
                )
                if a == b:
                    hvv = hvv + 2.0 * e * self.sv * (self.inv_sv[a] * self.inv_sv[b])
                blocks[a][b] = self._contract(hqq, hqv, hvq, hvv)
        return self._assemble(blocks)

    def _lag_sub_gravity(self, ls: np.ndarray) -> np.ndarray:
        n_q = self.n_q
        e, d = self._se(self.zq, ls)
        a_fac = [d[:, :, c] / ls[c] ** 2 * self.inv_sq[c] for c in range(n_q)]
        blocks = [[None] * n_q for _ in range(n_q)]
        for a in range(n_q):
            for b in range(n_q):
                hqq = e * (-a_fac[a] * a_fac[b])
                if a == b:
                    hqq = hqq + e * (self.inv_sq[a] * self.inv_sq[b] / ls[a] ** 2)
                blocks[a][b] = self._contract(hqq, None, None, None)
        return self._assemble(blocks)

    def _lag_sub_stiffness(self, ls: np.ndarray) -> np.ndarray:
        # se(q) * (q . q')^2: both factors act on the configuration slot
        n_q = self.n_q
        e, d = self._se(self.zq, ls)
        a_fac = [d[:, :, c] / ls[c] ** 2 * self.inv_sq[c] for c in range(n_q)]
        g = self.sq * self.sq
        gq_row = [2.0 * self.sq * (self.zq[None, :, a] * self.inv_sq[a]) for a in range(n_q)]
        gq_col = [2.0 * self.sq * (self.zq[:, None, b] * self.inv_sq[b]) for b in range(n_q)]
        blocks = [[None] * n_q for _ in range(n_q)]
        for a in range(n_q):
            for b in range(n_q):
                f_qq = e * (-a_fac[a] * a_fac[b])
                if a == b:
                    f_qq = f_qq + e * (self.inv_sq[a] * self.inv_sq[b] / ls[a] ** 2)
                g_qq = 2.0 * (
                    (self.zq[None, :, a] * self.inv_sq[a]) * (self.zq[:, None, b] * self.inv_sq[b])
                )
                if a == b:
                    g_qq = g_qq + 2.0 * self.sq * (self.inv_sq[a] * self.inv_sq[b])
                hqq = (
                    f_qq * g
                    + (-a_fac[a] * e) * gq_col[b]
                    + gq_row[a] * (a_fac[b] * e)
                    + e * g_qq
                )
                blocks[a][b] = self._contract(hqq, None, None, None)
        return self._assemble(blocks)

    # -- force families --------------------------------------------------------

    def force_gram(self, th_f: HyperParams) -> np.ndarray:
        vals = 0.0
        for j, (lv, ls) in enumerate(zip(th_f.log_variances, th_f.log_lengthscales)):
            key = ls.tobytes()
            unit = self._memo_f[j].get(key)
            if unit is None:
                unit = self._force_sub(j, np.exp(ls))
                self._memo_f[j].put(key, unit)
            vals = vals + np.exp(lv) * unit
        if self.k_f.family == "physics_force_pressure":
            if self._fixed_force is None:
                n_q = self.n_q
                su = self.xs[:, :n_q] @ self.xs[:, :n_q].T
                self._fixed_force = self._fold(su)
            vals = vals + self._fixed_force
        return self.w_force**2 * np.kron(vals, np.eye(self.n_q))

    def _force_sub(self, j: int, ls: np.ndarray) -> np.ndarray:
        fam = self.k_f.family
        n_q = self.n_q
        if fam in ("se", "baseline_separable"):
            e, _ = self._se(self.xs, ls)
            return self._fold(e)
        if fam == "physics_force":
            q = self.xs[:, n_q : 2 * n_q]
            e, _ = self._se(q, ls)
            slot = self.xs[:, :n_q] if j == 0 else self.xs[:, 2 * n_q :]
            return self._fold(e * (slot @ slot.T))
        if fam == "physics_force_pressure":
            uq = self.xs[:, : 2 * n_q]
            e, _ = self._se(uq, ls)
            v = self.xs[:, 2 * n_q :]
            return self._fold(e * (v @ v.T))
        raise ValueError(f"unsupported force family {fam!r}")
