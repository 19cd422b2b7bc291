"""Augmented Gram system assembly, factorization, and posterior queries.

The conditioning matrix stacks, for N training triplets, the residual-operator
covariance blocks (with slack ``sigma`` on their diagonal), followed by the
noiseless normalization rows: Lagrangian evaluation + momentum at the anchor,
then force evaluation.  The pseudo-measurement vector is zero on residual
rows and ``[n_l, n_m, n_f]`` on the normalization rows.

Kernel inputs are standardized component-wise with training statistics; the
standardization lives here and is threaded into the operator layer, so all
posterior quantities are in raw units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from . import operators as ops
from .kernels import HyperParams, KernelSpec, ShapeError, kernel_eval
from .operators import (
    CONTINUOUS,
    DISCRETE,
    InputScaling,
    LinearFunctional,
    NormalizationSpec,
    OperatorMode,
    Triplet,
)

MODEL_SCHEMA = "lgp-model"
MODEL_VERSION = 1
STD_FLOOR = 1e-12


class AssemblyError(RuntimeError):
    """A covariance block came out non-finite."""


class SingularSystemError(RuntimeError):
    """Neither factorization strategy produced a usable solve."""


class UnsupportedStepError(RuntimeError):
    """Discrete-mode models only predict at the training step size."""


@dataclass(frozen=True)
class Standardization:
    """Per-component means and standard deviations of configurations,
    finite-difference velocities, and inputs."""

    q_mean: np.ndarray
    q_std: np.ndarray
    qd_mean: np.ndarray
    qd_std: np.ndarray
    u_mean: np.ndarray
    u_std: np.ndarray

    @staticmethod
    def identity(n_q: int) -> "Standardization":
        z, o = np.zeros(n_q), np.ones(n_q)
        return Standardization(z, o, z, o, z, o)

    @staticmethod
    def from_arrays(q_prev, q_curr, q_next, u_prev, u_curr, h) -> "Standardization":
        qs = np.vstack([q_prev, q_curr, q_next])
        qds = np.vstack([(q_curr - q_prev) / h, (q_next - q_curr) / h])
        us = np.vstack([u_prev, u_curr])

        def stats(x):
            return x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR)

        qm, qsd = stats(qs)
        qdm, qdsd = stats(qds)
        um, usd = stats(us)
        return Standardization(qm, qsd, qdm, qdsd, um, usd)

    def lagrangian_scaling(self) -> InputScaling:
        return InputScaling(
            np.concatenate([self.q_mean, self.qd_mean]),
            np.concatenate([self.q_std, self.qd_std]),
        )

    def force_scaling(self) -> InputScaling:
        return InputScaling(
            np.concatenate([self.u_mean, self.q_mean, self.qd_mean]),
            np.concatenate([self.u_std, self.q_std, self.qd_std]),
        )


@dataclass
class Dataset:
    """Training triplets with paired inputs, the training step size, and the
    standardization statistics derived from them."""

    q_prev: np.ndarray
    q_curr: np.ndarray
    q_next: np.ndarray
    u_prev: np.ndarray
    u_curr: np.ndarray
    h: float
    standardization: Standardization
    source: str = ""

    def __post_init__(self):
        arrs = [np.atleast_2d(np.asarray(a, float)) for a in
                (self.q_prev, self.q_curr, self.q_next, self.u_prev, self.u_curr)]
        self.q_prev, self.q_curr, self.q_next, self.u_prev, self.u_curr = arrs
        if not self.h > 0:
            raise ops.DomainError("training step size must be positive")
        shape = self.q_prev.shape
        if any(a.shape != shape for a in arrs[1:]):
            raise ShapeError("dataset arrays must share shape (N, n_q)")
        if any(not np.all(np.isfinite(a)) for a in arrs):
            raise ValueError("dataset contains non-finite values")

    @property
    def n(self) -> int:
        return self.q_prev.shape[0]

    @property
    def n_q(self) -> int:
        return self.q_prev.shape[1]

    def triplet(self, i: int) -> Triplet:
        return Triplet(self.q_prev[i], self.q_curr[i], self.q_next[i], self.u_prev[i], self.u_curr[i])

    @staticmethod
    def from_arrays(q_prev, q_curr, q_next, u_prev, u_curr, h, source="") -> "Dataset":
        std = Standardization.from_arrays(
            np.atleast_2d(q_prev), np.atleast_2d(q_curr), np.atleast_2d(q_next),
            np.atleast_2d(u_prev), np.atleast_2d(u_curr), h,
        )
        return Dataset(q_prev, q_curr, q_next, u_prev, u_curr, h, std, source)

    @staticmethod
    def from_triplets(triplets, h, source="") -> "Dataset":
        if not triplets:
            raise ValueError("need at least one triplet")
        return Dataset.from_arrays(
            np.stack([t.q_prev for t in triplets]),
            np.stack([t.q_curr for t in triplets]),
            np.stack([t.q_next for t in triplets]),
            np.stack([t.u_prev for t in triplets]),
            np.stack([t.u_curr for t in triplets]),
            h,
            source,
        )

    @staticmethod
    def empty(n_q: int, h: float) -> "Dataset":
        """Anchor-only dataset (normalization rows and nothing else)."""
        z = np.zeros((0, n_q))
        return Dataset(z, z, z, z, z, h, Standardization.identity(n_q), "empty")


@dataclass
class GramSystem:
    """The augmented covariance matrix, its pseudo-measurements, and a lazily
    computed factorization."""

    theta_mat: np.ndarray
    y_bar: np.ndarray
    n_q: int
    n_data: int
    jitter_used: float = 0.0
    method: str = ""
    _factor: tuple | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.theta_mat.shape[0]

    def logdet(self) -> float:
        self._ensure_factor()
        kind, data = self._factor
        if kind == "cholesky":
            return 2.0 * float(np.sum(np.log(np.diag(data[0]))))
        vals = data[0]
        return float(np.sum(np.log(vals)))

    def _ensure_factor(self):
        if self._factor is not None:
            return
        a = self.theta_mat
        n = self.size
        base = 1e-10 * np.trace(a) / n
        for jitter in [0.0] + [base * 10.0**k for k in range(6)]:
            try:
                c = scipy.linalg.cho_factor(a + jitter * np.eye(n), lower=True)
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
                continue
            self._factor = ("cholesky", c)
            self.method = "cholesky"
            self.jitter_used = jitter
            return
        self._force_pseudoinverse()

    def _force_pseudoinverse(self):
        a = self.theta_mat
        vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
        cutoff = 1e-12 * max(np.abs(vals).max(), STD_FLOOR)
        keep = vals > cutoff
        if not np.any(keep):
            raise SingularSystemError("all eigenvalues below the pseudo-inverse cutoff")
        self._factor = ("eigh", (vals[keep], vecs[:, keep]))
        self.method = "pseudoinverse"
        self.jitter_used = 0.0


def solve(gram: GramSystem, rhs: np.ndarray) -> np.ndarray:
    """Solve ``theta_mat @ x = rhs``, with adaptive-jitter Cholesky first and
    an eigendecomposition pseudo-inverse as fallback."""
    rhs = np.asarray(rhs, float)
    if rhs.shape[0] != gram.size:
        raise ShapeError("right-hand side length does not match the Gram system")
    if not np.all(np.isfinite(rhs)):
        raise ValueError("right-hand side contains non-finite values")
    gram._ensure_factor()
    kind, data = gram._factor
    if kind == "cholesky":
        return scipy.linalg.cho_solve(data, rhs)
    vals, vecs = data
    return vecs @ ((vecs.T @ rhs) / vals)


def _finite_or_raise(name, arr):
    if not np.all(np.isfinite(arr)):
        raise AssemblyError(f"non-finite values in the {name} block")
    return arr


def assemble(
    dataset: Dataset,
    k_l: KernelSpec,
    th_l: HyperParams,
    k_f: KernelSpec,
    th_f: HyperParams,
    norm: NormalizationSpec,
    sigma: float,
    mode: OperatorMode,
) -> GramSystem:
    """Build the augmented Gram matrix and pseudo-measurement vector."""
    if sigma < 0:
        raise ops.DomainError("slack must be non-negative")
    n, n_q = dataset.n, dataset.n_q
    if norm.n_q != n_q:
        raise ShapeError("normalization dimension does not match the dataset")
    sc_l = dataset.standardization.lagrangian_scaling()
    sc_f = dataset.standardization.force_scaling()
    size = (n + 2) * n_q + 1
    a = np.zeros((size, size))
    nd = n * n_q
    nf = ops.norm_functional(mode, norm)

    if n > 0:
        sd = ops.segment_data(mode, dataset.q_prev, dataset.q_curr, dataset.q_next,
                              dataset.u_prev, dataset.u_curr)
        rr = _finite_or_raise(
            "residual-residual",
            ops.residual_gram_lagrangian(k_l, th_l, sd, sd, sc_l)
            + ops.residual_gram_force(k_f, th_f, sd, sd, sc_f),
        )
        a[:nd, :nd] = rr + sigma * np.eye(nd)
        rl = _finite_or_raise(
            "residual-normalization (Lagrangian)",
            ops.residual_cross_functional(k_l, th_l, sd, nf, sc_l),
        )
        a[:nd, nd : nd + 1 + n_q] = rl
        a[nd : nd + 1 + n_q, :nd] = rl.T
        rf = _finite_or_raise(
            "residual-normalization (force)",
            ops.residual_cross_force(k_f, th_f, sd, norm.anchor_f[None, :], [1.0], sc_f),
        )
        rf_rows = np.kron(rf[:, None], np.eye(n_q))
        a[:nd, nd + 1 + n_q :] = rf_rows
        a[nd + 1 + n_q :, :nd] = rf_rows.T

    ll, ff = ops.normalization_blocks(mode, k_l, th_l, k_f, th_f, norm,
                                      scaling_l=sc_l, scaling_f=sc_f)
    _finite_or_raise("Lagrangian normalization corner", ll)
    _finite_or_raise("force normalization corner", ff)
    a[nd : nd + 1 + n_q, nd : nd + 1 + n_q] = ll
    a[nd + 1 + n_q :, nd + 1 + n_q :] = ff
    # the Lagrangian/force normalization coupling corner is identically zero

    a = 0.5 * (a + a.T)
    y = np.zeros(size)
    y[nd] = norm.n_l
    y[nd + 1 : nd + 1 + n_q] = norm.n_m
    y[nd + 1 + n_q :] = norm.n_f
    return GramSystem(a, y, n_q=n_q, n_data=n)


@dataclass
class TrainedLGP:
    """A conditioned model: everything needed for posterior queries.

    Immutable by contract after construction; all posterior queries are
    read-only and safe to run concurrently.
    """

    mode: OperatorMode
    kernel_l: KernelSpec
    theta_l: HyperParams
    kernel_f: KernelSpec
    theta_f: HyperParams
    normalization: NormalizationSpec
    sigma: float
    dataset: Dataset
    gram: GramSystem
    alpha: np.ndarray
    _sd: ops.SegmentData | None = field(default=None, repr=False)

    @property
    def n_q(self) -> int:
        return self.dataset.n_q

    @property
    def h_train(self) -> float:
        return self.dataset.h

    @property
    def scaling_l(self) -> InputScaling:
        return self.dataset.standardization.lagrangian_scaling()

    @property
    def scaling_f(self) -> InputScaling:
        return self.dataset.standardization.force_scaling()

    def segments(self) -> ops.SegmentData | None:
        if self.dataset.n == 0:
            return None
        if self._sd is None:
            d = self.dataset
            self._sd = ops.segment_data(self.mode, d.q_prev, d.q_curr, d.q_next, d.u_prev, d.u_curr)
        return self._sd


def build_model(
    dataset: Dataset,
    k_l: KernelSpec,
    th_l: HyperParams,
    k_f: KernelSpec,
    th_f: HyperParams,
    norm: NormalizationSpec,
    sigma: float,
    mode: OperatorMode,
) -> TrainedLGP:
    """Assemble and solve the conditioning system for fixed hyperparameters."""
    if mode.tag == DISCRETE and not np.isclose(mode.h, dataset.h, rtol=1e-12):
        raise UnsupportedStepError("discrete mode must be assembled at the training step")
    gram = assemble(dataset, k_l, th_l, k_f, th_f, norm, sigma, mode)
    alpha = solve(gram, gram.y_bar)
    resid = np.linalg.norm(gram.theta_mat @ alpha - gram.y_bar)
    if gram.method == "cholesky" and resid > 1e-6 * max(np.linalg.norm(gram.y_bar), 1e-300):
        # jittered factor too inaccurate; fall back to the least-squares optimum
        gram._force_pseudoinverse()
        alpha = solve(gram, gram.y_bar)
    return TrainedLGP(mode, k_l, th_l, k_f, th_f, norm, sigma, dataset, gram, alpha)


@dataclass(frozen=True)
class PosteriorEval:
    """Posterior mean and (clamped) variance of one query."""

    mean: float | np.ndarray
    variance: float | np.ndarray


def _clamp_scalar(v: float) -> float:
    return max(float(v), 0.0)


def _clamp_cov(m: np.ndarray) -> np.ndarray:
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    return (vecs * np.maximum(vals, 0.0)) @ vecs.T


def _lag_cross_rows(model: TrainedLGP, fq: LinearFunctional) -> np.ndarray:
    """Covariance of every conditioning row with a Lagrangian-side functional."""
    n, n_q = model.dataset.n, model.n_q
    out = np.zeros((model.gram.size, fq.n_rows))
    sd = model.segments()
    if sd is not None:
        out[: n * n_q] = ops.residual_cross_functional(model.kernel_l, model.theta_l, sd, fq, model.scaling_l)
    nf = ops.norm_functional(model.mode, model.normalization)
    out[n * n_q : n * n_q + 1 + n_q] = ops.functional_cov(
        model.kernel_l, model.theta_l, nf, fq, model.scaling_l
    )
    return out


def _force_cross_rows(model: TrainedLGP, pts: np.ndarray, w) -> np.ndarray:
    """Covariance of every conditioning row with a force-side functional
    ``sum_t w_t F(x_t)`` (an identity-multiple per block), shape (size, n_q)."""
    n, n_q = model.dataset.n, model.n_q
    out = np.zeros((model.gram.size, n_q))
    sd = model.segments()
    if sd is not None:
        s = ops.residual_cross_force(model.kernel_f, model.theta_f, sd, pts, w, model.scaling_f)
        out[: n * n_q] = np.kron(s[:, None], np.eye(n_q))
    s_anchor = ops.force_scalar_cov(
        model.kernel_f, model.theta_f, model.normalization.anchor_f[None, :], [1.0], pts, w,
        model.scaling_f,
    )
    out[n * n_q + 1 + n_q :] = s_anchor * np.eye(n_q)
    return out


def _lift_query(model: TrainedLGP, query) -> np.ndarray:
    return ops._lift_query(model.mode, query)


def posterior_lagrangian(model: TrainedLGP, query) -> PosteriorEval:
    """Posterior of the (discrete or continuous) Lagrangian at a query point.

    Discrete queries are configuration pairs ``(q_a, q_b)``; continuous
    queries are states ``(q, qd)``.
    """
    z = _lift_query(model, query)
    if z.shape[0] != 2 * model.n_q:
        raise ShapeError("query does not match the model dimension")
    fq = ops.eval_functional(z)
    c = _lag_cross_rows(model, fq)[:, 0]
    mean = float(c @ model.alpha)
    sc = model.scaling_l
    zs = (z - sc.shift) / sc.scale
    prior = kernel_eval(model.kernel_l, model.theta_l, zs, zs)
    var = _clamp_scalar(prior - c @ solve(model.gram, c))
    return PosteriorEval(mean, var)


def posterior_force(model: TrainedLGP, query) -> PosteriorEval:
    """Posterior of the force at a query point ``(u, q, qd)`` (discrete:
    ``(u, q_a, q_b)``); vector mean with an (n_q, n_q) covariance."""
    x = ops._lift_force_query(model.mode, query)
    if x.shape[0] != 3 * model.n_q:
        raise ShapeError("query does not match the model dimension")
    rows = _force_cross_rows(model, x[None, :], [1.0])
    mean = rows.T @ model.alpha
    sc = model.scaling_f
    xs = (x - sc.shift) / sc.scale
    prior = kernel_eval(model.kernel_f, model.theta_f, xs, xs) * np.eye(model.n_q)
    cov = _clamp_cov(prior - rows.T @ solve(model.gram, rows))
    return PosteriorEval(mean, cov)


def _query_mode(model: TrainedLGP, h_pred: float | None) -> OperatorMode:
    if h_pred is None:
        h_pred = model.h_train
    if not h_pred > 0:
        raise ops.DomainError("prediction step must be positive")
    if model.mode.tag == DISCRETE and not np.isclose(h_pred, model.h_train, rtol=1e-9):
        raise UnsupportedStepError(
            f"discrete-mode model trained at h={model.h_train} cannot predict at h={h_pred}"
        )
    return model.mode.with_step(h_pred)


def _residual_cross_rows(model: TrainedLGP, cand: Triplet, qmode: OperatorMode) -> np.ndarray:
    fq = ops.residual_functional(qmode, cand)
    rows = _lag_cross_rows(model, fq)
    pts = ops._force_points(qmode, cand)
    w = np.full(2, ops._force_weight(qmode))
    rows += _force_cross_rows(model, pts, w)
    return rows


def residual_mean(model: TrainedLGP, cand: Triplet, h_pred: float | None = None) -> np.ndarray:
    """Posterior mean of the Euler-Lagrange residual at a candidate triplet
    (the quantity the rollout root-finder drives to zero)."""
    qmode = _query_mode(model, h_pred)
    return _residual_cross_rows(model, cand, qmode).T @ model.alpha


def posterior_residual(model: TrainedLGP, cand: Triplet, h_pred: float | None = None) -> PosteriorEval:
    """Posterior of the Euler-Lagrange residual at a candidate triplet."""
    qmode = _query_mode(model, h_pred)
    rows = _residual_cross_rows(model, cand, qmode)
    mean = rows.T @ model.alpha
    prior = ops.residual_cov_block(
        qmode, model.kernel_l, model.theta_l, model.kernel_f, model.theta_f, cand, cand,
        scaling_l=model.scaling_l, scaling_f=model.scaling_f,
    )
    cov = _clamp_cov(prior - rows.T @ solve(model.gram, rows))
    return PosteriorEval(mean, cov)


def _observable_posterior(model: TrainedLGP, observable: str, z) -> PosteriorEval:
    if model.mode.tag != CONTINUOUS:
        raise ops.UnsupportedModeError("linear observables need a continuous-mode model")
    z = np.atleast_1d(np.asarray(z, float))
    if z.shape[0] != 2 * model.n_q:
        raise ShapeError("state does not match the model dimension")
    fq = ops.observable_functional(observable, z)
    rows = _lag_cross_rows(model, fq)
    mean = rows.T @ model.alpha
    prior = ops.observable_prior_cov(model.kernel_l, model.theta_l, observable, z, model.scaling_l)
    cov = prior - rows.T @ solve(model.gram, rows)
    if observable in ("eval", "hamiltonian"):
        return PosteriorEval(float(mean[0]), _clamp_scalar(cov[0, 0]))
    return PosteriorEval(mean, _clamp_cov(cov))


def posterior_hamiltonian(model: TrainedLGP, z) -> PosteriorEval:
    """Posterior of the Hamiltonian ``qd . grad_qd L - L`` at a state."""
    return _observable_posterior(model, "hamiltonian", z)


def posterior_momentum(model: TrainedLGP, z) -> PosteriorEval:
    """Posterior of the conjugate momentum ``grad_qd L`` at a state."""
    return _observable_posterior(model, "momentum", z)


# --------------------------------------------------------------------------
# Persistence: a single self-describing JSON document.  The Gram system is
# re-assembled and re-factorized on load.
# --------------------------------------------------------------------------


def _spec_to_dict(spec: KernelSpec) -> dict:
    return {"family": spec.family, "input_dim": spec.input_dim, "n_q": spec.n_q}


def _spec_from_dict(d: dict) -> KernelSpec:
    return KernelSpec(d["family"], d["input_dim"], d.get("n_q", 0))


def save_model(model: TrainedLGP, path) -> None:
    d = model.dataset
    std = d.standardization
    doc = {
        "schema": MODEL_SCHEMA,
        "version": MODEL_VERSION,
        "mode": model.mode.tag,
        "h_train": d.h,
        "sigma": model.sigma,
        "kernel_l": _spec_to_dict(model.kernel_l),
        "theta_l": model.theta_l.to_vector().tolist(),
        "kernel_f": _spec_to_dict(model.kernel_f),
        "theta_f": model.theta_f.to_vector().tolist(),
        "normalization": {
            "anchor_l": model.normalization.anchor_l.tolist(),
            "anchor_f": model.normalization.anchor_f.tolist(),
            "n_l": model.normalization.n_l,
            "n_m": model.normalization.n_m.tolist(),
            "n_f": model.normalization.n_f.tolist(),
        },
        "standardization": {
            k: getattr(std, k).tolist()
            for k in ("q_mean", "q_std", "qd_mean", "qd_std", "u_mean", "u_std")
        },
        "dataset": {
            "source": d.source,
            "q_prev": d.q_prev.tolist(),
            "q_curr": d.q_curr.tolist(),
            "q_next": d.q_next.tolist(),
            "u_prev": d.u_prev.tolist(),
            "u_curr": d.u_curr.tolist(),
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_model(path) -> TrainedLGP:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != MODEL_SCHEMA:
        raise ValueError(f"{path} is not a model file")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model schema version {doc.get('version')}")
    std = Standardization(**{k: np.asarray(v, float) for k, v in doc["standardization"].items()})
    ds = doc["dataset"]
    n_q = len(doc["normalization"]["n_m"])
    dataset = Dataset(
        np.asarray(ds["q_prev"], float).reshape(-1, n_q),
        np.asarray(ds["q_curr"], float).reshape(-1, n_q),
        np.asarray(ds["q_next"], float).reshape(-1, n_q),
        np.asarray(ds["u_prev"], float).reshape(-1, n_q),
        np.asarray(ds["u_curr"], float).reshape(-1, n_q),
        doc["h_train"],
        std,
        ds.get("source", ""),
    )
    k_l = _spec_from_dict(doc["kernel_l"])
    k_f = _spec_from_dict(doc["kernel_f"])
    nd = doc["normalization"]
    norm = NormalizationSpec(
        np.asarray(nd["anchor_l"], float),
        np.asarray(nd["anchor_f"], float),
        nd["n_l"],
        np.asarray(nd["n_m"], float),
        np.asarray(nd["n_f"], float),
    )
    mode = OperatorMode(doc["mode"], doc["h_train"])
    return build_model(
        dataset,
        k_l,
        HyperParams.from_vector(k_l, np.asarray(doc["theta_l"], float)),
        k_f,
        HyperParams.from_vector(k_f, np.asarray(doc["theta_f"], float)),
        norm,
        doc["sigma"],
        mode,
    )
