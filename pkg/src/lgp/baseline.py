"""One-step Gaussian-process baseline predictor.

Predicts ``q_next`` directly from the local information
``[q_prev, q_curr, u_prev, u_curr]`` with an independent squared-exponential
GP per output dimension and learned observation noise.  Features and targets
are standardized with the same statistics the constrained models use, so
comparisons run on identical data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .kernels import HyperParams, baseline_kernel, kernel_eval
from .model import Dataset


@dataclass
class BaselineGP:
    """Fitted one-step predictor (standardized internally)."""

    x: np.ndarray  # (N, 4 n_q) standardized features
    y: np.ndarray  # (N, n_q) standardized targets
    feat_shift: np.ndarray
    feat_scale: np.ndarray
    targ_shift: np.ndarray
    targ_scale: np.ndarray
    params: np.ndarray  # (n_q, 4 n_q + 2): log variance, log lengthscales, log noise
    _cache: list = field(default_factory=list, repr=False)

    @property
    def n_q(self) -> int:
        return self.y.shape[1]

    def _dim_cache(self, j: int):
        if not self._cache:
            spec = baseline_kernel(self.x.shape[1])
            for d in range(self.n_q):
                theta = HyperParams.from_vector(spec, self.params[d, :-1])
                k = kernel_eval(spec, theta, self.x, self.x)
                k[np.diag_indices_from(k)] += np.exp(self.params[d, -1])
                c = scipy.linalg.cho_factor(k, lower=True)
                self._cache.append((theta, scipy.linalg.cho_solve(c, self.y[:, d])))
        return self._cache[j]


def _feature_arrays(dataset: Dataset) -> np.ndarray:
    return np.hstack([dataset.q_prev, dataset.q_curr, dataset.u_prev, dataset.u_curr])


def _feature_scaling(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    s = dataset.standardization
    shift = np.concatenate([s.q_mean, s.q_mean, s.u_mean, s.u_mean])
    scale = np.concatenate([s.q_std, s.q_std, s.u_std, s.u_std])
    return shift, scale


def _nlml(spec, x, y, vec) -> float:
    theta = HyperParams.from_vector(spec, vec[:-1])
    k = kernel_eval(spec, theta, x, x)
    k[np.diag_indices_from(k)] += np.exp(vec[-1])
    try:
        c = scipy.linalg.cho_factor(k, lower=True)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        return np.inf
    alpha = scipy.linalg.cho_solve(c, y)
    return float(
        0.5 * y @ alpha + np.sum(np.log(np.diag(c[0]))) + 0.5 * len(y) * np.log(2 * np.pi)
    )


def fit_baseline_gp(dataset: Dataset, config=None) -> BaselineGP:
    """Fit the baseline by marginal-likelihood maximization with restarts.

    ``config`` may carry ``restarts``, ``seed``, ``log_bounds``, and
    ``max_iters`` (the trainer's configuration object works as-is).
    """
    if dataset.n < 2:
        raise ValueError("baseline needs at least two triplets")
    restarts = getattr(config, "restarts", 4)
    seed = getattr(config, "seed", 0)
    lo, hi = getattr(config, "log_bounds", (-6.0, 6.0))
    max_iters = getattr(config, "max_iters", 500)

    shift, scale = _feature_scaling(dataset)
    x = (_feature_arrays(dataset) - shift) / scale
    s = dataset.standardization
    y = (dataset.q_next - s.q_mean) / s.q_std

    d = x.shape[1]
    spec = baseline_kernel(d)
    n_par = d + 2
    rng = np.random.Generator(np.random.Philox(seed))
    starts = [np.concatenate([np.zeros(n_par - 1), [np.log(1e-4)]])]
    starts += [rng.uniform(lo, hi, n_par) for _ in range(max(0, restarts - 1))]
    bounds = [(lo, hi)] * n_par

    params = np.empty((dataset.n_q, n_par))
    for j in range(dataset.n_q):
        yj = y[:, j]
        best = (np.inf, None)
        for x0 in starts:
            res = scipy.optimize.minimize(
                lambda v: _nlml(spec, x, yj, v),
                x0,
                method="L-BFGS-B",
                bounds=bounds,
                options={"maxiter": max_iters},
            )
            if res.fun < best[0]:
                best = (res.fun, res.x)
        if best[1] is None:
            raise RuntimeError("baseline optimization failed for every restart")
        params[j] = best[1]
    return BaselineGP(x, y, shift, scale, s.q_mean.copy(), s.q_std.copy(), params)


def baseline_predict(gp: BaselineGP, q_prev, q_curr, u_prev, u_curr) -> np.ndarray:
    """Posterior-mean one-step prediction, de-standardized."""
    feat = np.concatenate(
        [np.atleast_1d(v) for v in (q_prev, q_curr, u_prev, u_curr)]
    ).astype(float)
    xq = (feat - gp.feat_shift) / gp.feat_scale
    spec = baseline_kernel(gp.x.shape[1])
    out = np.empty(gp.n_q)
    for j in range(gp.n_q):
        theta, alpha = gp._dim_cache(j)
        kstar = kernel_eval(spec, theta, xq[None, :], gp.x)[0]
        out[j] = kstar @ alpha
    return gp.targ_shift + gp.targ_scale * out


def baseline_rollout(gp: BaselineGP, q0, q1, inputs, steps: int) -> np.ndarray:
    """Iterate the one-step predictor; returns (steps + 2, n_q)."""
    inputs = np.atleast_2d(np.asarray(inputs, float))
    if steps > 0 and inputs.shape[0] < steps + 1:
        raise ValueError(f"need at least {steps + 1} input rows for {steps} steps")
    traj = [np.atleast_1d(np.asarray(q0, float)), np.atleast_1d(np.asarray(q1, float))]
    for k in range(steps):
        traj.append(baseline_predict(gp, traj[-2], traj[-1], inputs[k], inputs[k + 1]))
    return np.stack(traj)
