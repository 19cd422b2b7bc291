"""Forward prediction by root-finding on the posterior residual mean, and
ground-truth trajectory generation from analytic Lagrangians.

Both the learned model and the ground-truth simulator advance a trajectory by
solving the same three-point recurrence for ``q_next``; they share one damped
Newton implementation with finite-difference Jacobians (the configuration
dimension is small, so FD Jacobians are cheap and robust).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .operators import Triplet


@dataclass(frozen=True)
class StepDiagnostics:
    converged: bool
    iterations: int
    residual_norm: float
    damping: float


class DivergedError(RuntimeError):
    """The root-finder failed; carries the last step diagnostics."""

    def __init__(self, message: str, diagnostics: StepDiagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class RolloutResult:
    """A predicted trajectory.  The first two rows are the supplied initial
    positions; ``cov_trace`` holds the residual-covariance trace at each
    accepted step as an uncertainty proxy."""

    trajectory: np.ndarray  # (2 + accepted steps, n_q)
    cov_trace: np.ndarray  # (accepted steps,)
    diagnostics: list[StepDiagnostics] = field(default_factory=list)
    h: float = 0.0
    completed: bool = True


def newton_root(residual_fn, x0, fd_scale: float, tol: float = 1e-8,
                step_tol: float = 1e-10, max_iter: int = 50, max_backtrack: int = 8):
    """Damped Newton with central-difference Jacobians.

    Converges when the residual norm drops below ``tol`` or the step norm
    below ``step_tol``.  A singular or vanishing Jacobian raises
    ``DivergedError``: a residual that is flat in ``q_next`` cannot define the
    next configuration even if it happens to be small.
    """
    x = np.array(x0, float)
    n = x.shape[0]
    g = residual_fn(x)
    gnorm = float(np.linalg.norm(g))
    damping = 1.0
    for it in range(1, max_iter + 1):
        jac = np.empty((n, n))
        for k in range(n):
            dx = np.zeros(n)
            dx[k] = fd_scale
            jac[:, k] = (residual_fn(x + dx) - residual_fn(x - dx)) / (2 * fd_scale)
        diag = StepDiagnostics(False, it, gnorm, damping)
        if not np.all(np.isfinite(jac)):
            raise DivergedError("non-finite Jacobian", diag)
        if np.linalg.norm(jac) < 1e-12 or np.linalg.cond(jac) > 1e14:
            raise DivergedError("degenerate Jacobian", diag)
        step = np.linalg.solve(jac, -g)
        # the residual criterion alone may hold vacuously at the initial guess
        # when the learned residual field has a small overall scale; Newton is
        # affine-invariant, so demand one real update (or a vanishing step)
        if gnorm <= tol and (it > 1 or np.linalg.norm(step) <= step_tol):
            return x, StepDiagnostics(True, it, gnorm, damping)
        damping = 1.0
        for _ in range(max_backtrack + 1):
            x_new = x + damping * step
            g_new = residual_fn(x_new)
            gnorm_new = float(np.linalg.norm(g_new))
            if np.isfinite(gnorm_new) and gnorm_new < gnorm:
                break
            damping *= 0.5
        else:
            if gnorm <= tol:
                return x, StepDiagnostics(True, it, gnorm, damping)
            raise DivergedError("backtracking failed to reduce the residual",
                                StepDiagnostics(False, it, gnorm, damping))
        x, g, gnorm = x_new, g_new, gnorm_new
        if np.linalg.norm(damping * step) <= step_tol:
            return x, StepDiagnostics(True, it, gnorm, damping)
    raise DivergedError("maximum Newton iterations exceeded",
                        StepDiagnostics(False, max_iter, gnorm, damping))


def predict_next(model: mdl.TrainedLGP, q_prev, q_curr, u_prev, u_curr,
                 h_pred: float | None = None):
    """One prediction step: root-find ``q_next`` on the posterior residual mean.

    Initial guess is the constant-velocity extrapolation ``2 q_curr - q_prev``.
    Returns ``(q_next, StepDiagnostics)``.
    """
    q_prev = np.atleast_1d(np.asarray(q_prev, float))
    q_curr = np.atleast_1d(np.asarray(q_curr, float))
    u_prev = np.atleast_1d(np.asarray(u_prev, float))
    u_curr = np.atleast_1d(np.asarray(u_curr, float))
    h = model.h_train if h_pred is None else h_pred

    def residual(q_next):
        return mdl.residual_mean(model, Triplet(q_prev, q_curr, q_next, u_prev, u_curr), h)

    x0 = 2.0 * q_curr - q_prev
    fd_scale = 1e-6 * (1.0 + float(np.linalg.norm(q_curr)))
    return newton_root(residual, x0, fd_scale)


def rollout(model: mdl.TrainedLGP, q0, q1, inputs, steps: int,
            h_pred: float | None = None) -> RolloutResult:
    """Multi-step prediction from two successive initial positions.

    ``inputs`` must provide at least ``steps + 1`` rows.  Stops early on a
    diverged solve, returning the partial trajectory flagged incomplete.
    """
    q0 = np.atleast_1d(np.asarray(q0, float))
    q1 = np.atleast_1d(np.asarray(q1, float))
    inputs = np.atleast_2d(np.asarray(inputs, float))
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if steps > 0 and inputs.shape[0] < steps + 1:
        raise ValueError(f"need at least {steps + 1} input rows for {steps} steps")
    h = model.h_train if h_pred is None else h_pred
    traj = [q0, q1]
    traces = []
    diags = []
    completed = True
    for k in range(steps):
        try:
            q_next, diag = predict_next(model, traj[-2], traj[-1], inputs[k], inputs[k + 1], h)
        except DivergedError as err:
            diags.append(err.diagnostics)
            completed = False
            break
        diags.append(diag)
        post = mdl.posterior_residual(
            model, Triplet(traj[-2], traj[-1], q_next, inputs[k], inputs[k + 1]), h
        )
        traces.append(float(np.trace(post.variance)))
        traj.append(q_next)
    return RolloutResult(np.stack(traj), np.asarray(traces), diags, h, completed)


# --------------------------------------------------------------------------
# Ground truth: the same recurrence with the analytic Lagrangian and force,
# discretized by the midpoint quadrature.
# --------------------------------------------------------------------------


def midpoint_del_residual(system, q_prev, q_curr, q_next, u_prev, u_curr, h: float) -> np.ndarray:
    """Residual of the forced three-point recurrence for an analytic system."""
    q_prev = np.atleast_1d(np.asarray(q_prev, float))
    q_curr = np.atleast_1d(np.asarray(q_curr, float))
    q_next = np.atleast_1d(np.asarray(q_next, float))
    m1, v1 = (q_prev + q_curr) / 2.0, (q_curr - q_prev) / h
    m2, v2 = (q_curr + q_next) / 2.0, (q_next - q_curr) / h
    dq1, dqd1 = system.lagrangian_grads(m1, v1)
    dq2, dqd2 = system.lagrangian_grads(m2, v2)
    f1 = system.force(np.atleast_1d(u_prev), m1, v1)
    f2 = system.force(np.atleast_1d(u_curr), m2, v2)
    return (h / 2.0) * (dq1 + dq2) + dqd1 - dqd2 + (h / 2.0) * (f1 + f2)


def solve_true_del(system, q_prev, q_curr, u_prev, u_curr, h: float) -> np.ndarray:
    """Advance the analytic system one step by solving the recurrence."""
    q_prev = np.atleast_1d(np.asarray(q_prev, float))
    q_curr = np.atleast_1d(np.asarray(q_curr, float))

    def residual(q_next):
        return midpoint_del_residual(system, q_prev, q_curr, q_next, u_prev, u_curr, h)

    x0 = 2.0 * q_curr - q_prev
    fd_scale = 1e-6 * (1.0 + float(np.linalg.norm(q_curr)))
    q_next, _ = newton_root(residual, x0, fd_scale)
    return q_next


def simulate_true(system, q0, qd0, inputs, h: float, steps: int) -> np.ndarray:
    """Ground-truth trajectory: bootstrap ``q1 = q0 + h qd0`` and iterate the
    recurrence for ``steps`` solves.  Returns (steps + 2, n_q)."""
    q0 = np.atleast_1d(np.asarray(q0, float))
    qd0 = np.atleast_1d(np.asarray(qd0, float))
    inputs = np.atleast_2d(np.asarray(inputs, float))
    if steps > 0 and inputs.shape[0] < steps + 1:
        raise ValueError(f"need at least {steps + 1} input rows for {steps} steps")
    traj = [q0, q0 + h * qd0]
    for k in range(steps):
        traj.append(solve_true_del(system, traj[-2], traj[-1], inputs[k], inputs[k + 1], h))
    return np.stack(traj)
