"""Analytic benchmark systems, dataset sampling, and test-scenario generation.

Systems expose the Lagrangian, its gradients, the generalized force, and the
Hamiltonian as callbacks; ground-truth trajectories come from the midpoint
recurrence in :mod:`lgp.rollout`.

All randomness flows through numpy's counter-based Philox generator, so a
fixed seed reproduces datasets and scenarios across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.optimize

from .baseline import baseline_predict  # noqa: F401  (re-export: same-data baseline)
from .model import Dataset
from .rollout import DivergedError, solve_true_del


class GenerationError(RuntimeError):
    """Dataset sampling exceeded its redraw budget."""


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class PendulumParams:
    """Controlled, damped multi-link pendulum in absolute angles.

    Masses decrease linearly from 2 to 1 kg and lengths from 1 to 0.8 m
    across the joints (a single link uses the upper endpoints).
    """

    n_q: int = 1
    masses: np.ndarray | None = None
    lengths: np.ndarray | None = None
    damping: float = 0.8
    gravity: float = 9.81

    def resolved(self) -> tuple[np.ndarray, np.ndarray]:
        m = self.masses if self.masses is not None else np.linspace(2.0, 1.0, self.n_q)
        l = self.lengths if self.lengths is not None else np.linspace(1.0, 0.8, self.n_q)
        m = np.atleast_1d(np.asarray(m, float))
        l = np.atleast_1d(np.asarray(l, float))
        if m.shape != (self.n_q,) or l.shape != (self.n_q,):
            raise ValueError("masses/lengths must have one entry per joint")
        if np.any(m <= 0) or np.any(l <= 0) or self.gravity <= 0 or self.damping < 0:
            raise ValueError("invalid pendulum parameters")
        return m, l


@dataclass(frozen=True)
class OscillatorParams:
    """Non-harmonic oscillator: spring-loaded magnet with two off-origin
    equilibria and linear viscous damping."""

    m: float = 1.0
    k: float = 1.0
    c: float = 2.0
    b: float = 0.1


@dataclass
class SystemModel:
    """Analytic system callbacks for simulation and evaluation."""

    name: str
    n_q: int
    lagrangian: Callable
    lagrangian_grads: Callable  # (q, qd) -> (dL/dq, dL/dqd)
    force: Callable  # (u, q, qd) -> vector
    hamiltonian: Callable
    equilibria: list = field(default_factory=list)


def pendulum_system(params: PendulumParams | None = None) -> SystemModel:
    params = params or PendulumParams()
    m, l = params.resolved()
    n = params.n_q
    g = params.gravity
    b = params.damping

    def _velocities(q, qd):
        c, s = np.cos(q), np.sin(q)
        vh = np.cumsum(l * qd * c)
        vv = np.cumsum(l * qd * s)
        return vh, vv, c, s

    def lagrangian(q, qd):
        q = np.atleast_1d(np.asarray(q, float))
        qd = np.atleast_1d(np.asarray(qd, float))
        vh, vv, c, _ = _velocities(q, qd)
        t = 0.5 * np.sum(m * (vh**2 + vv**2))
        v = np.sum(m * g * np.cumsum(-l * c))
        return float(t - v)

    def lagrangian_grads(q, qd):
        q = np.atleast_1d(np.asarray(q, float))
        qd = np.atleast_1d(np.asarray(qd, float))
        vh, vv, c, s = _velocities(q, qd)
        # reversed cumulative sums: body i>=k feels joint k
        wh = np.cumsum((m * vh)[::-1])[::-1]
        wv = np.cumsum((m * vv)[::-1])[::-1]
        mk = np.cumsum(m[::-1])[::-1]
        d_qd = l * (c * wh + s * wv)
        d_q = l * qd * (-s * wh + c * wv) - g * l * s * mk
        return d_q, d_qd

    def force(u, q, qd):
        u = np.atleast_1d(np.asarray(u, float))
        qd = np.atleast_1d(np.asarray(qd, float))
        omega = qd - np.concatenate([[0.0], qd[:-1]])
        tau = u - b * omega
        return tau - np.concatenate([tau[1:], [0.0]])

    def hamiltonian(q, qd):
        q = np.atleast_1d(np.asarray(q, float))
        qd = np.atleast_1d(np.asarray(qd, float))
        vh, vv, c, _ = _velocities(q, qd)
        t = 0.5 * np.sum(m * (vh**2 + vv**2))
        v = np.sum(m * g * np.cumsum(-l * c))
        return float(t + v)

    return SystemModel(
        name=f"pendulum{n}",
        n_q=n,
        lagrangian=lagrangian,
        lagrangian_grads=lagrangian_grads,
        force=force,
        hamiltonian=hamiltonian,
        equilibria=[np.zeros(n)],
    )


def oscillator_system(params: OscillatorParams | None = None) -> SystemModel:
    params = params or OscillatorParams()
    m, k, c, b = params.m, params.k, params.c, params.b

    def lagrangian(q, qd):
        q = float(np.atleast_1d(q)[0])
        qd = float(np.atleast_1d(qd)[0])
        return 0.5 * m * qd**2 - (0.25 * k * q**2 + c * np.cos(q))

    def lagrangian_grads(q, qd):
        q = np.atleast_1d(np.asarray(q, float))
        qd = np.atleast_1d(np.asarray(qd, float))
        return -0.5 * k * q + c * np.sin(q), m * qd

    def force(u, q, qd):
        u = np.atleast_1d(np.asarray(u, float))
        qd = np.atleast_1d(np.asarray(qd, float))
        return u - b * qd

    def hamiltonian(q, qd):
        q = float(np.atleast_1d(q)[0])
        qd = float(np.atleast_1d(qd)[0])
        return 0.5 * m * qd**2 + 0.25 * k * q**2 + c * np.cos(q)

    q_star = oscillator_equilibrium(params)
    return SystemModel(
        name="oscillator",
        n_q=1,
        lagrangian=lagrangian,
        lagrangian_grads=lagrangian_grads,
        force=force,
        hamiltonian=hamiltonian,
        equilibria=[np.array([q_star]), np.array([-q_star])],
    )


def oscillator_equilibrium(params: OscillatorParams | None = None) -> float:
    """Positive root of ``k q / 2 = c sin(q)`` (the stable off-origin rest point)."""
    params = params or OscillatorParams()
    f = lambda q: 0.5 * params.k * q - params.c * np.sin(q)
    return float(scipy.optimize.brentq(f, 0.1, np.pi))


@dataclass(frozen=True)
class SamplingBounds:
    """Per-dimension intervals for configurations, velocities, and inputs."""

    q: np.ndarray  # (n_q, 2)
    qd: np.ndarray
    u: np.ndarray

    @staticmethod
    def default(n_q: int) -> "SamplingBounds":
        one = lambda lo, hi: np.tile([lo, hi], (n_q, 1))
        return SamplingBounds(one(-np.pi, np.pi), one(-4.0, 4.0), one(-1.0, 1.0))

    def draw(self, rng, which: str) -> np.ndarray:
        b = getattr(self, which)
        return rng.uniform(b[:, 0], b[:, 1])


def sample_triplets(
    system: SystemModel,
    n: int,
    bounds: SamplingBounds | None = None,
    h: float = 0.05,
    seed: int = 0,
) -> Dataset:
    """Draw N position triplets: sample ``(q, qd, u_prev, u_curr)`` uniformly,
    set ``q_prev = q - h qd``, and solve the true recurrence for ``q_next``.

    Samples whose solve diverges are redrawn; generation fails after ``10 N``
    attempts.  Deterministic for a fixed seed.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    if not h > 0:
        raise ValueError("step size must be positive")
    bounds = bounds or SamplingBounds.default(system.n_q)
    rng = _rng(seed)
    rows = []
    attempts = 0
    while len(rows) < n:
        if attempts >= 10 * n:
            raise GenerationError(
                f"exceeded {10 * n} attempts while sampling {n} triplets "
                f"({len(rows)} succeeded)"
            )
        attempts += 1
        q_curr = bounds.draw(rng, "q")
        qd = bounds.draw(rng, "qd")
        u_prev = bounds.draw(rng, "u")
        u_curr = bounds.draw(rng, "u")
        q_prev = q_curr - h * qd
        try:
            q_next = solve_true_del(system, q_prev, q_curr, u_prev, u_curr, h)
        except DivergedError:
            continue
        rows.append((q_prev, q_curr, q_next, u_prev, u_curr))
    arrays = [np.stack([r[i] for r in rows]) for i in range(5)]
    return Dataset.from_arrays(*arrays, h=h, source=system.name)


@dataclass(frozen=True)
class Scenario:
    """Two initial positions plus a sinusoidal torque schedule."""

    q0: np.ndarray
    q1: np.ndarray
    inputs: np.ndarray  # (steps + 1, n_q)
    h: float
    seed: int


def make_test_scenario(
    system: SystemModel,
    seed: int,
    steps: int,
    h: float,
    bounds: SamplingBounds | None = None,
    zero_input: bool = False,
) -> Scenario:
    """Random initial state converted to two positions, driven by sinusoids
    ``u_i(t) = A_i sin(w_i t + phi_i)`` with ``A ~ U[0,1]``,
    ``w ~ U[0.5, 2]`` rad/s, ``phi ~ U[0, 2 pi)``."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    bounds = bounds or SamplingBounds.default(system.n_q)
    rng = _rng(seed)
    q0 = bounds.draw(rng, "q")
    qd0 = bounds.draw(rng, "qd")
    amp = rng.uniform(0.0, 1.0, system.n_q)
    omega = rng.uniform(0.5, 2.0, system.n_q)
    phase = rng.uniform(0.0, 2.0 * np.pi, system.n_q)
    t = h * np.arange(steps + 1)
    inputs = amp * np.sin(omega * t[:, None] + phase)
    if zero_input:
        inputs = np.zeros_like(inputs)
    return Scenario(q0, q0 + h * qd0, inputs, h, seed)
