"""Symplectic and phase-space integrators for Hamiltonian proposal trajectories.

Five one-step maps advance a phase point (x, p) under dx/dt = M^-1 p,
dp/dt = -grad J(x): position Verlet, two/three/four-stage position splitting
schemes, and a trigonometric map designed for infinite-dimensional settings
(called "hilbert" here). The mass matrix is diagonal and passed as a plain
positive array.

A potential is any object with ``evaluate(x) -> (...,)`` and
``gradient(x) -> (..., n_var)`` broadcasting over leading axes. Step size h
may be a scalar or a per-chain array matching the leading axes of x.
"""

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import RandomSource

INTEGRATOR_KINDS = ("verlet", "two-stage", "three-stage", "four-stage", "hilbert")

# splitting coefficients as quoted by the source scheme definitions;
# the remaining coefficients follow from symmetry and consistency
TWO_STAGE_A1 = 0.21132
TWO_STAGE_A2 = 1.0 - 2.0 * TWO_STAGE_A1
TWO_STAGE_B1 = 0.5
THREE_STAGE_A1 = 0.11888010966548
THREE_STAGE_A2 = 0.5 - THREE_STAGE_A1
THREE_STAGE_B1 = 0.29619504261126
THREE_STAGE_B2 = 1.0 - 2.0 * THREE_STAGE_B1
FOUR_STAGE_A1 = 0.071353913450279725904
FOUR_STAGE_A2 = 0.268458791161230105820
FOUR_STAGE_A3 = 1.0 - 2.0 * FOUR_STAGE_A1 - 2.0 * FOUR_STAGE_A2
FOUR_STAGE_B1 = 0.1916678
FOUR_STAGE_B2 = 0.5 - FOUR_STAGE_B1

# upper ends of the documented step-size stability intervals
STABILITY_LIMITS = {
    "two-stage": 2.6321480259,
    "three-stage": 4.67,
    "four-stage": 5.35,
}


class DivergenceError(RuntimeError):
    """A trajectory produced a non-finite state or gradient."""


class PhasePoint(NamedTuple):
    x: np.ndarray
    p: np.ndarray


@dataclass
class TrajectorySpec:
    """Integrator kind, reference step, step count, and step randomization."""

    kind: str = "verlet"
    step: float = 0.01
    n_steps: int = 10
    jitter: float = 0.2  # h = (1 + r) * step with r ~ U(-jitter, jitter)

    def __post_init__(self):
        if self.kind not in INTEGRATOR_KINDS:
            raise ValueError(f"unknown integrator kind {self.kind!r}")
        if self.step <= 0.0:
            raise ValueError("reference step must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not 0.0 <= self.jitter < 1.0:
            raise ValueError("jitter must lie in [0, 1)")
        limit = STABILITY_LIMITS.get(self.kind)
        if limit is not None and not self.step < limit:
            warnings.warn(
                f"step {self.step} outside the {self.kind} stability interval "
                f"(0, {limit})",
                stacklevel=2,
            )


@dataclass
class TrajectoryRecord:
    """What one proposal trajectory did, for energy-loss evaluation."""

    kind: str
    h: float | np.ndarray
    n_steps: int
    start: PhasePoint
    end: PhasePoint
    n_grad_evals: int
    grad_start: np.ndarray | None = None  # hilbert kind only
    grad_end: np.ndarray | None = None
    path: list = field(default_factory=list)  # intermediate phase points if recorded


def _hcol(h):
    """Step size broadcastable against (..., n_var) states."""
    h = np.asarray(h, dtype=float)
    return h if h.ndim == 0 else h[..., None]


def _kick_drift_chain(x, p, h, minv, grad, drifts, kicks):
    """Alternating drift/kick stages: drift a_i, kick b_i, ..., final drift."""
    n = 0
    for a, b in zip(drifts[:-1], kicks):
        x = x + (a * h) * (p * minv)
        p = p - (b * h) * grad(x)
        n += 1
    x = x + (drifts[-1] * h) * (p * minv)
    return x, p, n


def _step_verlet(x, p, h, minv, grad):
    x = x + (0.5 * h) * (p * minv)
    p = p - h * grad(x)
    x = x + (0.5 * h) * (p * minv)
    return x, p, 1


def _step_two_stage(x, p, h, minv, grad):
    return _kick_drift_chain(
        x, p, h, minv, grad,
        drifts=(TWO_STAGE_A1, TWO_STAGE_A2, TWO_STAGE_A1),
        kicks=(TWO_STAGE_B1, TWO_STAGE_B1),
    )


def _step_three_stage(x, p, h, minv, grad):
    return _kick_drift_chain(
        x, p, h, minv, grad,
        drifts=(THREE_STAGE_A1, THREE_STAGE_A2, THREE_STAGE_A2, THREE_STAGE_A1),
        kicks=(THREE_STAGE_B1, THREE_STAGE_B2, THREE_STAGE_B1),
    )


def _step_four_stage(x, p, h, minv, grad):
    return _kick_drift_chain(
        x, p, h, minv, grad,
        drifts=(FOUR_STAGE_A1, FOUR_STAGE_A2, FOUR_STAGE_A3, FOUR_STAGE_A2,
                FOUR_STAGE_A1),
        kicks=(FOUR_STAGE_B1, FOUR_STAGE_B2, FOUR_STAGE_B2, FOUR_STAGE_B1),
    )


_SPLITTING_STEPS = {
    "verlet": _step_verlet,
    "two-stage": _step_two_stage,
    "three-stage": _step_three_stage,
    "four-stage": _step_four_stage,
}


def _step_hilbert(x, p, h, minv, grad, g_start=None):
    """One trigonometric step; returns the end-point gradient for reuse."""
    g = grad(x) if g_start is None else g_start
    n = 0 if g_start is not None else 1
    p1 = p - (0.5 * h) * (minv * g)
    ch, sh = np.cos(h), np.sin(h)
    x_new = ch * x + sh * p1
    p2 = -sh * x + ch * p1
    g_new = grad(x_new)
    p_new = p2 - (0.5 * h) * (minv * g_new)
    return x_new, p_new, g, g_new, n + 1


def advance(z: PhasePoint, kind: str, h, n_steps: int, mass_diag, pot,
            record_path: bool = False) -> TrajectoryRecord:
    """Apply n_steps of the chosen map. No finiteness checks (see callers)."""
    x = np.asarray(z.x, dtype=float)
    p = np.asarray(z.p, dtype=float)
    mass = np.asarray(mass_diag, dtype=float)
    minv = 1.0 / mass
    hc = _hcol(h)
    start = PhasePoint(x, p)
    path = []
    n_evals = 0
    if kind == "hilbert":
        g = None
        grad_start = None
        for k in range(n_steps):
            x, p, g_in, g, n = _step_hilbert(x, p, hc, minv, pot.gradient, g_start=g)
            n_evals += n
            if k == 0:
                grad_start = g_in
            if record_path and k < n_steps - 1:
                path.append(PhasePoint(x, p))
        return TrajectoryRecord(kind, h, n_steps, start, PhasePoint(x, p), n_evals,
                                grad_start=grad_start, grad_end=g, path=path)
    step = _SPLITTING_STEPS[kind]
    for k in range(n_steps):
        x, p, n = step(x, p, hc, minv, pot.gradient)
        n_evals += n
        if record_path and k < n_steps - 1:
            path.append(PhasePoint(x, p))
    return TrajectoryRecord(kind, h, n_steps, start, PhasePoint(x, p), n_evals,
                            path=path)


def _checked_single_step(kind, z, h, mass_diag, pot):
    if h < 0.0:
        raise ValueError("step size must be nonnegative")
    rec = advance(z, kind, h, 1, mass_diag, pot)
    if not (np.all(np.isfinite(rec.end.x)) and np.all(np.isfinite(rec.end.p))):
        raise DivergenceError(f"{kind} step produced a non-finite phase point")
    return rec.end


def step_verlet(z, h, mass_diag, pot) -> PhasePoint:
    """x_half = x + h/2 M^-1 p;  p+ = p - h grad J(x_half);  x+ = x_half + h/2 M^-1 p+."""
    return _checked_single_step("verlet", z, h, mass_diag, pot)


def step_two_stage(z, h, mass_diag, pot) -> PhasePoint:
    return _checked_single_step("two-stage", z, h, mass_diag, pot)


def step_three_stage(z, h, mass_diag, pot) -> PhasePoint:
    return _checked_single_step("three-stage", z, h, mass_diag, pot)


def step_four_stage(z, h, mass_diag, pot) -> PhasePoint:
    return _checked_single_step("four-stage", z, h, mass_diag, pot)


def step_hilbert(z, h, mass_diag, pot) -> PhasePoint:
    """Half kick with M^-1 grad, rotation by angle h in each (x_i, p_i) plane, half kick."""
    return _checked_single_step("hilbert", z, h, mass_diag, pot)


def draw_step_size(spec: TrajectorySpec, generator: np.random.Generator):
    """h = (1 + r) h_ref with r ~ U(-jitter, jitter), drawn once per trajectory."""
    r = generator.uniform(-spec.jitter, spec.jitter)
    return (1.0 + r) * spec.step


def integrate_trajectory(z: PhasePoint, spec: TrajectorySpec, mass_diag, pot,
                         rng: RandomSource,
                         record_path: bool = False) -> tuple[PhasePoint, TrajectoryRecord]:
    """Randomize the step once, then apply spec.n_steps steps of spec.kind."""
    h = draw_step_size(spec, rng.generator)
    rec = advance(z, spec.kind, h, spec.n_steps, mass_diag, pot,
                  record_path=record_path)
    if not (np.all(np.isfinite(rec.end.x)) and np.all(np.isfinite(rec.end.p))):
        raise DivergenceError(
            f"{spec.kind} trajectory diverged (h={h:.4g}, m={spec.n_steps})"
        )
    return rec.end, rec
