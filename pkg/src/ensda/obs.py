"""Observation operators, their adjoint applications, and synthetic observations.

Six pointwise operators act on a selected subset of state components:
identity, square, cube, absolute value, thresholded signed square, and
exponential. Selection indices are stored 0-based; the default network
observes every third component starting with the first.
"""

from dataclasses import dataclass, field

import numpy as np

from .core import DimensionMismatchError, RandomSource

OPERATOR_KINDS = (
    "linear",
    "quadratic",
    "cubic",
    "magnitude",
    "quadratic-threshold",
    "exponential",
)

# central-difference step scale for the discontinuous threshold operator
_FD_STEP = 1.0e-6


def default_indices(n_var: int) -> np.ndarray:
    """Every third component starting with the first (0-based indices)."""
    return np.arange(0, n_var, 3)


@dataclass
class ObservationOperator:
    """Pointwise map applied to the observed index set.

    ``exp_factor`` is used only by the exponential kind, ``threshold`` only by
    the quadratic-threshold kind.
    """

    kind: str
    n_var: int
    indices: np.ndarray | None = None
    exp_factor: float = 0.2
    threshold: float = 0.5

    def __post_init__(self):
        if self.kind not in OPERATOR_KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.indices is None:
            self.indices = default_indices(self.n_var)
        self.indices = np.asarray(self.indices, dtype=int)
        if self.indices.size == 0:
            raise ValueError("observed index set must be nonempty")
        if np.any(np.diff(self.indices) <= 0):
            raise ValueError("observed indices must be strictly increasing")
        if self.indices[0] < 0 or self.indices[-1] >= self.n_var:
            raise ValueError("observed indices out of range for n_var")

    @property
    def n_obs(self) -> int:
        return int(self.indices.size)


def _pointwise(op: ObservationOperator, s: np.ndarray) -> np.ndarray:
    if op.kind == "linear":
        return s
    if op.kind == "quadratic":
        return s * s
    if op.kind == "cubic":
        return s * s * s
    if op.kind == "magnitude":
        return np.abs(s)
    if op.kind == "quadratic-threshold":
        return np.where(s >= op.threshold, s * s, -(s * s))
    return np.exp(op.exp_factor * s)


def _pointwise_derivative(op: ObservationOperator, s: np.ndarray) -> np.ndarray:
    if op.kind == "linear":
        return np.ones_like(s)
    if op.kind == "quadratic":
        return 2.0 * s
    if op.kind == "cubic":
        return 3.0 * s * s
    if op.kind == "magnitude":
        return np.sign(s)  # sign(0) = 0
    if op.kind == "quadratic-threshold":
        # discontinuous map: central-difference surrogate, step scaled by magnitude
        delta = _FD_STEP * np.maximum(1.0, np.abs(s))
        return (_pointwise(op, s + delta) - _pointwise(op, s - delta)) / (2.0 * delta)
    return op.exp_factor * np.exp(op.exp_factor * s)


def observe(op: ObservationOperator, x) -> np.ndarray:
    """Apply the operator: shape (..., n_var) -> (..., n_obs)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != op.n_var:
        raise DimensionMismatchError(
            f"state length {x.shape[-1]} != operator n_var {op.n_var}"
        )
    return _pointwise(op, x[..., op.indices])


def jacobian_transpose_apply(op: ObservationOperator, x, w) -> np.ndarray:
    """H'(x)^T w scattered back to state space; unobserved components get 0."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    if x.shape[-1] != op.n_var:
        raise DimensionMismatchError(
            f"state length {x.shape[-1]} != operator n_var {op.n_var}"
        )
    if w.shape[-1] != op.n_obs:
        raise DimensionMismatchError(
            f"weight length {w.shape[-1]} != operator n_obs {op.n_obs}"
        )
    shape = np.broadcast_shapes(x.shape[:-1], w.shape[:-1])
    out = np.zeros(shape + (op.n_var,))
    out[..., op.indices] = _pointwise_derivative(op, x[..., op.indices]) * w
    return out


def jacobian_matrix(op: ObservationOperator, x) -> np.ndarray:
    """Dense linearization H'(x), shape (n_obs, n_var), at a single state."""
    x = np.asarray(x, dtype=float)
    if x.shape != (op.n_var,):
        raise DimensionMismatchError("jacobian_matrix expects a single state vector")
    H = np.zeros((op.n_obs, op.n_var))
    H[np.arange(op.n_obs), op.indices] = _pointwise_derivative(op, x[op.indices])
    return H


@dataclass
class ObservationErrorModel:
    """Diagonal observation error covariance R."""

    variances: np.ndarray
    level: float = 0.05
    floor: float = 1.0e-8

    def __post_init__(self):
        self.variances = np.asarray(self.variances, dtype=float)
        if np.any(self.variances <= 0.0):
            raise ValueError("observation error variances must be positive")

    @property
    def stddev(self) -> np.ndarray:
        return np.sqrt(self.variances)


def synthesize_observations(
    truth_trajectory,
    op: ObservationOperator,
    rng: RandomSource,
    level: float = 0.05,
    floor: float = 1.0e-8,
) -> tuple[np.ndarray, ObservationErrorModel]:
    """Noisy observations of a truth trajectory sampled at assimilation times.

    The per-component noise standard deviation is ``level`` times the mean of
    |H(x_true)| over the trajectory, floored at ``floor`` so R stays
    invertible when a component's average magnitude vanishes. With level 0
    the observations equal H(truth) exactly.
    """
    traj = np.asarray(truth_trajectory, dtype=float)
    if traj.ndim != 2 or traj.shape[0] == 0:
        raise ValueError("truth trajectory must be a nonempty (n_times, n_var) array")
    hx = observe(op, traj)
    std = np.maximum(level * np.mean(np.abs(hx), axis=0), floor)
    error_model = ObservationErrorModel(variances=std * std, level=level, floor=floor)
    if level == 0.0:
        return hx.copy(), error_model
    noise = std * rng.generator.standard_normal(hx.shape)
    return hx + noise, error_model
