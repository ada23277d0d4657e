"""Lorenz-96 forecast model and its fixed-step RK4 propagation.

The model is dx_i/dt = x_{i-1} (x_{i+1} - x_{i-2}) - x_i + F with cyclic
indexing. Both the tendency and the propagator broadcast over leading axes,
so a whole ensemble (or a batch of ensembles) advances in one call.
"""

from dataclasses import dataclass

import numpy as np

from .core import DimensionMismatchError


class BlowUpError(RuntimeError):
    """The integration produced a non-finite state."""

    def __init__(self, time: float):
        self.time = float(time)
        super().__init__(f"model state became non-finite at t = {self.time:.6g}")


@dataclass(frozen=True)
class Lorenz96Config:
    n_var: int = 40
    forcing: float = 8.0
    dt: float = 0.005  # internal RK4 step, model time units

    def __post_init__(self):
        if self.n_var < 4:
            raise ValueError("the cyclic stencil needs n_var >= 4")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")


def tendency(x, cfg: Lorenz96Config) -> np.ndarray:
    """dx/dt under cyclic indexing (x_0 is x_{n_var})."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != cfg.n_var:
        raise DimensionMismatchError(
            f"state length {x.shape[-1]} != configured n_var {cfg.n_var}"
        )
    xm1 = np.roll(x, 1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    xp1 = np.roll(x, -1, axis=-1)
    return xm1 * (xp1 - xm2) - x + cfg.forcing


def _rk4_step(x, dt, cfg):
    # overflow on a blowing-up state is caught by the isfinite check in propagate
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = tendency(x, cfg)
        k2 = tendency(x + 0.5 * dt * k1, cfg)
        k3 = tendency(x + 0.5 * dt * k2, cfg)
        k4 = tendency(x + dt * k3, cfg)
        return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def propagate(x0, t0: float, t1: float, cfg: Lorenz96Config) -> np.ndarray:
    """Integrate the tendency from t0 to t1 with fixed-step RK4.

    A final partial step lands exactly on t1. t1 == t0 returns a copy of x0.
    Raises BlowUpError naming the failure time if the state goes non-finite.
    """
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    x = np.array(x0, dtype=float)
    if x.shape[-1] != cfg.n_var:
        raise DimensionMismatchError(
            f"state length {x.shape[-1]} != configured n_var {cfg.n_var}"
        )
    span = t1 - t0
    if span == 0.0:
        return x
    n_full = int(span / cfg.dt + 1e-9)
    remainder = span - n_full * cfg.dt
    for k in range(n_full):
        x = _rk4_step(x, cfg.dt, cfg)
        if not np.all(np.isfinite(x)):
            raise BlowUpError(t0 + (k + 1) * cfg.dt)
    if remainder > 1e-12:
        x = _rk4_step(x, remainder, cfg)
        if not np.all(np.isfinite(x)):
            raise BlowUpError(t1)
    return x


def reference_initial_condition(cfg: Lorenz96Config) -> np.ndarray:
    """Spin-up state: equidistant values on [-2, 2] integrated for 10 time units."""
    x = np.linspace(-2.0, 2.0, cfg.n_var)
    return propagate(x, 0.0, 10.0, cfg)
