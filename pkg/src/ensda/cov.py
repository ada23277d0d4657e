"""Background covariance machinery.

The working covariance is a blend of a fixed diagonal B0 and the (optionally
localized) ensemble covariance:

    B = gamma * diag(b0) + (1 - gamma) / (n_ens - 1) * rho o (D D^T)

with D the matrix of ensemble deviations (columns = members) and rho a cyclic
Gaussian localization kernel applied as a pointwise (Schur) product. The
operator exposes apply and inverse_apply; at desk scale (n_var below
``dense_cutoff``) both go through one Cholesky factorization, above it the
product is formed matrix-free and the solve falls back to conjugate
gradients. The contract is the solve, not the method.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg

from .core import DimensionMismatchError


class InsufficientEnsembleError(ValueError):
    """Fewer than two ensemble members."""


class CovarianceSingularError(np.linalg.LinAlgError):
    """The blended covariance is numerically singular."""


def ensemble_mean_and_deviations(ensemble) -> tuple[np.ndarray, np.ndarray]:
    """Mean (..., n_var) and deviation columns (..., n_var, n_ens)."""
    ens = np.asarray(ensemble, dtype=float)
    if ens.ndim < 2:
        raise DimensionMismatchError("ensemble must have shape (..., n_ens, n_var)")
    if ens.shape[-2] < 2:
        raise InsufficientEnsembleError("need at least 2 ensemble members")
    mean = ens.mean(axis=-2)
    deviations = np.swapaxes(ens - mean[..., None, :], -1, -2)
    return mean, deviations


def localization_weights(length: float, n_var: int) -> np.ndarray:
    """Gaussian decorrelation weights exp(-d^2 / (2 L^2)) on the cyclic grid."""
    if not length > 0.0:
        raise ValueError("decorrelation length must be positive")
    if np.isinf(length):
        return np.ones((n_var, n_var))
    i = np.arange(n_var)
    d = np.abs(i[:, None] - i[None, :])
    d = np.minimum(d, n_var - d)
    return np.exp(-0.5 * (d / length) ** 2)


@dataclass
class CovarianceSettings:
    """Per-experiment knobs for building the blended covariance."""

    gamma: float = 0.5
    loc_length: float = 4.0
    localize: bool = True


def blended_matrix(b0_diag, deviations, gamma, localization=None) -> np.ndarray:
    """Dense gamma * diag(b0) + (1 - gamma)/(n_ens - 1) * rho o (D D^T)."""
    b0 = np.asarray(b0_diag, dtype=float)
    dev = np.asarray(deviations, dtype=float)
    n_var, n_ens = dev.shape[-2], dev.shape[-1]
    ens_cov = dev @ np.swapaxes(dev, -1, -2) / (n_ens - 1)
    if localization is not None:
        ens_cov = ens_cov * localization
    out = (1.0 - gamma) * ens_cov
    idx = np.arange(n_var)
    out[..., idx, idx] += gamma * b0
    return out


class CovarianceOperator:
    """Blended background covariance with matrix-free apply and solve.

    Parameters
    ----------
    b0_diag : (n_var,) fixed diagonal variances (all positive)
    deviations : (..., n_var, n_ens) ensemble deviation columns; leading axes
        describe a batch of independent operators (dense path only)
    gamma : blend weight in [0, 1]
    localization : (n_var, n_var) weight matrix, or None to skip localization
    """

    def __init__(self, b0_diag, deviations, gamma=0.5, localization=None,
                 dense_cutoff=2000):
        b0 = np.asarray(b0_diag, dtype=float)
        dev = np.asarray(deviations, dtype=float)
        if dev.ndim < 2:
            raise DimensionMismatchError("deviations must have shape (..., n_var, n_ens)")
        if b0.shape != (dev.shape[-2],):
            raise DimensionMismatchError("b0 diagonal length must match n_var")
        if np.any(b0 <= 0.0):
            raise ValueError("B0 diagonal variances must be positive")
        if not 0.0 <= gamma <= 1.0:
            raise ValueError("blend weight gamma must lie in [0, 1]")
        if dev.shape[-1] < 2:
            raise InsufficientEnsembleError("need at least 2 ensemble members")
        self.n_var = dev.shape[-2]
        self.n_ens = dev.shape[-1]
        self.gamma = float(gamma)
        self.b0_diag = b0
        self.deviations = dev
        self.rho = None if localization is None else np.asarray(localization, dtype=float)
        self._dense = self.n_var <= dense_cutoff
        if self._dense:
            self._matrix = blended_matrix(b0, dev, self.gamma, self.rho)
            try:
                chol = np.linalg.cholesky(self._matrix)
            except np.linalg.LinAlgError as err:
                raise CovarianceSingularError(
                    "blended covariance is singular (rank-deficient ensemble term); "
                    "use gamma > 0 to regularize"
                ) from err
            eye = np.broadcast_to(np.eye(self.n_var), self._matrix.shape)
            l_inv = np.linalg.solve(chol, eye)
            self._inverse = np.swapaxes(l_inv, -1, -2) @ l_inv
        elif dev.ndim != 2:
            raise NotImplementedError("matrix-free path supports a single operator only")

    def matrix(self) -> np.ndarray:
        """Dense B (built on demand on the matrix-free path)."""
        if self._dense:
            return self._matrix
        return blended_matrix(self.b0_diag, self.deviations, self.gamma, self.rho)

    def diagonal(self) -> np.ndarray:
        """diag(B), shape (..., n_var)."""
        if self._dense:
            return np.diagonal(self._matrix, axis1=-2, axis2=-1).copy()
        ens_var = np.sum(self.deviations**2, axis=-1) / (self.n_ens - 1)
        return self.gamma * self.b0_diag + (1.0 - self.gamma) * ens_var

    def inverse_diagonal(self) -> np.ndarray:
        """diag(B^-1), shape (..., n_var). Dense path only."""
        if not self._dense:
            raise NotImplementedError("inverse diagonal requires the dense path")
        return np.diagonal(self._inverse, axis1=-2, axis2=-1).copy()

    def apply(self, v) -> np.ndarray:
        """B v, broadcasting over leading axes of v."""
        v = self._check(v)
        if self._dense:
            return (self._matrix @ v[..., None])[..., 0]
        return self._apply_matrix_free(v)

    def inverse_apply(self, v) -> np.ndarray:
        """Solve B u = v for u."""
        v = self._check(v)
        if self._dense:
            return (self._inverse @ v[..., None])[..., 0]
        return self._solve_cg(v)

    def _check(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != self.n_var:
            raise DimensionMismatchError(
                f"vector length {v.shape[-1]} != n_var {self.n_var}"
            )
        return v

    def _apply_matrix_free(self, v):
        out = self.gamma * self.b0_diag * v
        dev = self.deviations
        scale = (1.0 - self.gamma) / (self.n_ens - 1)
        if self.rho is None:
            out = out + scale * (dev @ (np.swapaxes(dev, -1, -2) @ v[..., None]))[..., 0]
        else:
            # rho o (d d^T) v = d o (rho (d o v)), summed over members
            dv = dev * v[..., :, None]
            out = out + scale * np.sum(dev * (self.rho @ dv), axis=-1)
        return out

    def _solve_cg(self, v):
        if v.ndim != 1:
            raise NotImplementedError("CG solve supports a single right-hand side")
        linop = scipy.sparse.linalg.LinearOperator(
            (self.n_var, self.n_var), matvec=lambda u: self._apply_matrix_free(u)
        )
        u, info = scipy.sparse.linalg.cg(linop, v, rtol=1e-12, atol=0.0,
                                         maxiter=10 * self.n_var)
        if info != 0:
            raise CovarianceSingularError(
                f"conjugate gradient did not converge (info={info}); "
                "use gamma > 0 to regularize"
            )
        return u
