"""Assimilation filters: HMC sampling filter, stochastic EnKF, and MLEF.

Each filter exposes one forecast/analysis cycle. The sampling filter
propagates the analysis ensemble, builds the blended background covariance
from the forecast ensemble, and replaces the Kalman-style update with an HMC
chain that samples the posterior directly, started at the forecast mean. The
batch variant advances many independent filter instances in lock step; the
single-instance surface is the batch of one, so the two paths agree bitwise
for matching random streams.
"""

from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .core import DimensionMismatchError, RandomSource
from .cov import (CovarianceOperator, CovarianceSettings, blended_matrix,
                  ensemble_mean_and_deviations, localization_weights)
from .hmc import ChainConfig, ChainDiagnostics, run_chains
from .model import Lorenz96Config, propagate
from .obs import (ObservationErrorModel, ObservationOperator, jacobian_matrix,
                  jacobian_transpose_apply, observe)

CHAIN_START_MODES = ("forecast-mean", "enkf")


class CycleDivergenceError(RuntimeError):
    """The chain rejected too many consecutive proposals."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class AssimilationCycleInput:
    """Everything one forecast/analysis cycle needs."""

    ensemble: np.ndarray  # (n_ens, n_var) analysis members at t_start
    observation: np.ndarray  # (n_obs,) at t_end
    operator: ObservationOperator
    error_model: ObservationErrorModel
    b0_variances: np.ndarray  # fixed diagonal background covariance
    covariance: CovarianceSettings
    model: Lorenz96Config
    t_start: float
    t_end: float
    model_noise_std: np.ndarray | None = None  # optional diagonal model error

    def __post_init__(self):
        self.ensemble = np.asarray(self.ensemble, dtype=float)
        self.observation = np.asarray(self.observation, dtype=float)
        self.b0_variances = np.asarray(self.b0_variances, dtype=float)
        if self.ensemble.shape[-1] != self.model.n_var:
            raise DimensionMismatchError("ensemble dimension != model n_var")
        if self.observation.shape[-1] != self.operator.n_obs:
            raise DimensionMismatchError("observation length != operator n_obs")


class PosteriorDensity:
    """Negative log posterior for one cycle and its gradient.

    J(x)  = (x - xb)^T B^-1 (x - xb) / 2 + (y - H(x))^T R^-1 (y - H(x)) / 2
    dJ/dx = B^-1 (x - xb) - H'(x)^T R^-1 (y - H(x))

    Broadcasts over leading axes; a batched background with a matching batched
    covariance operator evaluates one independent posterior per batch row.
    """

    def __init__(self, background, covariance: CovarianceOperator, observation,
                 operator: ObservationOperator, obs_variances):
        self.background = np.asarray(background, dtype=float)
        self.covariance = covariance
        self.observation = np.asarray(observation, dtype=float)
        self.operator = operator
        self._r_inv = 1.0 / np.asarray(obs_variances, dtype=float)

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        dx = x - self.background
        u = self.covariance.inverse_apply(dx)
        resid = self.observation - observe(self.operator, x)
        return 0.5 * np.sum(dx * u, axis=-1) + 0.5 * np.sum(
            resid * resid * self._r_inv, axis=-1
        )

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        dx = x - self.background
        u = self.covariance.inverse_apply(dx)
        resid = self.observation - observe(self.operator, x)
        return u - jacobian_transpose_apply(self.operator, x, resid * self._r_inv)


def mass_matrix_diagonal(policy: str, covariance: CovarianceOperator,
                         scale: float = 1.0) -> np.ndarray:
    """Resolve a mass-policy name to a concrete positive diagonal."""
    if policy == "diag-b":
        return covariance.diagonal()
    if policy == "diag-b-inverse":
        return covariance.inverse_diagonal()
    if policy == "identity":
        return scale * np.ones(covariance.n_var)
    raise ValueError(f"unknown mass policy {policy!r}")


def _forecast(ensemble, inp: AssimilationCycleInput, generators=None):
    forecast = propagate(ensemble, inp.t_start, inp.t_end, inp.model)
    if inp.model_noise_std is not None:
        std = np.asarray(inp.model_noise_std, dtype=float)
        noise = np.stack([g.standard_normal(forecast.shape[-2:]) for g in generators]) \
            if forecast.ndim == 3 else generators[0].standard_normal(forecast.shape)
        forecast = forecast + std * noise
    return forecast


def sampling_filter_cycle_batch(inp: AssimilationCycleInput, ensembles,
                                chain_cfg: ChainConfig, generators,
                                rejection_cap: int | None = None,
                                chain_start: str = "forecast-mean"):
    """One sampling-filter cycle for a batch of independent instances.

    ensembles: (n_instances, n_ens, n_var); inp.ensemble is ignored here.
    Each instance consumes randomness only from its own generator. Returns
    (analysis ensembles, analysis means, diagnostics) where the diagnostics
    carry per-instance acceptance counts and divergence flags; divergence
    never aborts the batch.
    """
    if chain_start not in CHAIN_START_MODES:
        raise ValueError(f"unknown chain start mode {chain_start!r}")
    ensembles = np.asarray(ensembles, dtype=float)
    if ensembles.ndim != 3:
        raise ValueError("ensembles must have shape (n_instances, n_ens, n_var)")
    if rejection_cap is None:
        rejection_cap = 50 * chain_cfg.thinning
    forecast = _forecast(ensembles, inp, generators)
    mean, deviations = ensemble_mean_and_deviations(forecast)
    settings = inp.covariance
    rho = (localization_weights(settings.loc_length, inp.model.n_var)
           if settings.localize else None)
    covariance = CovarianceOperator(inp.b0_variances, deviations,
                                    gamma=settings.gamma, localization=rho)
    mass = mass_matrix_diagonal(chain_cfg.mass_policy, covariance,
                                chain_cfg.mass_scale)
    if chain_start == "enkf":
        start = np.stack([
            _enkf_update(forecast[i], inp, generators[i])[1]
            for i in range(forecast.shape[0])
        ])
    else:
        start = mean
    posterior = PosteriorDensity(mean, covariance, inp.observation, inp.operator,
                                 inp.error_model.variances)
    samples, diagnostics = run_chains(start, posterior, chain_cfg, generators,
                                      mass_diag=mass, rejection_cap=rejection_cap)
    return samples, samples.mean(axis=1), diagnostics


def sampling_filter_cycle(inp: AssimilationCycleInput, chain_cfg: ChainConfig,
                          rng: RandomSource, rejection_cap: int | None = None,
                          chain_start: str = "forecast-mean"):
    """One sampling-filter cycle: (analysis ensemble, analysis mean, diagnostics).

    Raises CycleDivergenceError, carrying the chain diagnostics, if the chain
    exceeds the consecutive-rejection cap (default 50 * thinning).
    """
    samples, means, diag = sampling_filter_cycle_batch(
        inp, inp.ensemble[None, :, :], chain_cfg, [rng.generator],
        rejection_cap=rejection_cap, chain_start=chain_start,
    )
    diagnostics = ChainDiagnostics(
        proposals=diag.proposals,
        acceptances=int(diag.acceptances[0]),
        delta_h=diag.delta_h[0],
        diverged=bool(diag.diverged[0]),
        gradient_evals=diag.gradient_evals,
    )
    if diagnostics.diverged:
        raise CycleDivergenceError(
            f"chain exceeded the consecutive-rejection cap "
            f"(acceptance rate {diagnostics.acceptance_rate:.3f})",
            diagnostics=diagnostics,
        )
    return samples[0], means[0], diagnostics


def kalman_gain(background_cov, jacobian, obs_variances) -> np.ndarray:
    """K = B H^T (H B H^T + R)^-1 for diagonal R."""
    B = np.asarray(background_cov, dtype=float)
    H = np.asarray(jacobian, dtype=float)
    HB = H @ B
    innovation_cov = HB @ H.T + np.diag(np.asarray(obs_variances, dtype=float))
    return np.linalg.solve(innovation_cov, HB).T


def _enkf_update(forecast, inp: AssimilationCycleInput, generator):
    mean, deviations = ensemble_mean_and_deviations(forecast)
    settings = inp.covariance
    rho = (localization_weights(settings.loc_length, inp.model.n_var)
           if settings.localize else None)
    B = blended_matrix(inp.b0_variances, deviations, settings.gamma, rho)
    H = jacobian_matrix(inp.operator, mean)
    K = kalman_gain(B, H, inp.error_model.variances)
    perturbations = inp.error_model.stddev * generator.standard_normal(
        (forecast.shape[0], inp.operator.n_obs)
    )
    innovations = (inp.observation + perturbations) - observe(inp.operator, forecast)
    analysis = forecast + innovations @ K.T
    return analysis, analysis.mean(axis=0)


def enkf_cycle(inp: AssimilationCycleInput, rng: RandomSource):
    """Stochastic (perturbed-observations) EnKF cycle: (ensemble, mean).

    The gain uses the analytic linearization of the observation operator at
    the forecast mean and is shared by all members; each member assimilates
    its own noisy copy of the observation.
    """
    if inp.ensemble.shape[0] < 2:
        raise ValueError("EnKF needs at least 2 ensemble members")
    forecast = _forecast(inp.ensemble, inp, [rng.generator])
    return _enkf_update(forecast, inp, rng.generator)


@dataclass
class MlefResult:
    optimum: np.ndarray  # (n_var,)
    perturbations: np.ndarray  # scaled analysis perturbations, (n_var, n_ens)
    converged: bool
    iterations: int
    cost: float


def mlef_cycle(inp: AssimilationCycleInput, center=None, max_iterations: int = 100,
               gradient_tol: float = 1.0e-6, iterate_callback=None) -> MlefResult:
    """Maximum likelihood ensemble filter cycle.

    The previous optimum (``center``, ensemble mean if omitted) and the
    perturbed members are forecast to build the covariance square-root
    columns b(e) = M(x_opt + a(e)) - M(x_opt). The cost is minimized over
    ensemble-space control variables after Hessian preconditioning with
    (I + C(0))^(-1/2), C = Z^T Z, where column e of Z is
    R^(-1/2) [H(x + b(e)) - H(x)]. Non-convergence returns the best iterate,
    flagged.
    """
    members = inp.ensemble
    n_ens = members.shape[0]
    if n_ens < 2:
        raise ValueError("MLEF needs at least 2 ensemble members")
    center = members.mean(axis=0) if center is None else np.asarray(center, float)
    prop = propagate(np.vstack([center[None, :], members]), inp.t_start, inp.t_end,
                     inp.model)
    xb = prop[0]
    b_rows = prop[1:] - xb  # (n_ens, n_var)
    b_half = b_rows.T
    y = inp.observation
    r_std = inp.error_model.stddev
    r_inv = 1.0 / inp.error_model.variances

    def z_matrix(x):
        hx = observe(inp.operator, x)
        h_pert = observe(inp.operator, x[None, :] + b_rows)
        return ((h_pert - hx) / r_std).T  # (n_obs, n_ens)

    def sym_inv_sqrt(c):
        w, v = np.linalg.eigh(np.eye(n_ens) + c)
        return (v * w**-0.5) @ v.T

    z0 = z_matrix(xb)
    inv_sqrt0 = sym_inv_sqrt(z0.T @ z0)
    inv0 = inv_sqrt0 @ inv_sqrt0

    def cost_and_grad(xi):
        with np.errstate(over="ignore", invalid="ignore"):
            x = xb + b_half @ (inv_sqrt0 @ xi)
            resid = y - observe(inp.operator, x)
            cost = 0.5 * (xi @ inv0 @ xi) + 0.5 * np.sum(resid * resid * r_inv)
            grad = inv0 @ xi - inv_sqrt0 @ (z_matrix(x).T @ (resid / r_std))
        return cost, grad

    result = scipy.optimize.minimize(
        cost_and_grad, np.zeros(n_ens), jac=True, method="BFGS",
        callback=iterate_callback,
        options={"maxiter": max_iterations, "gtol": gradient_tol},
    )
    # a diverging optimum can be non-finite; callers check the returned state
    with np.errstate(over="ignore", invalid="ignore"):
        optimum = xb + b_half @ (inv_sqrt0 @ result.x)
        z_opt = z_matrix(optimum)
        perturbations = b_half @ sym_inv_sqrt(z_opt.T @ z_opt)
    return MlefResult(
        optimum=optimum,
        perturbations=perturbations,
        converged=bool(result.success),
        iterations=int(result.nit),
        cost=float(result.fun),
    )
