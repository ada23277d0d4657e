"""Ensemble data assimilation on Lorenz-96.

A sampling filter that draws the analysis ensemble from the full posterior
with Hybrid Monte Carlo, alongside stochastic EnKF and MLEF baselines, and a
seeded twin-experiment harness that reproduces their RMSE statistics.
"""

from .core import RandomSource, RunStatistics, gaussian_vector, rmse, summarize
from .cov import (CovarianceOperator, CovarianceSettings, ensemble_mean_and_deviations,
                  localization_weights)
from .experiment import (ExperimentConfig, ExperimentResult, InstanceRecord,
                         run_experiment, tabulate)
from .filters import (AssimilationCycleInput, MlefResult, PosteriorDensity,
                      enkf_cycle, mlef_cycle, sampling_filter_cycle)
from .hmc import ChainConfig, ChainDiagnostics, hmc_chain
from .integrators import PhasePoint, TrajectorySpec, integrate_trajectory
from .model import Lorenz96Config, propagate, reference_initial_condition, tendency
from .obs import ObservationErrorModel, ObservationOperator, observe, synthesize_observations

__version__ = "0.1.0"

__all__ = [
    "AssimilationCycleInput",
    "ChainConfig",
    "ChainDiagnostics",
    "CovarianceOperator",
    "CovarianceSettings",
    "ExperimentConfig",
    "ExperimentResult",
    "InstanceRecord",
    "Lorenz96Config",
    "MlefResult",
    "ObservationErrorModel",
    "ObservationOperator",
    "PhasePoint",
    "PosteriorDensity",
    "RandomSource",
    "RunStatistics",
    "TrajectorySpec",
    "enkf_cycle",
    "ensemble_mean_and_deviations",
    "gaussian_vector",
    "hmc_chain",
    "integrate_trajectory",
    "localization_weights",
    "mlef_cycle",
    "observe",
    "propagate",
    "reference_initial_condition",
    "rmse",
    "run_experiment",
    "sampling_filter_cycle",
    "summarize",
    "synthesize_observations",
    "tabulate",
    "tendency",
]
