"""Twin-experiment harness: configuration, multi-instance runs, statistics, export.

An experiment builds one reference ("truth") trajectory, synthesizes one
observation sequence shared by all instances, then runs the configured filter
for every instance on its own random stream. Per-instance, per-time RMSE
series and chain diagnostics are collected into records that round-trip
through JSON and CSV.
"""

import csv
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import core
from .core import EmptyWindowError, RandomSource, RunStatistics, summarize
from .cov import CovarianceSettings
from .filters import (AssimilationCycleInput, enkf_cycle, mlef_cycle,
                      sampling_filter_cycle_batch)
from .hmc import ChainConfig
from .integrators import INTEGRATOR_KINDS, TrajectorySpec
from .model import BlowUpError, Lorenz96Config, propagate, reference_initial_condition
from .obs import OPERATOR_KINDS, ObservationOperator, synthesize_observations

FILTER_KINDS = ("hmc", "enkf", "mlef")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    """Resolved settings for one twin experiment."""

    # model
    n_var: int = 40
    forcing: float = 8.0
    model_dt: float = 0.005
    # observations
    operator_kind: str = "linear"
    observed_indices: tuple | None = None  # 0-based; None selects every third
    exp_factor: float = 0.2
    threshold: float = 0.5
    noise_level: float = 0.05
    noise_floor: float = 1.0e-8
    # covariance
    gamma: float = 0.5
    enkf_gamma: float | None = None  # None: EnKF uses the same blend weight
    loc_length: float = 4.0
    localize: bool = True
    # chain
    integrator: str = "verlet"
    step: float = 0.01
    n_steps: int = 10
    jitter: float = 0.2
    burn_in: int = 200
    thinning: int = 30
    mass_policy: str = "diag-b"
    mass_scale: float = 1.0
    chain_start: str = "forecast-mean"
    rejection_cap: int | None = None  # None resolves to 50 * thinning
    # protocol
    filter_kind: str = "hmc"
    t_start: float = 0.0
    t_end: float = 10.0
    interval: float = 0.1
    n_ens: int = 30
    n_instances: int = 100
    seed: int = 1
    background_spread: float = 0.08
    workers: int = 1

    def __post_init__(self):
        if self.filter_kind not in FILTER_KINDS:
            raise ConfigError(f"unknown filter kind {self.filter_kind!r}")
        if self.operator_kind not in OPERATOR_KINDS:
            raise ConfigError(f"unknown operator kind {self.operator_kind!r}")
        if self.integrator not in INTEGRATOR_KINDS:
            raise ConfigError(f"unknown integrator kind {self.integrator!r}")
        if self.interval <= 0.0:
            raise ConfigError("assimilation interval must be positive")
        if self.t_end <= self.t_start:
            raise ConfigError("window end must exceed its start")
        if self.n_instances < 1:
            raise ConfigError("instance count must be >= 1")
        if self.n_ens < 1:
            raise ConfigError("ensemble size must be >= 1")
        if self.workers < 1:
            raise ConfigError("worker count must be >= 1")
        span = self.t_end - self.t_start
        n = round(span / self.interval)
        if n < 1 or abs(n * self.interval - span) > 1e-9:
            raise ConfigError("window length must be a multiple of the interval")
        if self.observed_indices is not None:
            self.observed_indices = tuple(int(i) for i in self.observed_indices)

    @property
    def n_cycles(self) -> int:
        return round((self.t_end - self.t_start) / self.interval)

    def model(self) -> Lorenz96Config:
        return Lorenz96Config(n_var=self.n_var, forcing=self.forcing, dt=self.model_dt)

    def operator(self) -> ObservationOperator:
        return ObservationOperator(
            kind=self.operator_kind,
            n_var=self.n_var,
            indices=None if self.observed_indices is None
            else np.asarray(self.observed_indices),
            exp_factor=self.exp_factor,
            threshold=self.threshold,
        )

    def chain_config(self) -> ChainConfig:
        return ChainConfig(
            n_samples=self.n_ens,
            trajectory=TrajectorySpec(kind=self.integrator, step=self.step,
                                      n_steps=self.n_steps, jitter=self.jitter),
            burn_in=self.burn_in,
            thinning=self.thinning,
            mass_policy=self.mass_policy,
            mass_scale=self.mass_scale,
        )

    def covariance_settings(self) -> CovarianceSettings:
        gamma = self.gamma
        if self.filter_kind == "enkf" and self.enkf_gamma is not None:
            gamma = self.enkf_gamma
        return CovarianceSettings(gamma=gamma, loc_length=self.loc_length,
                                  localize=self.localize)

    def as_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class InstanceRecord:
    """Per-instance RMSE and chain-diagnostic series at assimilation times."""

    instance: int
    times: np.ndarray
    rmse: np.ndarray  # NaN from the divergence time onward
    acceptance: np.ndarray  # chain acceptance rate per cycle; NaN where undefined
    diverged: bool = False
    diverged_at: float | None = None


@dataclass
class ExperimentResult:
    fingerprint: str
    filter_kind: str
    config: dict
    instances: list = field(default_factory=list)


@dataclass
class _Setup:
    """Experiment-wide inputs shared by all instances."""

    operator: ObservationOperator
    error_model: object
    observations: np.ndarray  # (n_cycles, n_obs), observation k is at times[k+1]
    truth: np.ndarray  # (n_cycles + 1, n_var)
    times: np.ndarray
    b0_variances: np.ndarray
    x0_background: np.ndarray


def build_setup(config: ExperimentConfig) -> _Setup:
    """Truth trajectory, shared observations, and the shared background state.

    Everything here comes from stream 0 of the experiment seed; instances own
    streams 1..n_instances.
    """
    model = config.model()
    op = config.operator()
    n_cycles = config.n_cycles
    times = config.t_start + config.interval * np.arange(n_cycles + 1)
    truth = np.empty((n_cycles + 1, model.n_var))
    truth[0] = reference_initial_condition(model)
    for k in range(1, n_cycles + 1):
        truth[k] = propagate(truth[k - 1], times[k - 1], times[k], model)
    setup_rng = RandomSource(config.seed, stream=0)
    observations, error_model = synthesize_observations(
        truth[1:], op, setup_rng, level=config.noise_level, floor=config.noise_floor
    )
    # background spread: fraction of the average magnitude of the initial state
    b0_std = config.background_spread * float(np.mean(np.abs(truth[0])))
    b0_variances = np.full(model.n_var, b0_std * b0_std)
    x0_background = truth[0] + b0_std * setup_rng.generator.standard_normal(model.n_var)
    return _Setup(op, error_model, observations, truth, times, b0_variances,
                  x0_background)


def _initial_ensemble(setup: _Setup, generator, n_ens):
    spread = np.sqrt(setup.b0_variances)
    return setup.x0_background + spread * generator.standard_normal(
        (n_ens, setup.x0_background.size)
    )


def _cycle_input(config, setup, ensemble, k) -> AssimilationCycleInput:
    return AssimilationCycleInput(
        ensemble=ensemble,
        observation=setup.observations[k - 1],
        operator=setup.operator,
        error_model=setup.error_model,
        b0_variances=setup.b0_variances,
        covariance=config.covariance_settings(),
        model=config.model(),
        t_start=setup.times[k - 1],
        t_end=setup.times[k],
    )


def _run_hmc_instances(config, setup, instance_ids):
    n = len(instance_ids)
    n_cycles = config.n_cycles
    generators = [RandomSource(config.seed, i).generator for i in instance_ids]
    ensembles = np.stack(
        [_initial_ensemble(setup, g, config.n_ens) for g in generators]
    )
    chain_cfg = config.chain_config()
    cap = config.rejection_cap if config.rejection_cap is not None \
        else 50 * config.thinning
    rmse = np.full((n, n_cycles + 1), np.nan)
    acceptance = np.full((n, n_cycles + 1), np.nan)
    rmse[:, 0] = core.rmse(ensembles.mean(axis=1), setup.truth[0])
    alive = np.ones(n, dtype=bool)
    diverged_at = [None] * n
    for k in range(1, n_cycles + 1):
        inp = _cycle_input(config, setup, ensembles[0], k)
        ensembles, means, diag = sampling_filter_cycle_batch(
            inp, ensembles, chain_cfg, generators,
            rejection_cap=cap, chain_start=config.chain_start,
        )
        newly_dead = alive & np.asarray(diag.diverged)
        for i in np.flatnonzero(newly_dead):
            diverged_at[i] = float(setup.times[k])
        alive &= ~np.asarray(diag.diverged)
        rmse[alive, k] = core.rmse(means[alive], setup.truth[k])
        acceptance[alive, k] = diag.acceptance_rate[alive]
    return [
        InstanceRecord(
            instance=int(instance_ids[i]),
            times=setup.times.copy(),
            rmse=rmse[i],
            acceptance=acceptance[i],
            diverged=not alive[i],
            diverged_at=diverged_at[i],
        )
        for i in range(n)
    ]


def _run_enkf_instance(config, setup, instance_id):
    n_cycles = config.n_cycles
    rng = RandomSource(config.seed, instance_id)
    ensemble = _initial_ensemble(setup, rng.generator, config.n_ens)
    rmse = np.full(n_cycles + 1, np.nan)
    acceptance = np.full(n_cycles + 1, np.nan)
    rmse[0] = core.rmse(ensemble.mean(axis=0), setup.truth[0])
    diverged_at = None
    for k in range(1, n_cycles + 1):
        inp = _cycle_input(config, setup, ensemble, k)
        try:
            ensemble, mean = enkf_cycle(inp, rng)
        except (BlowUpError, np.linalg.LinAlgError):
            diverged_at = float(setup.times[k])
            break
        if not np.all(np.isfinite(mean)):
            diverged_at = float(setup.times[k])
            break
        rmse[k] = core.rmse(mean, setup.truth[k])
    return InstanceRecord(
        instance=instance_id, times=setup.times.copy(), rmse=rmse,
        acceptance=acceptance, diverged=diverged_at is not None,
        diverged_at=diverged_at,
    )


def _run_mlef_instance(config, setup, instance_id):
    n_cycles = config.n_cycles
    rng = RandomSource(config.seed, instance_id)
    members = _initial_ensemble(setup, rng.generator, config.n_ens)
    center = members.mean(axis=0)
    # scaled perturbations: implied covariance matches the sample covariance
    a_half = (members - center).T / math.sqrt(max(config.n_ens - 1, 1))
    rmse = np.full(n_cycles + 1, np.nan)
    acceptance = np.full(n_cycles + 1, np.nan)
    rmse[0] = core.rmse(center, setup.truth[0])
    diverged_at = None
    for k in range(1, n_cycles + 1):
        inp = _cycle_input(config, setup, center + a_half.T, k)
        try:
            result = mlef_cycle(inp, center=center)
        except (BlowUpError, np.linalg.LinAlgError):
            diverged_at = float(setup.times[k])
            break
        if not np.all(np.isfinite(result.optimum)):
            diverged_at = float(setup.times[k])
            break
        center = result.optimum
        a_half = result.perturbations
        rmse[k] = core.rmse(center, setup.truth[k])
    return InstanceRecord(
        instance=instance_id, times=setup.times.copy(), rmse=rmse,
        acceptance=acceptance, diverged=diverged_at is not None,
        diverged_at=diverged_at,
    )


def _run_instances(config: ExperimentConfig, setup: _Setup, instance_ids):
    if config.filter_kind == "hmc":
        return _run_hmc_instances(config, setup, list(instance_ids))
    runner = _run_enkf_instance if config.filter_kind == "enkf" else _run_mlef_instance
    return [runner(config, setup, i) for i in instance_ids]


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run the configured filter for every instance on its own stream.

    Cycle divergences are recorded per instance (RMSE becomes NaN from the
    divergence time onward) and never abort the batch. Results are
    independent of the worker count because each instance consumes only its
    own random stream.
    """
    setup = build_setup(config)
    ids = list(range(1, config.n_instances + 1))
    n_workers = min(config.workers, len(ids))
    if n_workers > 1:
        chunks = [list(c) for c in np.array_split(ids, n_workers)]
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = [pool.submit(_run_instances, config, setup, c) for c in chunks]
            records = [rec for f in futures for rec in f.result()]
    else:
        records = _run_instances(config, setup, ids)
    records.sort(key=lambda r: r.instance)
    return ExperimentResult(
        fingerprint=config.fingerprint(),
        filter_kind=config.filter_kind,
        config=config.as_dict(),
        instances=records,
    )


def tabulate(result: ExperimentResult, window=(8.0, 10.0)):
    """Pooled RMSE statistics over instances x times within the window.

    Diverged instances are excluded from the statistics; their count is
    reported through the returned divergence rate.
    """
    lo, hi = float(window[0]), float(window[1])
    if hi < lo:
        raise EmptyWindowError("window end precedes its start")
    values = []
    n_diverged = 0
    for rec in result.instances:
        if rec.diverged:
            n_diverged += 1
            continue
        mask = (rec.times >= lo - 1e-12) & (rec.times <= hi + 1e-12)
        values.append(rec.rmse[mask])
    if not values or sum(v.size for v in values) == 0:
        raise EmptyWindowError(f"window [{lo}, {hi}] selected no data")
    pooled = np.concatenate(values)
    pooled = pooled[np.isfinite(pooled)]
    if pooled.size == 0:
        raise EmptyWindowError(f"window [{lo}, {hi}] selected no finite values")
    stats = summarize(pooled)
    divergence_rate = n_diverged / len(result.instances)
    return stats, divergence_rate


_TABLE_COLUMNS = ("Min", "Max", "Mean", "Std", "Mean+2Std", "Mean-2Std")


def format_table(stats: RunStatistics, divergence_rate: float, label: str = "RMSE") -> str:
    """One-row statistics table in the Min/Max/Mean/Std/Mean+-2Std layout."""
    row = (stats.minimum, stats.maximum, stats.mean, stats.std,
           stats.mean_plus_2std, stats.mean_minus_2std)
    header = f"{'':>12}" + "".join(f"{c:>12}" for c in _TABLE_COLUMNS)
    body = f"{label:>12}" + "".join(f"{v:>12.6f}" for v in row)
    footer = f"divergence rate: {divergence_rate:.2%}"
    return "\n".join([header, body, footer])


def _nan_to_none(values):
    return [None if (v is None or not np.isfinite(v)) else float(v) for v in values]


def _none_to_nan(values):
    return np.array([np.nan if v is None else float(v) for v in values])


def write_records_json(result: ExperimentResult, path):
    payload = {
        "fingerprint": result.fingerprint,
        "filter": result.filter_kind,
        "config": result.config,
        "instances": [
            {
                "instance": rec.instance,
                "diverged": rec.diverged,
                "diverged_at": rec.diverged_at,
                "times": [float(t) for t in rec.times],
                "rmse": _nan_to_none(rec.rmse),
                "acceptance": _nan_to_none(rec.acceptance),
            }
            for rec in result.instances
        ],
    }
    try:
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)
    except OSError as err:
        raise OSError(f"cannot write records to {path}: {err}") from err


def read_records_json(path) -> ExperimentResult:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except OSError as err:
        raise OSError(f"cannot read records from {path}: {err}") from err
    instances = [
        InstanceRecord(
            instance=int(item["instance"]),
            times=np.asarray(item["times"], dtype=float),
            rmse=_none_to_nan(item["rmse"]),
            acceptance=_none_to_nan(item["acceptance"]),
            diverged=bool(item["diverged"]),
            diverged_at=item["diverged_at"],
        )
        for item in payload["instances"]
    ]
    return ExperimentResult(
        fingerprint=payload["fingerprint"],
        filter_kind=payload["filter"],
        config=payload.get("config", {}),
        instances=instances,
    )


def write_records_csv(result: ExperimentResult, path):
    """One row per (instance, time): rmse and chain acceptance rate."""
    try:
        with open(path, "w", newline="") as fh:
            fh.write(f"# fingerprint={result.fingerprint}\n")
            fh.write(f"# filter={result.filter_kind}\n")
            writer = csv.writer(fh)
            writer.writerow(["instance", "time", "rmse", "acceptance_rate"])
            for rec in result.instances:
                for t, r, a in zip(rec.times, rec.rmse, rec.acceptance):
                    writer.writerow([
                        rec.instance,
                        f"{t:.10g}",
                        "" if not np.isfinite(r) else repr(float(r)),
                        "" if not np.isfinite(a) else repr(float(a)),
                    ])
    except OSError as err:
        raise OSError(f"cannot write records to {path}: {err}") from err


def read_records_csv(path) -> ExperimentResult:
    """Rebuild records from CSV; divergence is inferred from trailing NaN RMSE."""
    fingerprint = ""
    filter_kind = ""
    series: dict[int, list] = {}
    try:
        with open(path, newline="") as fh:
            rows = []
            for line in fh:
                if line.startswith("# fingerprint="):
                    fingerprint = line.strip().split("=", 1)[1]
                elif line.startswith("# filter="):
                    filter_kind = line.strip().split("=", 1)[1]
                elif line.strip():
                    rows.append(line)
    except OSError as err:
        raise OSError(f"cannot read records from {path}: {err}") from err
    reader = csv.DictReader(rows)
    for row in reader:
        entry = series.setdefault(int(row["instance"]), [])
        entry.append((
            float(row["time"]),
            float(row["rmse"]) if row["rmse"] else np.nan,
            float(row["acceptance_rate"]) if row["acceptance_rate"] else np.nan,
        ))
    instances = []
    for instance_id in sorted(series):
        entry = sorted(series[instance_id])
        times = np.array([e[0] for e in entry])
        rmse = np.array([e[1] for e in entry])
        acceptance = np.array([e[2] for e in entry])
        missing = np.flatnonzero(~np.isfinite(rmse[1:])) + 1
        diverged = missing.size > 0
        instances.append(InstanceRecord(
            instance=instance_id, times=times, rmse=rmse, acceptance=acceptance,
            diverged=diverged,
            diverged_at=float(times[missing[0]]) if diverged else None,
        ))
    return ExperimentResult(fingerprint=fingerprint, filter_kind=filter_kind,
                            config={}, instances=instances)


def export_records(result: ExperimentResult, path, fmt: str):
    if fmt == "json":
        write_records_json(result, path)
    elif fmt == "csv":
        write_records_csv(result, path)
    else:
        raise ConfigError(f"unknown export format {fmt!r}")


def load_records(path) -> ExperimentResult:
    """Read records in either supported format, sniffing the first byte."""
    try:
        with open(path) as fh:
            head = fh.read(1)
    except OSError as err:
        raise OSError(f"cannot read records from {path}: {err}") from err
    if head == "{":
        return read_records_json(path)
    return read_records_csv(path)
