"""Shared numeric primitives: seeded streams, Gaussian sampling, error statistics.

State vectors are plain 1-D float64 numpy arrays. Ensembles stack members
along the second-to-last axis, shape ``(..., n_ens, n_var)``. Every operation
broadcasts over leading axes, so one code path serves a single state or a
batch of independent runs.
"""

from dataclasses import dataclass

import numpy as np


class DimensionMismatchError(ValueError):
    """Operands disagree on the state or observation dimension."""


class EmptyWindowError(ValueError):
    """A statistics window selected no data."""


class RandomSource:
    """Counter-based random stream identified by (seed, stream).

    The same (seed, stream) pair reproduces a bit-identical draw sequence
    across runs; distinct stream ids are statistically independent. Repetition
    i of an experiment owns stream i, so instances can run in any order or in
    parallel without affecting each other's draws.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed % 2**64, self.stream % 2**64], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, stream: int) -> "RandomSource":
        """A fresh source with the same seed on another stream."""
        return RandomSource(self.seed, stream)

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed}, stream={self.stream})"


def gaussian_vector(rng: RandomSource, mean, stddev) -> np.ndarray:
    """Draw mean + diag(stddev) * z with z standard normal from ``rng``."""
    mean = np.asarray(mean, dtype=float)
    stddev = np.asarray(stddev, dtype=float)
    if mean.shape != stddev.shape:
        raise DimensionMismatchError(
            f"mean has shape {mean.shape}, stddev has shape {stddev.shape}"
        )
    if np.any(stddev < 0.0):
        raise ValueError("stddev entries must be nonnegative")
    return mean + stddev * rng.generator.standard_normal(mean.shape)


def rmse(x, truth):
    """Root mean squared error over state components (last axis)."""
    x = np.asarray(x, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if x.shape[-1] != truth.shape[-1]:
        raise DimensionMismatchError(
            f"state length {x.shape[-1]} != truth length {truth.shape[-1]}"
        )
    d = x - truth
    out = np.sqrt(np.mean(d * d, axis=-1))
    return float(out) if out.ndim == 0 else out


def ensemble_mean(ensemble) -> np.ndarray:
    """Arithmetic per-component mean over members (axis -2)."""
    ensemble = np.asarray(ensemble, dtype=float)
    if ensemble.ndim < 2:
        raise DimensionMismatchError("ensemble must have shape (..., n_ens, n_var)")
    return ensemble.mean(axis=-2)


@dataclass(frozen=True)
class RunStatistics:
    """Summary of an RMSE series over a time window."""

    n: int
    minimum: float
    maximum: float
    mean: float
    std: float

    @property
    def mean_plus_2std(self) -> float:
        return self.mean + 2.0 * self.std

    @property
    def mean_minus_2std(self) -> float:
        return self.mean - 2.0 * self.std


def summarize(series) -> RunStatistics:
    """Min/max/mean/sample-std of a nonempty series (std uses ddof=1)."""
    values = np.asarray(series, dtype=float).ravel()
    if values.size == 0:
        raise EmptyWindowError("cannot summarize an empty series")
    std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return RunStatistics(
        n=int(values.size),
        minimum=float(values.min()),
        maximum=float(values.max()),
        mean=float(values.mean()),
        std=std,
    )
