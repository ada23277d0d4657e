"""Hybrid Monte Carlo sampling: momentum refresh, proposal, accept/reject.

The chain targets pi(x) proportional to exp(-J(x)) for a potential J given
through the evaluate/gradient interface. One transition draws a momentum
p ~ N(0, M), integrates the Hamiltonian dynamics for a randomized-step
trajectory, and accepts the endpoint with probability min(1, exp(-dH)).
Rejected proposals repeat the current state, which still counts as a chain
state for burn-in and thinning purposes.

``run_chains`` advances a whole batch of independent chains in lock step
(one vectorized proposal per transition); ``hmc_chain`` is the
single-chain surface over the same driver, so both paths produce
bit-identical results for matching streams.
"""

from dataclasses import dataclass, field

import numpy as np

from .core import RandomSource
from .integrators import PhasePoint, TrajectorySpec, advance

MASS_POLICIES = ("diag-b", "diag-b-inverse", "identity")


@dataclass
class ChainConfig:
    """Burn-in, thinning, sample count, proposal trajectory, mass policy."""

    n_samples: int
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    burn_in: int = 200
    thinning: int = 30
    mass_policy: str = "diag-b-inverse"
    mass_scale: float = 1.0  # identity policy only

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.mass_policy not in MASS_POLICIES:
            raise ValueError(f"unknown mass policy {self.mass_policy!r}")

    @property
    def n_proposals(self) -> int:
        return self.burn_in + self.n_samples * self.thinning


@dataclass
class ChainDiagnostics:
    proposals: int
    acceptances: int | np.ndarray
    delta_h: np.ndarray  # per-proposal energy loss, (n_prop,) or (B, n_prop)
    diverged: bool | np.ndarray = False
    gradient_evals: int = 0

    @property
    def acceptance_rate(self):
        return self.acceptances / self.proposals

    @property
    def nonfinite_proposals(self):
        return np.sum(~np.isfinite(self.delta_h), axis=-1)


def hamiltonian(z: PhasePoint, mass_diag, pot):
    """H(p, x) = p^T M^-1 p / 2 + J(x)."""
    mass = np.asarray(mass_diag, dtype=float)
    kinetic = 0.5 * np.sum(z.p * z.p / mass, axis=-1)
    return kinetic + pot.evaluate(z.x)


def acceptance_probability(delta_h):
    """min(1, exp(-dH)); non-finite dH propagates to a non-accepting value."""
    with np.errstate(invalid="ignore"):
        return np.exp(np.minimum(-np.asarray(delta_h, dtype=float), 0.0))


def energy_loss_standard(z_start: PhasePoint, z_end: PhasePoint, mass_diag, pot):
    """dH = H(p*, x*) - H(p_k, x_k) for the splitting integrators."""
    return hamiltonian(z_end, mass_diag, pot) - hamiltonian(z_start, mass_diag, pot)


def energy_loss_hilbert(record, mass_diag, pot, summation: str = "start"):
    """Energy loss for the trigonometric integrator.

    Implements the four-term expression with phi = J: the potential
    difference, the h^2/8 mass-weighted gradient-norm difference, the
    (m - 1)-term sum, and the trapezoid-like endpoint term. As printed, the
    sum holds (p_k, x_k) fixed; ``summation="path"`` instead evaluates it at
    the recorded intermediate states, for comparing the two readings.
    """
    if record.kind != "hilbert":
        raise ValueError(f"energy_loss_hilbert requires a hilbert trajectory, "
                         f"got {record.kind!r}")
    mass = np.asarray(mass_diag, dtype=float)
    h = np.asarray(record.h, dtype=float)
    g_k = record.grad_start
    g_e = record.grad_end
    x_k, p_k = record.start
    x_e, p_e = record.end
    phi_diff = pot.evaluate(x_e) - pot.evaluate(x_k)
    grad_norm_term = (h * h / 8.0) * (
        np.sum(g_k * g_k / mass, axis=-1) - np.sum(g_e * g_e / mass, axis=-1)
    )
    d_start = np.sum(p_k * (-g_k), axis=-1)
    d_end = np.sum(p_e * (-g_e), axis=-1)
    if summation == "start":
        inner = (record.n_steps - 1) * d_start
    elif summation == "path":
        if record.n_steps > 1 and len(record.path) != record.n_steps - 1:
            raise ValueError("path summation needs a trajectory recorded with "
                             "record_path=True")
        inner = sum(
            (np.sum(z.p * (-pot.gradient(z.x)), axis=-1) for z in record.path),
            start=np.zeros_like(d_start),
        )
    else:
        raise ValueError(f"unknown summation mode {summation!r}")
    return phi_diff + grad_norm_term + h * inner + 0.5 * h * (d_start + d_end)


def _energy_loss(record, mass_diag, pot):
    if record.kind == "hilbert":
        return energy_loss_hilbert(record, mass_diag, pot)
    return energy_loss_standard(record.start, record.end, mass_diag, pot)


def run_chains(x0, pot, cfg: ChainConfig, generators, mass_diag=None,
               rejection_cap: int | None = None):
    """Advance len(generators) independent chains and collect thinned samples.

    x0: (B, n_var) start states (every chain starts fresh: burn-in included).
    pot: potential broadcasting over the batch axis.
    generators: one numpy Generator per chain; each chain consumes only its
        own stream (bulk pre-draws), so results do not depend on batching.
    mass_diag: (n_var,) or (B, n_var) positive diagonal; identity if None.
    rejection_cap: consecutive-rejection count after which a chain is flagged
        diverged (it keeps running; the flag is reported).

    Returns (samples, diagnostics) with samples of shape (B, n_samples, n_var).
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 2:
        raise ValueError("x0 must have shape (n_chains, n_var)")
    n_chains, n_var = x0.shape
    if len(generators) != n_chains:
        raise ValueError("need one generator per chain")
    if mass_diag is None:
        mass_diag = np.ones(n_var)
    mass = np.asarray(mass_diag, dtype=float)
    if np.any(mass <= 0.0):
        raise ValueError("mass diagonal must be positive")
    spec = cfg.trajectory
    n_prop = cfg.n_proposals

    # one bulk pre-draw per chain fixes each stream's consumption pattern
    normals = np.stack([g.standard_normal((n_prop, n_var)) for g in generators])
    uniforms = np.stack([g.random((n_prop, 2)) for g in generators])

    sqrt_mass = np.sqrt(mass)
    x = x0.copy()
    samples = np.empty((n_chains, cfg.n_samples, n_var))
    delta_h = np.empty((n_chains, n_prop))
    n_accept = np.zeros(n_chains, dtype=int)
    consec_rej = np.zeros(n_chains, dtype=int)
    diverged = np.zeros(n_chains, dtype=bool)
    grad_evals = 0
    collected = 0

    for j in range(n_prop):
        p = sqrt_mass * normals[:, j, :]
        r = (2.0 * uniforms[:, j, 0] - 1.0) * spec.jitter
        h = (1.0 + r) * spec.step
        with np.errstate(over="ignore", invalid="ignore"):
            rec = advance(PhasePoint(x, p), spec.kind, h, spec.n_steps, mass, pot)
            dh = _energy_loss(rec, mass, pot)
            accept = uniforms[:, j, 1] < acceptance_probability(dh)
        x = np.where(accept[:, None], rec.end.x, x)
        delta_h[:, j] = dh
        n_accept += accept
        grad_evals += rec.n_grad_evals
        consec_rej = np.where(accept, 0, consec_rej + 1)
        if rejection_cap is not None:
            diverged |= consec_rej >= rejection_cap
        step_index = j - cfg.burn_in + 1
        if step_index > 0 and step_index % cfg.thinning == 0:
            samples[:, collected, :] = x
            collected += 1

    diagnostics = ChainDiagnostics(
        proposals=n_prop,
        acceptances=n_accept,
        delta_h=delta_h,
        diverged=diverged,
        gradient_evals=grad_evals,
    )
    return samples, diagnostics


def hmc_chain(x0, pot, cfg: ChainConfig, rng: RandomSource, mass_diag=None,
              rejection_cap: int | None = None):
    """Run one chain from x0 and return (samples, diagnostics).

    Samples have shape (cfg.n_samples, n_var): burn-in states are discarded
    and every thinning-th chain state afterwards is kept.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 1:
        raise ValueError("x0 must be a single state vector")
    samples, diag = run_chains(
        x0[None, :], pot, cfg, [rng.generator],
        mass_diag=mass_diag, rejection_cap=rejection_cap,
    )
    diagnostics = ChainDiagnostics(
        proposals=diag.proposals,
        acceptances=int(diag.acceptances[0]),
        delta_h=diag.delta_h[0],
        diverged=bool(diag.diverged[0]),
        gradient_evals=diag.gradient_evals,
    )
    return samples[0], diagnostics
