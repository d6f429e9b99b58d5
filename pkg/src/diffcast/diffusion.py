"""Noise schedule, forward corruption, and the DDIM reverse sampler.

Diffusion steps are indexed tau in {1..T}; tau = 0 is the clean-data
convention with alpha_bar(0) := 1, so the final DDIM step returns the
x0 estimate exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ScheduleError(Exception):
    pass


class StepError(Exception):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise variances beta and cumulative products alpha_bar."""

    beta: np.ndarray       # (T,), beta[tau-1] is the step-tau variance
    alpha: np.ndarray      # (T,), 1 - beta
    alpha_bar: np.ndarray  # (T,), cumulative product of alpha

    @property
    def T(self) -> int:
        return len(self.beta)

    def abar(self, tau: int) -> float:
        """alpha_bar at step tau, with the alpha_bar(0) = 1 convention."""
        if tau == 0:
            return 1.0
        if not 1 <= tau <= self.T:
            raise StepError(f"step {tau} outside [0, {self.T}]")
        return float(self.alpha_bar[tau - 1])


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly spaced betas, inclusive of both endpoints."""
    if T < 1:
        raise ScheduleError(f"T={T} must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


@dataclass(frozen=True)
class DdimPlan:
    """Strictly decreasing visit order of diffusion steps, ending at 0."""

    steps: tuple[int, ...]
    eta: float

    def __post_init__(self):
        if not self.steps or self.steps[-1] != 0:
            raise ScheduleError("plan must end at step 0")
        if any(b >= a for a, b in zip(self.steps, self.steps[1:])):
            raise ScheduleError("plan steps must be strictly decreasing")
        if not 0.0 <= self.eta <= 1.0:
            raise ScheduleError(f"eta={self.eta} outside [0, 1]")


def make_ddim_plan(sched: NoiseSchedule, num_steps: int, eta: float = 0.0) -> DdimPlan:
    """Evenly spaced subset of {T..1} plus the terminal 0, starting at T."""
    if not 1 <= num_steps <= sched.T:
        raise ScheduleError(f"num_steps={num_steps} outside [1, {sched.T}]")
    steps = np.unique(np.round(np.linspace(0, sched.T, num_steps + 1)).astype(int))
    return DdimPlan(steps=tuple(int(s) for s in steps[::-1]), eta=eta)


def forward_diffuse(
    x0: np.ndarray, tau: int, eps: np.ndarray, sched: NoiseSchedule
) -> np.ndarray:
    """Corrupt x0 to step tau: sqrt(abar)*x0 + sqrt(1-abar)*eps."""
    if not 1 <= tau <= sched.T:
        raise StepError(f"step {tau} outside [1, {sched.T}]")
    if np.shape(eps) != np.shape(x0):
        raise StepError("eps shape must match x0")
    abar = sched.abar(tau)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def ddim_sigma(sched: NoiseSchedule, tau: int, tau_prev: int, eta: float) -> float:
    """Stochasticity scale of the tau -> tau_prev DDIM transition."""
    if tau_prev >= tau:
        raise StepError(f"tau_prev={tau_prev} must precede tau={tau}")
    if not 0.0 <= eta <= 1.0:
        raise StepError(f"eta={eta} outside [0, 1]")
    ab_t, ab_p = sched.abar(tau), sched.abar(tau_prev)
    return eta * np.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_p)


def ddim_step(
    x_tau: np.ndarray,
    eps_hat: np.ndarray,
    tau: int,
    tau_prev: int,
    plan: DdimPlan,
    sched: NoiseSchedule,
    eps_prime: np.ndarray | None = None,
) -> np.ndarray:
    """One DDIM update: estimate x0 from eps_hat, then step to tau_prev."""
    ab_t, ab_p = sched.abar(tau), sched.abar(tau_prev)
    sigma = ddim_sigma(sched, tau, tau_prev, plan.eta)
    x0_hat = (x_tau - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    resid_var = 1.0 - ab_p - sigma**2
    # Nonnegative for any eta in [0, 1]; only roundoff can undershoot.
    if resid_var < -1e-12:
        raise StepError(f"negative residual variance {resid_var} at step {tau}")
    out = np.sqrt(ab_p) * x0_hat + np.sqrt(max(resid_var, 0.0)) * eps_hat
    if sigma > 0.0:
        if eps_prime is None:
            raise StepError("eps_prime required when sigma > 0")
        out = out + sigma * eps_prime
    return out


def chain_seed_sequence(base_seed: int, chain: int) -> np.random.SeedSequence:
    """Substream seed for ensemble chain k, independent of K and of order."""
    return np.random.SeedSequence(entropy=base_seed, spawn_key=(chain,))


def sample_chain(
    eps_fn,
    n_assets: int,
    plan: DdimPlan,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """Run one reverse chain from x_T ~ N(0, I) down to step 0.

    eps_fn(x_tau, tau) -> eps_hat evaluates the denoiser.
    """
    x = rng.standard_normal(n_assets)
    for tau, tau_prev in zip(plan.steps, plan.steps[1:]):
        eps_hat = eps_fn(x, tau)
        sigma = ddim_sigma(sched, tau, tau_prev, plan.eta)
        eps_prime = rng.standard_normal(n_assets) if sigma > 0 else None
        x = ddim_step(x, eps_hat, tau, tau_prev, plan, sched, eps_prime)
    return x


def generate_ensemble(
    eps_fn,
    n_assets: int,
    plan: DdimPlan,
    sched: NoiseSchedule,
    K: int,
    seed: int,
    chunk: int = 1,
) -> np.ndarray:
    """K independent reverse chains; (K, N) array, deterministic given seed.

    eps_fn(x, tau) must accept a batched x of shape (B, N) and return the
    matching eps_hat batch. Chain k's noise comes from its own substream,
    and with the default chunk=1 each chain's denoiser evaluations are
    batch-independent, so sample k is identical for any K and any
    execution order. A larger chunk batches that many chains per denoiser
    call: faster, still deterministic for a fixed (K, seed), but floating
    point results may differ at machine precision across different K.
    chunk=0 means all K chains in one call.
    """
    if K < 1:
        raise StepError(f"K={K} must be >= 1")
    if chunk < 0:
        raise StepError(f"chunk={chunk} must be >= 0")
    chunk = K if chunk == 0 else min(chunk, K)
    rngs = [np.random.Generator(np.random.Philox(chain_seed_sequence(seed, k)))
            for k in range(K)]
    x = np.stack([rng.standard_normal(n_assets) for rng in rngs])
    for tau, tau_prev in zip(plan.steps, plan.steps[1:]):
        eps_hat = np.concatenate(
            [np.asarray(eps_fn(x[lo:lo + chunk], tau)) for lo in range(0, K, chunk)]
        )
        sigma = ddim_sigma(sched, tau, tau_prev, plan.eta)
        eps_prime = None
        if sigma > 0:
            eps_prime = np.stack([rng.standard_normal(n_assets) for rng in rngs])
        x = ddim_step(x, eps_hat, tau, tau_prev, plan, sched, eps_prime)
    return x
