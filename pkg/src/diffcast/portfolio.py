"""Long-only portfolio construction from forecast ensembles, plus backtest.

Two daily-rebalanced strategies: the mean-variance tangency portfolio (MVP),
solved as a convex quadratic program via the standard long-only tangency
reformulation, and the growth-optimal portfolio (GOP), which maximizes the
sample-average log utility over the simplex.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .scoring import ForecastEnsemble

RIDGE = 1e-8


class SolverError(Exception):
    pass


class FeasibilityError(SolverError):
    pass


@dataclass(frozen=True)
class MomentEstimate:
    mu: np.ndarray     # (N,)
    sigma: np.ndarray  # (N, N), ridge-regularized


@dataclass(frozen=True)
class PortfolioWeights:
    w: np.ndarray
    fallback: bool = False  # MVP min-variance fallback was used

    def __post_init__(self):
        if np.any(self.w < -1e-9) or abs(self.w.sum() - 1.0) > 1e-9:
            raise SolverError("weights must be nonnegative and sum to 1")


def estimate_moments(ens: ForecastEnsemble) -> MomentEstimate:
    """Ensemble sample mean and (K-1)-denominator covariance with ridge."""
    samples = ens.samples
    if samples.shape[0] < 2:
        raise SolverError("need K >= 2 samples to estimate moments")
    mu = samples.mean(axis=0)
    centered = samples - mu
    sigma = centered.T @ centered / (samples.shape[0] - 1)
    sigma = 0.5 * (sigma + sigma.T) + RIDGE * np.eye(samples.shape[1])
    return MomentEstimate(mu=mu, sigma=sigma)


def _solve(problem: cp.Problem) -> None:
    problem.solve(solver=cp.CLARABEL)
    if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise SolverError(f"solver status {problem.status}")


def _normalize(w: np.ndarray) -> np.ndarray:
    w = np.clip(w, 0.0, None)
    return w / w.sum()


def solve_mvp(m: MomentEstimate) -> PortfolioWeights:
    """Long-only maximum-Sharpe weights from predicted moments.

    With some positive predicted mean, solves min y'Sigma y subject to
    mu'y = 1, y >= 0 and rescales y to the simplex (exact under long-only).
    If no asset has a positive predicted mean the tangency problem is
    ill-posed; falls back to long-only minimum variance, flagged on the
    result.
    """
    n = m.mu.shape[0]
    sigma = cp.psd_wrap(m.sigma)
    if np.max(m.mu) > 0.0:
        y = cp.Variable(n, nonneg=True)
        _solve(cp.Problem(cp.Minimize(cp.quad_form(y, sigma)), [m.mu @ y == 1]))
        return PortfolioWeights(w=_normalize(np.asarray(y.value)))
    w = cp.Variable(n, nonneg=True)
    _solve(cp.Problem(cp.Minimize(cp.quad_form(w, sigma)), [cp.sum(w) == 1]))
    return PortfolioWeights(w=_normalize(np.asarray(w.value)), fallback=True)


def gop_utility(w: np.ndarray, samples: np.ndarray) -> float:
    """Sample-average log utility; -inf outside the feasible region."""
    growth = 1.0 + samples @ w
    if np.any(growth <= 0.0):
        return -np.inf
    return float(np.mean(np.log(growth)))


def solve_gop(ens: ForecastEnsemble) -> PortfolioWeights:
    """Long-only expected-log-utility maximizer over the ensemble samples."""
    samples = ens.samples
    k, n = samples.shape
    if n == 1:
        return PortfolioWeights(w=np.ones(1))
    if not any(np.isfinite(gop_utility(v, samples)) for v in np.eye(n)):
        raise FeasibilityError("every single-asset portfolio can lose >= 100%")
    w = cp.Variable(n, nonneg=True)
    objective = cp.Maximize(cp.sum(cp.log(1.0 + samples @ w)) / k)
    _solve(cp.Problem(objective, [cp.sum(w) == 1]))
    return PortfolioWeights(w=_normalize(np.asarray(w.value)))


@dataclass(frozen=True)
class BacktestReport:
    daily_returns: np.ndarray
    value_path: np.ndarray      # starts at 1 before the first day
    ret: float                  # mean(daily) * 252
    vol: float                  # std(daily) * sqrt(252)
    sr: float                   # ret / vol, nan when vol = 0
    mdd: float                  # reported with a leading minus sign
    ce: float                   # exp(mean log growth)^252 - 1, nan if bankrupt
    sr_defined: bool = True
    ce_defined: bool = True
    bankrupt: bool = False


def backtest(weights_by_date: np.ndarray, realized: np.ndarray) -> BacktestReport:
    """Daily-rebalanced long-only backtest.

    weights_by_date: (T, N) weights decided at each date's close;
    realized: (T, N) the matching next-day excess returns.
    """
    weights = np.asarray(weights_by_date, dtype=np.float64)
    realized = np.asarray(realized, dtype=np.float64)
    if weights.shape != realized.shape:
        raise SolverError(
            f"weights {weights.shape} and returns {realized.shape} misaligned"
        )
    daily = np.sum(weights * realized, axis=1)
    value_path = np.concatenate([[1.0], np.cumprod(1.0 + daily)])
    peaks = np.maximum.accumulate(value_path)
    mdd_magnitude = float(np.max((peaks - value_path) / peaks))
    ret = float(daily.mean() * 252.0)
    vol = float(daily.std(ddof=1) * np.sqrt(252.0)) if daily.size > 1 else 0.0
    sr_defined = vol > 0.0
    bankrupt = bool(np.any(1.0 + daily <= 0.0))
    if bankrupt:
        ce, ce_defined = float("nan"), False
    else:
        u = float(np.mean(np.log1p(daily)))
        ce, ce_defined = float(np.exp(u) ** 252 - 1.0), True
    return BacktestReport(
        daily_returns=daily,
        value_path=value_path,
        ret=ret,
        vol=vol,
        sr=ret / vol if sr_defined else float("nan"),
        mdd=-mdd_magnitude,
        ce=ce,
        sr_defined=sr_defined,
        ce_defined=ce_defined,
        bankrupt=bankrupt,
    )
