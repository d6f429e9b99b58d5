"""Proper scoring rules and the correlation diagnostic.

CRPS and the energy score are computed from forecast ensembles with the
plain K^2 sample estimator; CorrScore compares the correlation matrix of
realized returns with that of the per-date ensemble mean paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ScoringError(Exception):
    pass


@dataclass(frozen=True)
class ForecastEnsemble:
    """K sampled next-step return vectors for one forecast date."""

    date: np.datetime64
    samples: np.ndarray  # (K, N), de-standardized return units

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise ScoringError("samples must be a nonempty (K, N) matrix")
        if not np.all(np.isfinite(self.samples)):
            raise ScoringError("ensemble contains non-finite samples")


@dataclass(frozen=True)
class ScoreReport:
    crps_mean: float
    crps_std: float
    es: float
    corr_score: float


def crps_empirical(samples: np.ndarray, truth: float) -> float:
    """Sample CRPS: mean|x_k - r| - mean|x_i - x_j| / 2 (K^2 estimator)."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size < 1:
        raise ScoringError("need at least one sample")
    term1 = np.mean(np.abs(samples - truth))
    # O(K log K) via the sorted-sample identity for the mean pairwise gap.
    s = np.sort(samples)
    k = s.size
    ranks = np.arange(1, k + 1)
    pair_sum = 2.0 * np.sum((2 * ranks - k - 1) * s)
    return float(term1 - pair_sum / (2.0 * k * k))


def aggregate_crps(per_asset_series: np.ndarray) -> tuple[float, float]:
    """Time-average each asset's CRPS series, then mean/std across assets.

    per_asset_series: (T, N) of per-date, per-asset CRPS values.
    """
    arr = np.asarray(per_asset_series, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ScoringError("need a (T, N) array of CRPS values")
    averages = arr.mean(axis=0)
    std = float(averages.std(ddof=1)) if averages.size > 1 else 0.0
    return float(averages.mean()), std


def energy_score(samples: np.ndarray, truth: np.ndarray) -> float:
    """mean||x_k - r|| - mean||x_i - x_j|| / 2 over the ensemble."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if samples.shape[1] != truth.shape[0]:
        raise ScoringError(
            f"sample dim {samples.shape[1]} != truth dim {truth.shape[0]}"
        )
    term1 = np.mean(np.linalg.norm(samples - truth, axis=1))
    diffs = samples[:, None, :] - samples[None, :, :]
    term2 = np.mean(np.linalg.norm(diffs, axis=-1))
    return float(term1 - 0.5 * term2)


def corr_score(real_returns: np.ndarray, ensembles: list[ForecastEnsemble]) -> float:
    """Frobenius distance between real and synthetic-mean-path correlations."""
    real = np.asarray(real_returns, dtype=np.float64)
    if real.ndim != 2 or len(ensembles) != real.shape[0]:
        raise ScoringError("ensembles must cover exactly the real return rows")
    mean_paths = np.stack([e.samples.mean(axis=0) for e in ensembles])
    c_real = _correlation(real, "real returns")
    c_synth = _correlation(mean_paths, "synthetic mean paths")
    return float(np.linalg.norm(c_real - c_synth, ord="fro"))


def _correlation(rows: np.ndarray, label: str) -> np.ndarray:
    stds = rows.std(axis=0, ddof=1)
    if np.any(stds == 0.0):
        raise ScoringError(f"{label}: constant column, correlation undefined")
    return np.corrcoef(rows, rowvar=False)


def score_ensembles(
    ensembles: list[ForecastEnsemble], truths: np.ndarray
) -> ScoreReport:
    """Full score report over a test period.

    truths: (T, N) realized returns aligned 1:1 with the ensembles.
    """
    truths = np.asarray(truths, dtype=np.float64)
    if len(ensembles) != truths.shape[0]:
        raise ScoringError("ensemble count must match truth rows")
    t_len, n = truths.shape
    crps = np.empty((t_len, n))
    es = np.empty(t_len)
    for t, (ens, truth) in enumerate(zip(ensembles, truths)):
        for i in range(n):
            crps[t, i] = crps_empirical(ens.samples[:, i], truth[i])
        es[t] = energy_score(ens.samples, truth)
    crps_mean, crps_std = aggregate_crps(crps)
    return ScoreReport(
        crps_mean=crps_mean,
        crps_std=crps_std,
        es=float(es.mean()),
        corr_score=corr_score(truths, ensembles),
    )


def rolling_yearly_scores(
    dates: np.ndarray,
    ensembles: list[ForecastEnsemble],
    truths: np.ndarray,
    window_years: int = 3,
) -> list[dict]:
    """Per-year score breakdown, each computed on a trailing rolling window.

    Returns one record per evaluation year with the window's CRPS mean/std,
    ES, and CorrScore.
    """
    years = dates.astype("datetime64[Y]").astype(int) + 1970
    records = []
    for year in np.unique(years):
        mask = (years > year - window_years) & (years <= year)
        idx = np.flatnonzero(mask)
        if idx.size < 2:
            continue
        sub = [ensembles[i] for i in idx]
        try:
            rep = score_ensembles(sub, truths[idx])
        except ScoringError:
            continue
        records.append({
            "year": int(year),
            "crps_mean": rep.crps_mean,
            "crps_std": rep.crps_std,
            "es": rep.es,
            "corr_score": rep.corr_score,
        })
    return records
