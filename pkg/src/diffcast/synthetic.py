"""Bundled synthetic data generator for smoke tests and the end-to-end check.

Four assets with block-correlated Gaussian noise (correlation 0.6 inside two
blocks of two), one mean-shifting per-asset covariate, and one systematic
covariate delivered through the monthly macro file. All files conform to the
loader schemas, so the fixture runs through the exact same pipeline as real
data.
"""

from __future__ import annotations

from dataclasses import dataclass
import os

import numpy as np

from .data import MACRO_COLUMNS

ASSETS = ("A1", "A2", "B1", "B2")
BLOCK_CORR = 0.6
DAILY_VOL = 0.01
AR_COEF = 0.9
ASSET_SIGNAL = 0.5      # loading of the asset covariate on next-day returns
SYS_SIGNAL = 0.3        # loading of the systematic covariate
MACRO_PERIOD = 21       # trading days between macro observations


@dataclass(frozen=True)
class SyntheticFixture:
    returns_path: str
    factors_path: str
    macro_path: str
    asset_covs_path: str
    dates: np.ndarray
    train_range: tuple[str, str]
    val_range: tuple[str, str]
    test_range: tuple[str, str]


def _block_correlation(n: int) -> np.ndarray:
    corr = np.eye(n)
    for start in range(0, n - 1, 2):
        corr[start, start + 1] = corr[start + 1, start] = BLOCK_CORR
    return corr


def _ar1(rng: np.random.Generator, n: int, phi: float) -> np.ndarray:
    innovations = rng.standard_normal(n) * np.sqrt(1.0 - phi**2)
    out = np.empty(n)
    out[0] = rng.standard_normal()
    for t in range(1, n):
        out[t] = phi * out[t - 1] + innovations[t]
    return out


def write_fixture(
    out_dir: str, n_days: int = 3000, seed: int = 0
) -> SyntheticFixture:
    """Generate the fixture CSVs into out_dir and return their paths/splits.

    Splits are 70% train, 10% val, 20% test by date.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.Generator(np.random.Philox(seed))
    n = len(ASSETS)
    dates = np.datetime64("2012-01-02", "D") + np.arange(n_days)

    z = np.column_stack([_ar1(rng, n_days, AR_COEF) for _ in range(n)])
    y_monthly = _ar1(rng, (n_days - 1) // MACRO_PERIOD + 1, AR_COEF)
    y_daily = np.repeat(y_monthly, MACRO_PERIOD)[:n_days]

    chol = np.linalg.cholesky(_block_correlation(n))
    noise = rng.standard_normal((n_days, n)) @ chol.T
    returns = np.empty((n_days, n))
    returns[0] = DAILY_VOL * noise[0]
    returns[1:] = DAILY_VOL * (
        ASSET_SIGNAL * z[:-1]
        + SYS_SIGNAL * y_daily[:-1, None]
        + noise[1:]
    )

    factors = np.column_stack([
        returns.mean(axis=1),
        0.5 * DAILY_VOL * rng.standard_normal(n_days),
        0.5 * DAILY_VOL * rng.standard_normal(n_days),
    ])

    paths = {
        name: os.path.join(out_dir, f"{name}.csv")
        for name in ("returns", "factors", "macro", "asset_covs")
    }
    _write_csv(
        paths["returns"], dates,
        list(ASSETS) + ["RF"],
        np.column_stack([returns, np.zeros(n_days)]),
    )
    _write_csv(paths["factors"], dates, ["MKT", "SMB", "HML"], factors)
    macro_dates = dates[::MACRO_PERIOD]
    macro_values = np.zeros((len(macro_dates), len(MACRO_COLUMNS)))
    macro_values[:, 0] = y_monthly[: len(macro_dates)]
    _write_csv(paths["macro"], macro_dates, list(MACRO_COLUMNS), macro_values)
    _write_csv(
        paths["asset_covs"], dates,
        [f"{a}__signal" for a in ASSETS], z,
    )

    cut1, cut2 = int(n_days * 0.7), int(n_days * 0.8)
    fmt = lambda d: str(d)
    return SyntheticFixture(
        returns_path=paths["returns"],
        factors_path=paths["factors"],
        macro_path=paths["macro"],
        asset_covs_path=paths["asset_covs"],
        dates=dates,
        train_range=(fmt(dates[0]), fmt(dates[cut1 - 1])),
        val_range=(fmt(dates[cut1]), fmt(dates[cut2 - 1])),
        test_range=(fmt(dates[cut2]), fmt(dates[-1])),
    )


def _write_csv(path: str, dates: np.ndarray, columns: list[str], values: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write("date," + ",".join(columns) + "\n")
        for date, row in zip(dates, values):
            fh.write(str(date) + "," + ",".join(f"{v:.10g}" for v in row) + "\n")
