"""Return-based asset characteristics.

Ten columns per asset, all constructed from daily excess returns and the
factor series: four momentum horizons, momentum change, 21-day volatility
and max return, 252-day CAPM beta (and its square), and 252-day 3-factor
idiosyncratic volatility. Dates inside the warm-up period are NaN, never
zero-filled (a zero-fill ablation flag exists for experiments).
"""

from __future__ import annotations

from dataclasses import dataclass
import hashlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import ReturnPanel

COLUMNS = (
    "mom1m", "mom6m", "mom12m", "mom36m", "chmom",
    "retvol", "maxret", "beta", "betasq", "idiovol",
)

MONTH = 21                       # trading days per month
MOM_WINDOWS = {"mom1m": 21, "mom6m": 126, "mom12m": 252, "mom36m": 756}
CHMOM_SHIFT = 126
VOL_WINDOW = 21
BETA_WINDOW = 252


class CharacteristicsError(Exception):
    pass


@dataclass(frozen=True)
class CharacteristicTensor:
    values: np.ndarray   # (T, N, 10), NaN before valid_from
    valid_from: int      # first date index with all 10 columns defined
    columns: tuple[str, ...] = COLUMNS


def compute_momentum(excess: np.ndarray, k: int) -> np.ndarray:
    """Cumulative return over the trailing k days: prod(1+r) - 1.

    Entries before the first full window are NaN.
    """
    if k < 1:
        raise CharacteristicsError(f"momentum window k={k} must be >= 1")
    excess = np.asarray(excess, dtype=np.float64)
    out = np.full(excess.shape[0], np.nan)
    if excess.shape[0] >= k:
        windows = sliding_window_view(1.0 + excess, k)
        out[k - 1:] = np.prod(windows, axis=-1) - 1.0
    return out


def rolling_ols(
    y: np.ndarray, X: np.ndarray, window: int
) -> tuple[np.ndarray, np.ndarray]:
    """Rolling OLS of y on X with intercept.

    Returns (coefs, resid_std) where coefs[t] = [intercept, slopes...] fitted
    on [t-window+1, t]. Residual std uses denominator (window - p - 1) with
    p regressors. Dates without a full window or with a rank-deficient
    design are NaN.
    """
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    t_len, p = X.shape
    if window <= p + 1:
        raise CharacteristicsError(
            f"window {window} must exceed regressor count {p} + 1"
        )
    coefs = np.full((t_len, p + 1), np.nan)
    resid_std = np.full(t_len, np.nan)
    design = np.column_stack([np.ones(t_len), X])
    for t in range(window - 1, t_len):
        z = design[t - window + 1 : t + 1]
        yw = y[t - window + 1 : t + 1]
        beta, _, rank, _ = np.linalg.lstsq(z, yw, rcond=None)
        if rank < p + 1:
            continue
        resid = yw - z @ beta
        coefs[t] = beta
        resid_std[t] = np.sqrt(resid @ resid / (window - p - 1))
    return coefs, resid_std


def _rolling_std(series: np.ndarray, window: int) -> np.ndarray:
    out = np.full(series.shape[0], np.nan)
    if series.shape[0] >= window:
        views = sliding_window_view(series, window)
        out[window - 1:] = views.std(axis=-1, ddof=1)
    return out


def _rolling_max(series: np.ndarray, window: int) -> np.ndarray:
    out = np.full(series.shape[0], np.nan)
    if series.shape[0] >= window:
        out[window - 1:] = sliding_window_view(series, window).max(axis=-1)
    return out


def compute_characteristics(
    panel: ReturnPanel, zero_fill: bool = False
) -> CharacteristicTensor:
    """Assemble all 10 characteristic columns for every asset.

    With zero_fill=True, warm-up NaNs are replaced by 0 and valid_from is 0
    (ablation behavior only; the default excludes warm-up dates instead).
    """
    t_len, n = panel.excess_returns.shape
    mkt = panel.factors[:, 0]
    values = np.full((t_len, n, len(COLUMNS)), np.nan)

    for i in range(n):
        r = panel.excess_returns[:, i]
        col = {name: compute_momentum(r, k) for name, k in MOM_WINDOWS.items()}
        chmom = np.full(t_len, np.nan)
        if t_len > CHMOM_SHIFT:
            chmom[CHMOM_SHIFT:] = col["mom6m"][CHMOM_SHIFT:] - col["mom6m"][:-CHMOM_SHIFT]
        capm, _ = rolling_ols(r, mkt, BETA_WINDOW)
        beta = capm[:, 1]
        _, idiovol = rolling_ols(r, panel.factors, BETA_WINDOW)
        values[:, i, :] = np.column_stack([
            col["mom1m"], col["mom6m"], col["mom12m"], col["mom36m"], chmom,
            _rolling_std(r, VOL_WINDOW), _rolling_max(r, VOL_WINDOW),
            beta, beta ** 2, idiovol,
        ])

    defined = np.all(np.isfinite(values), axis=(1, 2))
    if not defined.any():
        first_needed = max(MOM_WINDOWS["mom36m"], CHMOM_SHIFT + MOM_WINDOWS["mom6m"])
        raise CharacteristicsError(
            f"panel of {t_len} days has no fully-defined date; "
            f"first computable date index is {first_needed - 1}"
        )
    valid_from = int(np.argmax(defined))
    if zero_fill:
        values = np.nan_to_num(values, nan=0.0)
        valid_from = 0
    return CharacteristicTensor(values=values, valid_from=valid_from)


def cache_key(panel: ReturnPanel, config_repr: str = "") -> str:
    """Content hash of (panel, config) for the characteristics cache."""
    h = hashlib.sha256()
    h.update(panel.dates.tobytes())
    h.update(panel.excess_returns.tobytes())
    h.update(panel.factors.tobytes())
    h.update(config_repr.encode())
    return h.hexdigest()


def save_characteristics(path: str, tensor: CharacteristicTensor, key: str) -> None:
    np.savez_compressed(
        path,
        values=tensor.values,
        valid_from=tensor.valid_from,
        columns=np.array(tensor.columns),
        key=np.array(key),
    )


def load_characteristics(path: str, key: str) -> CharacteristicTensor:
    with np.load(path, allow_pickle=False) as npz:
        if str(npz["key"]) != key:
            raise CharacteristicsError(f"{path}: cache key mismatch")
        return CharacteristicTensor(
            values=npz["values"],
            valid_from=int(npz["valid_from"]),
            columns=tuple(str(c) for c in npz["columns"]),
        )
