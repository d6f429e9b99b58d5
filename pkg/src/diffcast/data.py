"""Loading, alignment, splitting, and normalization of the return panel.

All loaders operate on plain CSV files (see the repository README for the
exact schemas) and produce immutable numpy-backed containers. Returns are
expected in decimal units (0.0123 = 1.23%); a median-absolute-return above
1.0 triggers the percent-format heuristic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
import warnings

import numpy as np


class DataError(Exception):
    """Base class for data-layer failures."""


class ParseError(DataError):
    """Malformed cell or row in an input file."""


class AlignmentError(DataError):
    """Date alignment between inputs left too few rows."""


class CoverageError(DataError):
    """A daily date precedes the first available monthly observation."""


class SplitError(DataError):
    """A split interval selects no panel rows."""


class NormalizerError(DataError):
    """Normalizer fitted or applied on incompatible data."""


STD_FLOOR = 1e-8

FACTOR_COLUMNS = ("MKT", "SMB", "HML")
MACRO_COLUMNS = ("tbl", "dp", "ep", "bm", "tms", "dfy", "ntis", "svar")


@dataclass(frozen=True)
class ReturnPanel:
    """Date-aligned daily returns, risk-free rate, and factor series."""

    dates: np.ndarray            # datetime64[D], strictly increasing
    asset_names: tuple[str, ...]
    raw_returns: np.ndarray      # (T, N) simple daily returns, decimal
    risk_free: np.ndarray        # (T,) daily rate, decimal
    factors: np.ndarray          # (T, 3) MKT, SMB, HML excess returns
    excess_returns: np.ndarray = field(init=False)

    def __post_init__(self):
        t = len(self.dates)
        if np.any(np.diff(self.dates) <= np.timedelta64(0, "D")):
            raise DataError("panel dates must be strictly increasing")
        for name, arr, cols in (
            ("raw_returns", self.raw_returns, len(self.asset_names)),
            ("factors", self.factors, 3),
        ):
            if arr.shape != (t, cols):
                raise DataError(f"{name} shape {arr.shape} != ({t}, {cols})")
        if self.risk_free.shape != (t,):
            raise DataError(f"risk_free shape {self.risk_free.shape} != ({t},)")
        object.__setattr__(
            self, "excess_returns", self.raw_returns - self.risk_free[:, None]
        )

    @property
    def n_assets(self) -> int:
        return len(self.asset_names)

    def __len__(self) -> int:
        return len(self.dates)


@dataclass(frozen=True)
class MacroPanel:
    """Monthly systematic covariates (tbl, d/p, e/p, b/m, tms, dfy, ntis, svar)."""

    monthly_dates: np.ndarray  # datetime64[D], strictly increasing
    values: np.ndarray         # (T_months, N_y)
    columns: tuple[str, ...] = MACRO_COLUMNS

    def __post_init__(self):
        if np.any(np.diff(self.monthly_dates) <= np.timedelta64(0, "D")):
            raise DataError("macro dates must be strictly increasing")
        if self.values.shape != (len(self.monthly_dates), len(self.columns)):
            raise DataError("macro values shape inconsistent with dates/columns")
        if not np.all(np.isfinite(self.values)):
            raise DataError("macro panel contains missing or non-finite cells")


@dataclass(frozen=True)
class SplitSpec:
    """Inclusive train/val/test date intervals, chronologically ordered."""

    train_range: tuple[str, str]
    val_range: tuple[str, str]
    test_range: tuple[str, str]

    def __post_init__(self):
        bounds = []
        for name in ("train_range", "val_range", "test_range"):
            lo, hi = getattr(self, name)
            lo, hi = np.datetime64(lo, "D"), np.datetime64(hi, "D")
            if lo > hi:
                raise SplitError(f"{name}: start {lo} after end {hi}")
            bounds.append((lo, hi))
        for (_, prev_hi), (nxt_lo, _) in zip(bounds, bounds[1:]):
            if nxt_lo <= prev_hi:
                raise SplitError("split intervals must be disjoint and ordered")

    def intervals(self) -> list[tuple[np.datetime64, np.datetime64]]:
        return [
            (np.datetime64(lo, "D"), np.datetime64(hi, "D"))
            for lo, hi in (self.train_range, self.val_range, self.test_range)
        ]


def _parse_date(text: str, path: str, line: int) -> np.datetime64:
    try:
        return np.datetime64(text.strip(), "D")
    except ValueError as exc:
        raise ParseError(f"{path}:{line}: bad date {text!r}") from exc


def _parse_float(text: str, path: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError as exc:
        raise ParseError(f"{path}:{line}: bad number {text!r}") from exc
    if not np.isfinite(value):
        raise DataError(f"{path}:{line}: non-finite cell {text!r}")
    return value


def _read_csv(path: str) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Read a date-keyed CSV into (header, dates, values)."""
    dates, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if not header or header[0] != "date":
            raise ParseError(f"{path}:1: first column must be 'date'")
        ncol = len(header)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != ncol:
                raise ParseError(
                    f"{path}:{line}: expected {ncol} fields, got {len(row)}"
                )
            dates.append(_parse_date(row[0], path, line))
            rows.append([_parse_float(v, path, line) for v in row[1:]])
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return header[1:], np.array(dates, dtype="datetime64[D]"), np.asarray(rows)


def _check_decimal_units(returns: np.ndarray, path: str, mode: str) -> None:
    # Heuristic: percent-formatted files have |returns| two orders larger.
    median_abs = float(np.median(np.abs(returns)))
    if median_abs > 1.0:
        msg = (
            f"{path}: median absolute return {median_abs:.3g} > 1.0; "
            "values look percent-formatted, expected decimals"
        )
        if mode == "error":
            raise DataError(msg)
        warnings.warn(msg)


def load_panel(
    returns_path: str, factors_path: str, percent_check: str = "warn"
) -> ReturnPanel:
    """Load returns and factor CSVs, inner-joined on date.

    The returns file must end with an `RF` column; the factors file must
    carry exactly MKT, SMB, HML.
    """
    ret_header, ret_dates, ret_values = _read_csv(returns_path)
    fac_header, fac_dates, fac_values = _read_csv(factors_path)
    if not ret_header or ret_header[-1] != "RF":
        raise ParseError(f"{returns_path}: last column must be 'RF'")
    if tuple(fac_header) != FACTOR_COLUMNS:
        raise ParseError(
            f"{factors_path}: columns must be {','.join(FACTOR_COLUMNS)}"
        )
    asset_names = tuple(ret_header[:-1])
    if not asset_names:
        raise ParseError(f"{returns_path}: no asset columns")
    for name, dates in ((returns_path, ret_dates), (factors_path, fac_dates)):
        if len(np.unique(dates)) != len(dates):
            raise ParseError(f"{name}: duplicate dates")

    common, ret_idx, fac_idx = np.intersect1d(
        ret_dates, fac_dates, return_indices=True
    )
    if len(common) < 2:
        raise AlignmentError(
            f"inner join of {returns_path} and {factors_path} "
            f"left {len(common)} rows (need >= 2)"
        )
    raw = ret_values[ret_idx, :-1]
    _check_decimal_units(raw, returns_path, percent_check)
    return ReturnPanel(
        dates=common,
        asset_names=asset_names,
        raw_returns=raw,
        risk_free=ret_values[ret_idx, -1],
        factors=fac_values[fac_idx],
    )


def load_macro(path: str) -> MacroPanel:
    header, dates, values = _read_csv(path)
    if tuple(header) != MACRO_COLUMNS:
        raise ParseError(f"{path}: columns must be {','.join(MACRO_COLUMNS)}")
    return MacroPanel(monthly_dates=dates, values=values)


def align_macro_daily(panel: ReturnPanel, macro: MacroPanel) -> np.ndarray:
    """Forward-fill monthly macro values onto the panel's daily dates.

    Row t is the macro row with the latest monthly date <= panel date t;
    values are never filled backward.
    """
    idx = np.searchsorted(macro.monthly_dates, panel.dates, side="right") - 1
    if np.any(idx < 0):
        first_bad = panel.dates[np.argmax(idx < 0)]
        raise CoverageError(
            f"panel date {first_bad} precedes first macro date "
            f"{macro.monthly_dates[0]}"
        )
    return macro.values[idx]


def split_panel(
    panel: ReturnPanel, spec: SplitSpec
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index ranges for the train/val/test intervals; rows outside all
    three intervals are dropped."""
    out = []
    for name, (lo, hi) in zip(("train", "val", "test"), spec.intervals()):
        mask = (panel.dates >= lo) & (panel.dates <= hi)
        if not mask.any():
            raise SplitError(f"{name} interval [{lo}, {hi}] selects no rows")
        out.append(np.flatnonzero(mask))
    return tuple(out)


@dataclass(frozen=True)
class Normalizer:
    """Columnwise (x - mean) / std transform fitted on the training range."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, columns: np.ndarray) -> np.ndarray:
        self._check(columns)
        return (columns - self.mean) / self.std

    def invert(self, columns: np.ndarray) -> np.ndarray:
        self._check(columns)
        return columns * self.std + self.mean

    def _check(self, columns: np.ndarray) -> None:
        if columns.shape[-1] != self.mean.shape[0]:
            raise NormalizerError(
                f"got {columns.shape[-1]} columns, fitted on {self.mean.shape[0]}"
            )


def fit_normalizer(columns: np.ndarray) -> Normalizer:
    """Per-column sample mean and std (n-1 denominator, std floored)."""
    columns = np.asarray(columns, dtype=np.float64)
    if columns.ndim != 2 or columns.shape[0] < 2:
        raise NormalizerError("need a 2-D array with at least 2 rows")
    mean = columns.mean(axis=0)
    std = np.maximum(columns.std(axis=0, ddof=1), STD_FLOOR)
    return Normalizer(mean=mean, std=std)
