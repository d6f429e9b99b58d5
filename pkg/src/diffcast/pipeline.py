"""End-to-end glue: feature preparation, forecasting, and ensemble files.

Connects the data layer to the model: builds normalized covariate tensors
and split datasets, runs the DDIM sampler over forecast dates, provides the
unconditional-Gaussian climatology baseline, and reads/writes the ensemble
artifact files (CSV and compact npz, both versioned).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

from . import characteristics as chars
from .data import (
    DataError, MacroPanel, Normalizer, ParseError, ReturnPanel, SplitSpec,
    align_macro_daily, fit_normalizer, split_panel,
)
from .denoiser import Denoiser
from .diffusion import DdimPlan, NoiseSchedule, chain_seed_sequence, generate_ensemble
from .guidance import ShrinkageTarget
from .scoring import ForecastEnsemble
from .training import TrainingDataset, build_dataset

ENSEMBLE_FORMAT_VERSION = 1
ENSEMBLE_CSV_HEADER = "# diffcast ensemble v1"


@dataclass(frozen=True)
class PreparedData:
    """Everything the trainer and sampler need, normalized and split."""

    panel: ReturnPanel
    std_returns: np.ndarray      # (T, N)
    asset_covs: np.ndarray       # (T, N, z) normalized, NaN in warm-up
    sys_covs: np.ndarray         # (T, N_y) normalized
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    target_normalizer: Normalizer
    train_cov: np.ndarray        # full training-range covariance of excess returns
    z_dim: int
    n_sys: int

    def dataset(self, which: str, M: int) -> TrainingDataset:
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[which]
        return build_dataset(
            self.std_returns, self.panel.excess_returns,
            self.asset_covs, self.sys_covs, idx, M, self.target_normalizer,
        )


def load_asset_covariates(path: str, panel: ReturnPanel) -> np.ndarray:
    """Per-asset covariate CSV with `<asset>__<name>` columns -> (T, N, z).

    Rows are matched to the panel dates exactly; every panel date must be
    present.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = {row[0]: row[1:] for row in reader if row}
    if header[0] != "date":
        raise ParseError(f"{path}: first column must be 'date'")
    names = header[1:]
    cov_names: list[str] = []
    for col in names:
        asset, _, cov = col.partition("__")
        if not cov:
            raise ParseError(f"{path}: column {col!r} is not '<asset>__<cov>'")
        if asset == panel.asset_names[0] and cov not in cov_names:
            cov_names.append(cov)
    z = len(cov_names)
    expected = [f"{a}__{c}" for a in panel.asset_names for c in cov_names]
    if names != expected:
        raise ParseError(
            f"{path}: columns must be asset-major {expected[:4]}... order"
        )
    out = np.empty((len(panel), panel.n_assets, z))
    for t, date in enumerate(panel.dates):
        key = str(date)
        if key not in rows:
            raise DataError(f"{path}: missing covariate row for {key}")
        vals = np.array([float(v) for v in rows[key]])
        out[t] = vals.reshape(panel.n_assets, z)
    if not np.all(np.isfinite(out)):
        raise DataError(f"{path}: non-finite covariate cell")
    return out


def prepare_features(
    panel: ReturnPanel,
    macro: MacroPanel,
    split: SplitSpec,
    asset_covs: np.ndarray | None = None,
    standardize_targets: bool = True,
    zero_fill: bool = False,
) -> PreparedData:
    """Normalize everything on the training range and assemble splits.

    asset_covs = None computes the 10 return-based characteristics;
    otherwise the provided (T, N, z) tensor is used.
    """
    if asset_covs is None:
        tensor = chars.compute_characteristics(panel, zero_fill=zero_fill)
        asset_covs = tensor.values
    sys_daily = align_macro_daily(panel, macro)
    train_idx, val_idx, test_idx = split_panel(panel, split)

    t_len, n = panel.excess_returns.shape
    z = asset_covs.shape[2]
    train_cov_rows = panel.excess_returns[train_idx]

    # Covariate normalizers are fitted on training rows where defined.
    flat_covs = asset_covs.reshape(t_len, n * z)
    train_defined = train_idx[np.all(np.isfinite(flat_covs[train_idx]), axis=1)]
    if len(train_defined) < 2:
        raise DataError("fewer than 2 training rows with defined covariates")
    cov_norm = fit_normalizer(
        asset_covs[train_defined].reshape(-1, z)  # pooled across assets
    )
    norm_covs = cov_norm.apply(asset_covs.reshape(-1, z)).reshape(t_len, n, z)

    sys_norm = fit_normalizer(sys_daily[train_idx])
    norm_sys = sys_norm.apply(sys_daily)

    if standardize_targets:
        target_norm = fit_normalizer(train_cov_rows)
    else:
        target_norm = Normalizer(mean=np.zeros(n), std=np.ones(n))
    std_returns = target_norm.apply(panel.excess_returns)

    centered = train_cov_rows - train_cov_rows.mean(axis=0)
    train_cov = centered.T @ centered / (len(train_idx) - 1)

    return PreparedData(
        panel=panel,
        std_returns=std_returns,
        asset_covs=norm_covs,
        sys_covs=norm_sys,
        train_idx=train_idx,
        val_idx=val_idx,
        test_idx=test_idx,
        target_normalizer=target_norm,
        train_cov=0.5 * (train_cov + train_cov.T),
        z_dim=z,
        n_sys=sys_daily.shape[1],
    )


def save_prepared(path: str, prepared: PreparedData) -> None:
    panel = prepared.panel
    np.savez_compressed(
        path,
        dates=panel.dates,
        asset_names=np.array(panel.asset_names),
        raw_returns=panel.raw_returns,
        risk_free=panel.risk_free,
        factors=panel.factors,
        std_returns=prepared.std_returns,
        asset_covs=prepared.asset_covs,
        sys_covs=prepared.sys_covs,
        train_idx=prepared.train_idx,
        val_idx=prepared.val_idx,
        test_idx=prepared.test_idx,
        target_mean=prepared.target_normalizer.mean,
        target_std=prepared.target_normalizer.std,
        train_cov=prepared.train_cov,
    )


def load_prepared(path: str) -> PreparedData:
    with np.load(path, allow_pickle=False) as npz:
        panel = ReturnPanel(
            dates=npz["dates"],
            asset_names=tuple(str(a) for a in npz["asset_names"]),
            raw_returns=npz["raw_returns"],
            risk_free=npz["risk_free"],
            factors=npz["factors"],
        )
        return PreparedData(
            panel=panel,
            std_returns=npz["std_returns"],
            asset_covs=npz["asset_covs"],
            sys_covs=npz["sys_covs"],
            train_idx=npz["train_idx"],
            val_idx=npz["val_idx"],
            test_idx=npz["test_idx"],
            target_normalizer=Normalizer(
                mean=npz["target_mean"], std=npz["target_std"]
            ),
            train_cov=npz["train_cov"],
            z_dim=npz["asset_covs"].shape[2],
            n_sys=npz["sys_covs"].shape[1],
        )


def guidance_target_from(
    prepared: PreparedData, intensity: float | None = None
) -> ShrinkageTarget:
    return ShrinkageTarget(train_cov=prepared.train_cov, intensity=intensity)


def forecast_ensembles(
    model: Denoiser,
    dataset: TrainingDataset,
    plan: DdimPlan,
    sched: NoiseSchedule,
    K: int,
    seed: int,
    panel_dates: np.ndarray,
    chunk: int = 0,
) -> tuple[list[ForecastEnsemble], np.ndarray]:
    """One K-sample ensemble per anchor date, forecasting the next day.

    Returns (ensembles, truths) where truths holds the realized next-day
    excess returns. The per-date seed mixes the base seed with the anchor
    index so runs are reproducible and dates are independent. chunk=0
    batches all K chains through the denoiser per step (fastest and still
    deterministic for a fixed K); chunk=1 additionally makes each sample
    bitwise independent of K.
    """
    norm = dataset.target_normalizer
    ensembles, truths = [], []
    with torch.no_grad():
        for ai in range(len(dataset)):
            x0, hist, covs, sys = dataset.batch_at(np.array([ai]))
            n_assets = x0.shape[1]

            def eps_fn(x, tau):
                k = x.shape[0]
                eps_hat, _ = model(
                    x, np.full(k, tau),
                    np.repeat(hist, k, axis=0),
                    np.repeat(covs, k, axis=0),
                    np.repeat(sys, k, axis=0),
                )
                return eps_hat.numpy()

            anchor = int(dataset.anchors[ai])
            samples = generate_ensemble(
                eps_fn, n_assets, plan, sched, K,
                seed=_date_seed(seed, anchor), chunk=chunk,
            )
            ensembles.append(ForecastEnsemble(
                date=panel_dates[anchor + 1],
                samples=norm.invert(samples),
            ))
            truths.append(norm.invert(x0[0]))
    return ensembles, np.asarray(truths)


def _date_seed(base_seed: int, anchor: int) -> int:
    # Stable per-date substream; keeps dates independent of each other.
    return int(np.random.SeedSequence(
        entropy=base_seed, spawn_key=(anchor,)
    ).generate_state(1)[0])


def climatology_ensembles(
    train_returns: np.ndarray,
    dates: np.ndarray,
    K: int,
    seed: int,
) -> list[ForecastEnsemble]:
    """Unconditional Gaussian baseline fitted on training excess returns."""
    mean = train_returns.mean(axis=0)
    centered = train_returns - mean
    cov = centered.T @ centered / (len(train_returns) - 1)
    chol = np.linalg.cholesky(cov + 1e-12 * np.eye(cov.shape[0]))
    out = []
    for t, date in enumerate(dates):
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(entropy=seed, spawn_key=(t,))
        ))
        samples = mean + rng.standard_normal((K, len(mean))) @ chol.T
        out.append(ForecastEnsemble(date=date, samples=samples))
    return out


def write_ensembles_csv(path: str, ensembles: list[ForecastEnsemble]) -> None:
    """Versioned text format: per record a `date,K,N` line then K sample rows."""
    with open(path, "w") as fh:
        fh.write(ENSEMBLE_CSV_HEADER + "\n")
        for ens in ensembles:
            k, n = ens.samples.shape
            fh.write(f"{ens.date},{k},{n}\n")
            for row in ens.samples:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_ensembles_csv(path: str) -> list[ForecastEnsemble]:
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh]
    if not lines or lines[0] != ENSEMBLE_CSV_HEADER:
        raise ParseError(f"{path}: missing ensemble version header")
    out, i = [], 1
    while i < len(lines):
        if not lines[i]:
            i += 1
            continue
        date, k, n = lines[i].split(",")
        k, n = int(k), int(n)
        samples = np.array([
            [float(v) for v in lines[i + 1 + j].split(",")] for j in range(k)
        ])
        if samples.shape != (k, n):
            raise ParseError(f"{path}: record at line {i + 1} malformed")
        out.append(ForecastEnsemble(date=np.datetime64(date, "D"), samples=samples))
        i += 1 + k
    return out


def write_ensembles_npz(path: str, ensembles: list[ForecastEnsemble]) -> None:
    """Compact binary form; requires a uniform K across dates."""
    np.savez_compressed(
        path,
        version=ENSEMBLE_FORMAT_VERSION,
        dates=np.array([e.date for e in ensembles], dtype="datetime64[D]"),
        samples=np.stack([e.samples for e in ensembles]),
    )


def read_ensembles_npz(path: str) -> list[ForecastEnsemble]:
    with np.load(path) as npz:
        if int(npz["version"]) != ENSEMBLE_FORMAT_VERSION:
            raise ParseError(f"{path}: unsupported ensemble version")
        return [
            ForecastEnsemble(date=date, samples=samples)
            for date, samples in zip(npz["dates"], npz["samples"])
        ]
