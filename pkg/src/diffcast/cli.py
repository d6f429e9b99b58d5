"""Command-line front end.

Subcommands mirror the pipeline stages: ingest, features, train, sample,
evaluate, backtest, report. Every stage reads a TOML run configuration and
writes its artifacts into the configured output directory.

Exit codes: 0 ok, 1 config/data error, 2 usage error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np
import torch

from . import pipeline, synthetic
from .config import ConfigValidationError, RunConfig, check_paths, validate_config
from .data import DataError, load_macro, load_panel
from .denoiser import ConfigError, init_denoiser
from .diffusion import make_ddim_plan, make_linear_schedule
from .portfolio import BacktestReport, backtest, estimate_moments, solve_gop, solve_mvp
from .scoring import rolling_yearly_scores, score_ensembles
from .training import (
    NumericAbort, checkpoint_normalizers, load_checkpoint, save_checkpoint, train,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _apply_runtime_settings(config: RunConfig, args) -> RunConfig:
    seed = os.environ.get("DIFFCAST_SEED")
    threads = os.environ.get("DIFFCAST_THREADS")
    updates = {}
    if seed is not None:
        updates["seed"] = int(seed)
    if args.seed is not None:
        updates["seed"] = args.seed
    if threads is not None:
        updates["threads"] = int(threads)
    if args.threads is not None:
        updates["threads"] = args.threads
    if args.deterministic:
        updates["deterministic"] = True
    if updates:
        from dataclasses import replace
        config = replace(config, **updates)
    if config.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    elif config.threads > 0:
        torch.set_num_threads(config.threads)
    return config


def _out(config: RunConfig, name: str) -> str:
    os.makedirs(config.output_dir, exist_ok=True)
    return os.path.join(config.output_dir, name)


def _load_prepared(config: RunConfig) -> pipeline.PreparedData:
    path = _out(config, "features.npz")
    if not os.path.exists(path):
        raise DataError(f"{path} not found; run `diffcast features` first")
    return pipeline.load_prepared(path)


def cmd_ingest(config: RunConfig, args) -> int:
    if args.synthetic:
        fixture = synthetic.write_fixture(
            os.path.dirname(config.returns_path) or ".", seed=config.seed
        )
        print(f"wrote synthetic fixture next to {fixture.returns_path}")
    check_paths(config)
    panel = load_panel(
        config.returns_path, config.factors_path, config.percent_check
    )
    macro = load_macro(config.macro_path)
    np.savez_compressed(
        _out(config, "panel.npz"),
        dates=panel.dates,
        asset_names=np.array(panel.asset_names),
        raw_returns=panel.raw_returns,
        risk_free=panel.risk_free,
        factors=panel.factors,
        macro_dates=macro.monthly_dates,
        macro_values=macro.values,
    )
    print(f"panel: {len(panel)} days x {panel.n_assets} assets -> panel.npz")
    return EXIT_OK


def cmd_features(config: RunConfig, args) -> int:
    check_paths(config)
    panel = load_panel(
        config.returns_path, config.factors_path, config.percent_check
    )
    macro = load_macro(config.macro_path)
    asset_covs = None
    if config.asset_covs_path:
        asset_covs = pipeline.load_asset_covariates(config.asset_covs_path, panel)
    prepared = pipeline.prepare_features(
        panel, macro, config.split_spec(),
        asset_covs=asset_covs,
        standardize_targets=config.standardize_targets,
        zero_fill=config.zero_fill_characteristics,
    )
    pipeline.save_prepared(_out(config, "features.npz"), prepared)
    print(
        f"features: z_dim={prepared.z_dim}, n_sys={prepared.n_sys}, "
        f"splits={len(prepared.train_idx)}/{len(prepared.val_idx)}/"
        f"{len(prepared.test_idx)} -> features.npz"
    )
    return EXIT_OK


def cmd_train(config: RunConfig, args) -> int:
    prepared = _load_prepared(config)
    train_ds = prepared.dataset("train", config.M)
    try:
        val_ds = prepared.dataset("val", config.M)
    except Exception:
        val_ds = None
    sched = make_linear_schedule(config.T, config.beta_start, config.beta_end)
    dconfig = config.denoiser_config(
        n_assets=prepared.panel.n_assets, n_sys=prepared.n_sys, z_dim=prepared.z_dim
    )
    model = init_denoiser(dconfig, seed=config.seed)
    steps = args.steps if args.steps is not None else config.steps
    cfg = config.train_config(
        steps=steps,
        warmup=min(config.warmup, max(steps - 1, 0)),
    )
    guidance = pipeline.guidance_target_from(prepared, config.guidance_intensity)
    checkpoint, _ = train(
        train_ds, cfg, sched, model,
        guidance_target=guidance,
        val_dataset=val_ds,
        log_path=_out(config, "training_log.csv"),
    )
    save_checkpoint(_out(config, "checkpoint.pt"), checkpoint)
    print(f"trained {steps} steps -> checkpoint.pt, training_log.csv")
    return EXIT_OK


def cmd_sample(config: RunConfig, args) -> int:
    prepared = _load_prepared(config)
    model, checkpoint = load_checkpoint(_out(config, "checkpoint.pt"))
    sched = make_linear_schedule(
        checkpoint["train_config"]["T"], config.beta_start, config.beta_end
    )
    plan = make_ddim_plan(sched, config.ddim_steps, config.eta)
    test_ds = prepared.dataset("test", config.M)
    ensembles, _ = pipeline.forecast_ensembles(
        model, test_ds, plan, sched, config.K, config.seed, prepared.panel.dates
    )
    pipeline.write_ensembles_csv(_out(config, "ensembles.csv"), ensembles)
    pipeline.write_ensembles_npz(_out(config, "ensembles.npz"), ensembles)
    print(f"sampled {len(ensembles)} dates x K={config.K} -> ensembles.csv/.npz")
    return EXIT_OK


def _ensembles_and_truths(config: RunConfig, prepared: pipeline.PreparedData):
    path = _out(config, "ensembles.npz")
    if not os.path.exists(path):
        raise DataError(f"{path} not found; run `diffcast sample` first")
    ensembles = pipeline.read_ensembles_npz(path)
    date_index = {d: i for i, d in enumerate(prepared.panel.dates)}
    rows = [date_index[e.date] for e in ensembles]
    truths = prepared.panel.excess_returns[rows]
    dates = prepared.panel.dates[rows]
    return ensembles, truths, dates, rows


def cmd_evaluate(config: RunConfig, args) -> int:
    prepared = _load_prepared(config)
    ensembles, truths, dates, _ = _ensembles_and_truths(config, prepared)
    report = score_ensembles(ensembles, truths)
    with open(_out(config, "scores.csv"), "w") as fh:
        fh.write("crps_mean,crps_std,es,corr_score\n")
        fh.write(
            f"{report.crps_mean:.10g},{report.crps_std:.10g},"
            f"{report.es:.10g},{report.corr_score:.10g}\n"
        )
    rolling = rolling_yearly_scores(dates, ensembles, truths)
    with open(_out(config, "scores_rolling.csv"), "w") as fh:
        fh.write("year,crps_mean,crps_std,es,corr_score\n")
        for rec in rolling:
            fh.write(
                f"{rec['year']},{rec['crps_mean']:.10g},{rec['crps_std']:.10g},"
                f"{rec['es']:.10g},{rec['corr_score']:.10g}\n"
            )
    print(
        f"CRPS {report.crps_mean:.6g} (+/- {report.crps_std:.6g})  "
        f"ES {report.es:.6g}  CorrScore {report.corr_score:.6g} -> scores.csv"
    )
    return EXIT_OK


def _write_weights_csv(path: str, dates, weights, asset_names, flags=None) -> None:
    with open(path, "w") as fh:
        header = "date," + ",".join(asset_names)
        if flags is not None:
            header += ",fallback"
        fh.write(header + "\n")
        for i, (date, w) in enumerate(zip(dates, weights)):
            row = f"{date}," + ",".join(f"{v:.10g}" for v in w)
            if flags is not None:
                row += f",{int(flags[i])}"
            fh.write(row + "\n")


def _report_row(name: str, rep: BacktestReport, with_ce: bool) -> str:
    ce = f",{rep.ce:.10g}" if with_ce else ""
    return (
        f"{name},{rep.sr:.10g},{rep.ret:.10g},{rep.vol:.10g},"
        f"{rep.mdd:.10g}{ce}\n"
    )


def cmd_backtest(config: RunConfig, args) -> int:
    prepared = _load_prepared(config)
    ensembles, truths, dates, rows = _ensembles_and_truths(config, prepared)
    names = prepared.panel.asset_names
    mvp_w, mvp_flags, gop_w = [], [], []
    for ens in ensembles:
        mvp = solve_mvp(estimate_moments(ens))
        mvp_w.append(mvp.w)
        mvp_flags.append(mvp.fallback)
        gop_w.append(solve_gop(ens).w)
    mvp_w, gop_w = np.array(mvp_w), np.array(gop_w)
    _write_weights_csv(_out(config, "mvp_weights.csv"), dates, mvp_w, names, mvp_flags)
    _write_weights_csv(_out(config, "gop_weights.csv"), dates, gop_w, names)
    mvp_rep = backtest(mvp_w, truths)
    gop_rep = backtest(gop_w, truths)
    market = prepared.panel.factors[rows, 0]  # market excess return benchmark
    market_rep = backtest(np.ones((len(rows), 1)), market[:, None])
    with open(_out(config, "backtest_report.csv"), "w") as fh:
        fh.write("strategy,sr,ret,vol,mdd,ce\n")
        fh.write(_report_row("MVP", mvp_rep, True))
        fh.write(_report_row("GOP", gop_rep, True))
        fh.write(_report_row("Market", market_rep, True))
    np.savez_compressed(
        _out(config, "backtest_paths.npz"),
        dates=dates,
        mvp_value=mvp_rep.value_path,
        gop_value=gop_rep.value_path,
        market_value=market_rep.value_path,
    )
    print(
        f"MVP SR {mvp_rep.sr:.4g}  GOP CE {gop_rep.ce:.4g} -> "
        "backtest_report.csv, *_weights.csv"
    )
    return EXIT_OK


def cmd_report(config: RunConfig, args) -> int:
    from . import report
    made = report.emit_report(config.output_dir)
    print("report artifacts: " + ", ".join(made))
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "features": cmd_features,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "backtest": cmd_backtest,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffcast",
        description="Conditional diffusion forecasting of multivariate returns",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--deterministic", action="store_true")
        if name == "ingest":
            p.add_argument(
                "--synthetic", action="store_true",
                help="generate the bundled synthetic fixture first",
            )
        if name == "train":
            p.add_argument("--steps", type=int, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        config = validate_config(args.config)
        config = _apply_runtime_settings(config, args)
        return COMMANDS[args.command](config, args)
    except (ConfigValidationError, ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
