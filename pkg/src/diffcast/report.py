"""Static report figures from previously written evaluation artifacts.

Reads scores_rolling.csv and backtest_paths.npz from the output directory
and emits cumulative-return and rolling-metric plots; never rewrites model
or data artifacts.
"""

from __future__ import annotations

import csv
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def emit_report(output_dir: str) -> list[str]:
    made = []
    paths_file = os.path.join(output_dir, "backtest_paths.npz")
    if os.path.exists(paths_file):
        made.append(_plot_cumulative(output_dir, paths_file))
    rolling_file = os.path.join(output_dir, "scores_rolling.csv")
    if os.path.exists(rolling_file):
        made.append(_plot_rolling(output_dir, rolling_file))
    if not made:
        raise FileNotFoundError(
            f"no evaluation artifacts in {output_dir}; "
            "run `evaluate` and `backtest` first"
        )
    return made


def _plot_cumulative(output_dir: str, paths_file: str) -> str:
    with np.load(paths_file) as npz:
        dates = npz["dates"]
        series = {
            "MVP": npz["mvp_value"],
            "GOP": npz["gop_value"],
            "Market": npz["market_value"],
        }
    fig, ax = plt.subplots(figsize=(9, 5))
    x = np.concatenate([[dates[0] - np.timedelta64(1, "D")], dates])
    for label, values in series.items():
        ax.plot(x, values, label=label)
    ax.set_yscale("log")
    ax.set_ylabel("portfolio value (log scale)")
    ax.set_title("Cumulative excess returns, daily-rebalanced long-only")
    ax.legend()
    out = os.path.join(output_dir, "cumulative_returns.png")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def _plot_rolling(output_dir: str, rolling_file: str) -> str:
    with open(rolling_file) as fh:
        rows = list(csv.DictReader(fh))
    years = [int(r["year"]) for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    for ax, key, label in zip(
        axes, ("crps_mean", "es", "corr_score"),
        ("CRPS", "Energy score", "CorrScore"),
    ):
        ax.plot(years, [float(r[key]) for r in rows], marker="o")
        ax.set_title(f"{label} (3y rolling)")
        ax.set_xlabel("year")
    out = os.path.join(output_dir, "rolling_metrics.png")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out
