"""Run configuration: TOML file with one section per pipeline stage.

An empty file yields the full default configuration (63-day window, hidden
dimension 128 with 4 heads, T=1000 with the 1e-4..0.02 linear schedule,
lambda_corr=0.05, 50-step deterministic DDIM, 100-sample ensembles).
Unknown keys are errors; invariant violations name the offending field.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import SplitSpec
from .denoiser import ConfigError, DenoiserConfig
from .training import TrainConfig


class ConfigValidationError(Exception):
    """Raised with the dotted path of the bad field."""


@dataclass(frozen=True)
class RunConfig:
    # [data]
    returns_path: str = "returns.csv"
    factors_path: str = "factors.csv"
    macro_path: str = "macro.csv"
    asset_covs_path: str = ""        # empty: compute characteristics
    percent_check: str = "warn"
    standardize_targets: bool = True
    zero_fill_characteristics: bool = False
    # [split]
    train_range: tuple[str, str] = ("1958-01-01", "1999-12-31")
    val_range: tuple[str, str] = ("2000-01-01", "2004-12-31")
    test_range: tuple[str, str] = ("2005-01-01", "2023-12-31")
    # [model]
    M: int = 63
    D: int = 128
    heads: int = 4
    mlp_hidden: int = 512
    step_embed_dim: int = 32
    window_pos: bool = True
    attn_head_reduce: str = "mean"
    cross_depth: int = 1
    self_depth: int = 1
    # [train]
    steps: int = 100_000
    batch: int = 1024
    lr_max: float = 1e-4
    warmup: int = 1000
    lambda_corr: float = 0.05
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    log_every: int = 100
    val_every: int = 5000
    val_samples: int = 16
    guidance_intensity: float | None = None   # None: analytic Ledoit-Wolf delta
    # [sample]
    ddim_steps: int = 50
    eta: float = 0.0
    K: int = 100
    # [run]
    seed: int = 0
    output_dir: str = "out"
    deterministic: bool = False
    threads: int = 0   # 0: machine default

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigValidationError(f"sample.eta: {self.eta} outside [0, 1]")
        if self.K < 1:
            raise ConfigValidationError(f"sample.K: {self.K} must be >= 1")
        if self.ddim_steps < 1 or self.ddim_steps > self.T:
            raise ConfigValidationError(
                f"sample.ddim_steps: {self.ddim_steps} outside [1, T={self.T}]"
            )
        if self.percent_check not in ("warn", "error"):
            raise ConfigValidationError(
                f"data.percent_check: {self.percent_check!r} not in (warn, error)"
            )
        try:
            self.denoiser_config(n_assets=1, n_sys=1, z_dim=1)
        except ConfigError as exc:
            raise ConfigValidationError(f"model: {exc}") from exc
        try:
            self.train_config()
        except Exception as exc:
            raise ConfigValidationError(f"train: {exc}") from exc

    def split_spec(self) -> SplitSpec:
        return SplitSpec(
            train_range=self.train_range,
            val_range=self.val_range,
            test_range=self.test_range,
        )

    def denoiser_config(self, n_assets: int, n_sys: int, z_dim: int) -> DenoiserConfig:
        return DenoiserConfig(
            N=n_assets, N_y=n_sys, M=self.M, D=self.D, heads=self.heads,
            mlp_hidden=self.mlp_hidden, step_embed_dim=self.step_embed_dim,
            z_dim=z_dim, window_pos=self.window_pos,
            attn_head_reduce=self.attn_head_reduce,
            cross_depth=self.cross_depth, self_depth=self.self_depth,
        )

    def train_config(self, **overrides) -> TrainConfig:
        kwargs = dict(
            steps=self.steps, batch=self.batch, lr_max=self.lr_max,
            warmup=self.warmup, lambda_corr=self.lambda_corr, T=self.T,
            seed=self.seed, weight_decay=self.weight_decay,
            grad_clip=self.grad_clip, deterministic=self.deterministic,
            log_every=self.log_every, val_every=self.val_every,
            val_samples=self.val_samples,
        )
        kwargs.update(overrides)
        return TrainConfig(**kwargs)


# section -> {toml key: RunConfig field}
_SCHEMA = {
    "data": {
        "returns": "returns_path",
        "factors": "factors_path",
        "macro": "macro_path",
        "asset_covariates": "asset_covs_path",
        "percent_check": "percent_check",
        "standardize_targets": "standardize_targets",
        "zero_fill_characteristics": "zero_fill_characteristics",
    },
    "split": {
        "train": "train_range",
        "val": "val_range",
        "test": "test_range",
    },
    "model": {
        key: key
        for key in ("M", "D", "heads", "mlp_hidden", "step_embed_dim",
                    "window_pos", "attn_head_reduce", "cross_depth", "self_depth")
    },
    "train": {
        key: key
        for key in ("steps", "batch", "lr_max", "warmup", "lambda_corr", "T",
                    "beta_start", "beta_end", "weight_decay", "grad_clip",
                    "log_every", "val_every", "val_samples", "guidance_intensity")
    },
    "sample": {key: key for key in ("ddim_steps", "eta", "K")},
    "run": {
        key: key for key in ("seed", "output_dir", "deterministic", "threads")
    },
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(section: str, key: str, field_name: str, value):
    if field_name.endswith("_range"):
        if (not isinstance(value, (list, tuple)) or len(value) != 2
                or not all(isinstance(v, str) for v in value)):
            raise ConfigValidationError(
                f"{section}.{key}: expected a [start, end] date pair"
            )
        return tuple(value)
    if field_name == "guidance_intensity":
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigValidationError(f"{section}.{key}: expected a number")
        return float(value)
    current = getattr(RunConfig, field_name)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigValidationError(f"{section}.{key}: expected a boolean")
        return value
    if isinstance(current, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigValidationError(f"{section}.{key}: expected an integer")
        return value
    if isinstance(current, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigValidationError(f"{section}.{key}: expected a number")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigValidationError(f"{section}.{key}: expected a string")
        return value
    raise ConfigValidationError(f"{section}.{key}: unsupported type")


def validate_config(path: str) -> RunConfig:
    """Parse and validate a TOML run configuration file."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigValidationError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigValidationError(f"{path}: {exc}") from exc
    kwargs = {}
    for section, table in raw.items():
        if section not in _SCHEMA:
            raise ConfigValidationError(f"unknown section [{section}]")
        if not isinstance(table, dict):
            raise ConfigValidationError(f"[{section}] must be a table")
        for key, value in table.items():
            if key not in _SCHEMA[section]:
                raise ConfigValidationError(f"unknown key {section}.{key}")
            field_name = _SCHEMA[section][key]
            kwargs[field_name] = _coerce(section, key, field_name, value)
    return RunConfig(**kwargs)


def check_paths(config: RunConfig, require_covs: bool = False) -> None:
    """Existence check for the referenced data files, with field names."""
    checks = [
        ("data.returns", config.returns_path),
        ("data.factors", config.factors_path),
        ("data.macro", config.macro_path),
    ]
    if require_covs or config.asset_covs_path:
        if config.asset_covs_path:
            checks.append(("data.asset_covariates", config.asset_covs_path))
    for name, path in checks:
        if not os.path.exists(path):
            raise ConfigValidationError(f"{name}: file not found: {path}")
