"""Training loop: batch construction, total loss, schedule, checkpoints.

Each step draws a batch of (anchor date, noise step) pairs, corrupts the
standardized next-day return vector, and descends the weighted sum of the
denoising MSE and the correlation-guidance loss with AdamW under a linear
warmup plus cosine decay learning-rate schedule.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, asdict
import math

import numpy as np
import torch

from .data import Normalizer
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import NoiseSchedule, make_ddim_plan, generate_ensemble
from .guidance import ShrinkageTarget, correlation_guidance_loss, target_correlation
from .scoring import energy_score

CHECKPOINT_VERSION = 1


class TrainingError(Exception):
    pass


class NumericAbort(TrainingError):
    """Non-finite loss; the last good model state is attached."""

    def __init__(self, message: str, checkpoint: dict | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 100_000
    batch: int = 1024
    lr_max: float = 1e-4
    warmup: int = 1000
    lambda_corr: float = 0.05
    T: int = 1000
    seed: int = 0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    deterministic: bool = False
    log_every: int = 100
    val_every: int = 5000
    val_samples: int = 16
    val_max_dates: int = 64

    def __post_init__(self):
        if self.steps > 0 and self.warmup >= self.steps:
            raise TrainingError("warmup must be smaller than total steps")
        if self.lambda_corr < 0:
            raise TrainingError("lambda_corr must be nonnegative")


@dataclass(frozen=True)
class TrainingDataset:
    """Window-sliceable view over one split of the prepared panel.

    All arrays cover the full panel timeline; `anchors` lists the dates t
    for which the window [t-M+1, t] and the target t+1 are usable.
    """

    std_returns: np.ndarray   # (T, N) standardized excess returns
    excess_returns: np.ndarray  # (T, N) raw excess returns (guidance targets)
    asset_covs: np.ndarray    # (T, N, z) normalized characteristics
    sys_covs: np.ndarray      # (T, N_y) normalized systematic covariates
    anchors: np.ndarray       # valid anchor indices t
    M: int
    target_normalizer: Normalizer

    def __post_init__(self):
        if len(self.anchors) == 0:
            raise TrainingError("dataset has no usable anchor dates")

    def __len__(self) -> int:
        return len(self.anchors)

    def batch_at(self, anchor_idx: np.ndarray):
        """Gather (x0, hist, asset_covs, sys_covs) for anchor dates t."""
        t = self.anchors[anchor_idx]
        offsets = np.arange(-self.M + 1, 1)
        win = t[:, None] + offsets
        return (
            self.std_returns[t + 1],          # (B, N)
            self.std_returns[win],            # (B, M, N)
            self.asset_covs[win],             # (B, M, N, z)
            self.sys_covs[win],               # (B, M, N_y)
        )

    def guidance_windows(self, anchor_idx: np.ndarray) -> np.ndarray:
        t = self.anchors[anchor_idx]
        offsets = np.arange(-self.M + 1, 1)
        return self.excess_returns[t[:, None] + offsets]  # (B, M, N)


def build_dataset(
    std_returns: np.ndarray,
    excess_returns: np.ndarray,
    asset_covs: np.ndarray,
    sys_covs: np.ndarray,
    split_indices: np.ndarray,
    M: int,
    target_normalizer: Normalizer,
) -> TrainingDataset:
    """Select anchors t with the window, the target t+1, and all covariates
    inside the split and fully defined."""
    allowed = np.zeros(std_returns.shape[0], dtype=bool)
    allowed[split_indices] = True
    cov_ok = np.all(np.isfinite(asset_covs), axis=(1, 2))
    anchors = []
    for t in split_indices:
        lo = t - M + 1
        if lo < 0 or t + 1 >= std_returns.shape[0]:
            continue
        if not (allowed[lo : t + 2].all() and cov_ok[lo : t + 1].all()):
            continue
        anchors.append(t)
    return TrainingDataset(
        std_returns=std_returns,
        excess_returns=excess_returns,
        asset_covs=asset_covs,
        sys_covs=sys_covs,
        anchors=np.asarray(anchors, dtype=np.int64),
        M=M,
        target_normalizer=target_normalizer,
    )


def sample_training_batch(
    dataset: TrainingDataset, batch: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniform with-replacement anchor indices into the dataset."""
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    return rng.integers(0, len(dataset), size=batch)


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_max, then cosine decay to 0 at the last step."""
    if cfg.warmup > 0 and step <= cfg.warmup:
        return cfg.lr_max * step / cfg.warmup
    progress = (step - cfg.warmup) / (cfg.steps - cfg.warmup)
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


class GuidanceCache:
    """Per-window-end-index cache of target correlation matrices."""

    def __init__(self, target: ShrinkageTarget, dataset: TrainingDataset):
        self.target = target
        self.dataset = dataset
        self._cache: dict[int, np.ndarray] = {}

    def targets_for(self, anchor_idx: np.ndarray) -> np.ndarray:
        windows = self.dataset.guidance_windows(anchor_idx)
        out = np.empty((len(anchor_idx), windows.shape[2], windows.shape[2]))
        for row, (ai, window) in enumerate(zip(anchor_idx, windows)):
            key = int(self.dataset.anchors[ai])
            if key not in self._cache:
                self._cache[key] = target_correlation(window, self.target)
            out[row] = self._cache[key]
        return out


def compute_total_loss(
    model: Denoiser,
    x0: np.ndarray,
    hist: np.ndarray,
    asset_covs: np.ndarray,
    sys_covs: np.ndarray,
    taus: np.ndarray,
    eps: np.ndarray,
    sched: NoiseSchedule,
    guidance_targets: np.ndarray | None,
    lambda_corr: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, mse, l_corr) for one batch; total carries the autograd graph.

    With lambda_corr = 0 the guidance path is not evaluated at all, so its
    gradient contribution is exactly zero.
    """
    dtype = model.decoder.weight.dtype
    abar = np.concatenate([[1.0], sched.alpha_bar])[taus]
    x_tau = np.sqrt(abar)[:, None] * x0 + np.sqrt(1.0 - abar)[:, None] * eps
    eps_hat, attn = model(x_tau, taus, hist, asset_covs, sys_covs)
    eps_t = torch.as_tensor(eps, dtype=dtype)
    mse = ((eps_t - eps_hat) ** 2).sum(dim=1).mean()
    if lambda_corr > 0.0:
        if guidance_targets is None:
            raise TrainingError("lambda_corr > 0 requires guidance targets")
        l_corr = correlation_guidance_loss(attn, guidance_targets).mean()
    else:
        l_corr = torch.zeros((), dtype=dtype)
    total = mse + lambda_corr * l_corr
    if not torch.isfinite(total):
        raise NumericAbort(
            f"non-finite loss (mse={float(mse)}, l_corr={float(l_corr)})"
        )
    return total, mse.detach(), l_corr.detach()


def make_checkpoint(
    model: Denoiser,
    optimizer: torch.optim.Optimizer | None,
    step: int,
    train_cfg: TrainConfig,
    normalizers: dict[str, Normalizer],
    train_cov: np.ndarray,
) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "denoiser_config": asdict(model.config),
        "state_dict": {k: v.clone() for k, v in model.state_dict().items()},
        "optimizer_state": copy.deepcopy(optimizer.state_dict()) if optimizer else None,
        "step": step,
        "train_config": asdict(train_cfg),
        "normalizers": {
            name: {"mean": n.mean, "std": n.std} for name, n in normalizers.items()
        },
        "train_cov": np.asarray(train_cov),
    }


def save_checkpoint(path: str, checkpoint: dict) -> None:
    torch.save(checkpoint, path)


def load_checkpoint(path: str, dtype=torch.float64) -> tuple[Denoiser, dict]:
    checkpoint = torch.load(path, weights_only=False)
    if checkpoint.get("version") != CHECKPOINT_VERSION:
        raise TrainingError(
            f"{path}: unsupported checkpoint version {checkpoint.get('version')}"
        )
    model = Denoiser(DenoiserConfig(**checkpoint["denoiser_config"]), dtype=dtype)
    model.load_state_dict(checkpoint["state_dict"])
    return model, checkpoint


def checkpoint_normalizers(checkpoint: dict) -> dict[str, Normalizer]:
    return {
        name: Normalizer(mean=np.asarray(d["mean"]), std=np.asarray(d["std"]))
        for name, d in checkpoint["normalizers"].items()
    }


def _validation_energy_score(
    model: Denoiser,
    dataset: TrainingDataset,
    sched: NoiseSchedule,
    cfg: TrainConfig,
) -> float:
    """Mini-ensemble ES on (a subsample of) the validation anchors."""
    n_dates = min(len(dataset), cfg.val_max_dates)
    idx = np.linspace(0, len(dataset) - 1, n_dates).astype(int)
    plan = make_ddim_plan(sched, min(20, sched.T), eta=0.0)
    norm = dataset.target_normalizer
    scores = []
    with torch.no_grad():
        for ai in idx:
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

            samples = generate_ensemble(
                eps_fn, n_assets, plan, sched, cfg.val_samples, cfg.seed, chunk=0
            )
            truth = norm.invert(x0[0])
            scores.append(energy_score(norm.invert(samples), truth))
    return float(np.mean(scores))


def train(
    dataset: TrainingDataset,
    cfg: TrainConfig,
    sched: NoiseSchedule,
    model: Denoiser,
    guidance_target: ShrinkageTarget | None = None,
    val_dataset: TrainingDataset | None = None,
    log_path: str | None = None,
) -> tuple[dict, list[dict]]:
    """Run the full loop; returns (best checkpoint, training log rows).

    Model selection keeps the checkpoint with the lowest validation energy
    score when a validation dataset is given, else the final state.
    """
    if cfg.T != sched.T:
        raise TrainingError(f"config T={cfg.T} != schedule T={sched.T}")
    if cfg.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=cfg.lr_max,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )
    cache = (
        GuidanceCache(guidance_target, dataset)
        if guidance_target is not None and cfg.lambda_corr > 0
        else None
    )
    train_cov = (
        guidance_target.train_cov
        if guidance_target is not None
        else np.cov(dataset.excess_returns[dataset.anchors], rowvar=False)
    )
    normalizers = {"target": dataset.target_normalizer}
    log: list[dict] = []
    best_es = math.inf
    best_checkpoint = make_checkpoint(
        model, optimizer, 0, cfg, normalizers, train_cov
    )
    last_good = best_checkpoint

    for step in range(1, cfg.steps + 1):
        idx = sample_training_batch(dataset, cfg.batch, rng)
        x0, hist, covs, sys = dataset.batch_at(idx)
        taus = rng.integers(1, cfg.T + 1, size=cfg.batch)
        eps = rng.standard_normal(x0.shape)
        targets = cache.targets_for(idx) if cache is not None else None
        lr = lr_at_step(step, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.zero_grad()
        try:
            total, mse, l_corr = compute_total_loss(
                model, x0, hist, covs, sys, taus, eps,
                sched, targets, cfg.lambda_corr,
            )
        except NumericAbort as exc:
            raise NumericAbort(
                f"step {step}: {exc}", checkpoint=last_good
            ) from exc
        total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()

        row = {
            "step": step, "lr": lr, "mse": float(mse),
            "l_corr": float(l_corr), "total": float(total.detach()), "val_es": "",
        }
        if step % cfg.val_every == 0 and val_dataset is not None:
            val_es = _validation_energy_score(model, val_dataset, sched, cfg)
            row["val_es"] = val_es
            if val_es < best_es:
                best_es = val_es
                best_checkpoint = make_checkpoint(
                    model, optimizer, step, cfg, normalizers, train_cov
                )
        if step % cfg.log_every == 0 or step == cfg.steps or row["val_es"] != "":
            log.append(row)
            last_good = make_checkpoint(
                model, optimizer, step, cfg, normalizers, train_cov
            )

    final = make_checkpoint(model, optimizer, cfg.steps, cfg, normalizers, train_cov)
    if val_dataset is None or best_es is math.inf:
        best_checkpoint = final
    if log_path is not None:
        write_training_log(log_path, log)
    return best_checkpoint, log


def write_training_log(path: str, log: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("step,lr,mse,l_corr,total,val_es\n")
        for row in log:
            fh.write(
                f"{row['step']},{row['lr']:.10g},{row['mse']:.10g},"
                f"{row['l_corr']:.10g},{row['total']:.10g},{row['val_es']}\n"
            )
