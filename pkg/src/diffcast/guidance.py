"""Correlation guidance: shrinkage targets and the cosine regularizer.

The regularizer pulls the asset-to-asset block of the stage-2 attention
probabilities toward a target correlation matrix built from a Ledoit-Wolf
shrunk covariance: the noisy window covariance is shrunk toward the
covariance pre-computed over the full training range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


class GuidanceError(Exception):
    pass


@dataclass(frozen=True)
class ShrinkageTarget:
    """Stable shrinkage anchor plus the intensity policy.

    intensity is None for the analytic plug-in delta, or a fixed value in
    [0, 1].
    """

    train_cov: np.ndarray
    intensity: float | None = None

    def __post_init__(self):
        cov = np.asarray(self.train_cov, dtype=np.float64)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise GuidanceError("train_cov must be square")
        if not np.allclose(cov, cov.T, atol=1e-10):
            raise GuidanceError("train_cov must be symmetric")
        if self.intensity is not None and not 0.0 <= self.intensity <= 1.0:
            raise GuidanceError(f"intensity {self.intensity} outside [0, 1]")


def sample_covariance(window: np.ndarray) -> np.ndarray:
    """Unbiased (M-1 denominator) covariance of an (M, N) return window."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2 or window.shape[0] < 2:
        raise GuidanceError("need at least 2 window rows")
    centered = window - window.mean(axis=0)
    cov = centered.T @ centered / (window.shape[0] - 1)
    return 0.5 * (cov + cov.T)


def shrinkage_intensity(
    sample: np.ndarray, target_cov: np.ndarray, window: np.ndarray
) -> float:
    """Analytic plug-in delta = clip(pi_hat / (M * gamma_hat), 0, 1).

    pi_hat sums the estimated asymptotic variances of the sample covariance
    entries; gamma_hat is the squared Frobenius distance between the target
    and the sample. gamma_hat = 0 means the sample already equals the
    target, so full shrinkage is harmless.
    """
    window = np.asarray(window, dtype=np.float64)
    m = window.shape[0]
    gamma = float(np.sum((target_cov - sample) ** 2))
    if gamma == 0.0:
        return 1.0
    centered = window - window.mean(axis=0)
    # pi_hat: mean squared deviation of per-observation outer products from S.
    devs = centered[:, :, None] * centered[:, None, :] - sample[None]
    pi = float(np.sum(devs**2) / m)
    return float(np.clip(pi / (m * gamma), 0.0, 1.0))


def ledoit_wolf_shrink(
    sample: np.ndarray, target: ShrinkageTarget, window: np.ndarray
) -> np.ndarray:
    """delta * train_cov + (1 - delta) * sample."""
    sample = np.asarray(sample, dtype=np.float64)
    if sample.shape != target.train_cov.shape:
        raise GuidanceError(
            f"sample shape {sample.shape} != target {target.train_cov.shape}"
        )
    if target.intensity is not None:
        delta = target.intensity
    else:
        delta = shrinkage_intensity(sample, target.train_cov, window)
    return delta * target.train_cov + (1.0 - delta) * sample


def covariance_to_correlation(cov: np.ndarray) -> np.ndarray:
    """Rescale a covariance to a correlation matrix with exact unit diagonal."""
    cov = np.asarray(cov, dtype=np.float64)
    diag = np.diag(cov)
    if np.any(diag <= 0.0):
        floored = np.maximum(diag, 1e-12)
        if np.any(diag < -1e-12):
            raise GuidanceError("covariance has a negative diagonal entry")
        diag = floored
    scale = 1.0 / np.sqrt(diag)
    corr = cov * scale[:, None] * scale[None, :]
    np.fill_diagonal(corr, 1.0)
    return corr


def target_correlation(
    window: np.ndarray, target: ShrinkageTarget
) -> np.ndarray:
    """Window returns -> shrunk covariance -> target correlation matrix."""
    shrunk = ledoit_wolf_shrink(sample_covariance(window), target, window)
    return covariance_to_correlation(shrunk)


def correlation_guidance_loss(A, target) -> torch.Tensor:
    """Negative mean row-cosine between attention matrix A and the target.

    Accepts (N, N) or batched (B, N, N) inputs; rows of the target that are
    all zero contribute 0. Differentiable through A.
    """
    A = torch.atleast_2d(torch.as_tensor(A))
    target = torch.as_tensor(target, dtype=A.dtype)
    if target.ndim < A.ndim:
        target = target.expand_as(A)
    if A.shape != target.shape:
        raise GuidanceError(f"shape mismatch {tuple(A.shape)} vs {tuple(target.shape)}")
    if not (torch.isfinite(A).all() and torch.isfinite(target).all()):
        raise GuidanceError("non-finite input to correlation loss")
    a_norm = torch.linalg.vector_norm(A, dim=-1)
    t_norm = torch.linalg.vector_norm(target, dim=-1)
    dot = (A * target).sum(dim=-1)
    # Softmax rows of A cannot vanish; a zero target row zeroes its term.
    zero_row = t_norm == 0
    denom = a_norm * torch.where(zero_row, torch.ones_like(t_norm), t_norm)
    cos = torch.where(zero_row, torch.zeros_like(dot), dot / denom)
    return -cos.mean(dim=-1)
