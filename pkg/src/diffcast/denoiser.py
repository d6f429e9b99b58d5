"""Hierarchical attention denoising network.

Stage 1 runs per-asset cross-attention: each asset's noisy target (plus the
diffusion-step embedding) queries its own lookback window of returns and
asset covariates, with no cross-asset mixing. Stage 2 stacks the resulting
asset latents with systematic-covariate embeddings and applies self-attention
across the whole market; the asset-to-asset block of its attention
probabilities is returned alongside the noise prediction for use by the
correlation regularizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


class ContextError(Exception):
    pass


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    N: int                    # assets
    N_y: int                  # systematic covariates
    M: int                    # lookback window length
    D: int = 128              # hidden dimension
    heads: int = 4
    mlp_hidden: int = 512
    step_embed_dim: int = 32
    z_dim: int = 10           # characteristics per asset
    window_pos: bool = True   # add sinusoidal position encoding to keys/values
    attn_head_reduce: str = "mean"   # "mean" or "first": A extraction across heads
    cross_depth: int = 1
    self_depth: int = 1

    def __post_init__(self):
        for name in ("N", "N_y", "M", "D", "heads", "mlp_hidden",
                     "step_embed_dim", "z_dim", "cross_depth", "self_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.D % self.heads != 0:
            raise ConfigError(f"D={self.D} not divisible by heads={self.heads}")
        if self.step_embed_dim % 2 != 0:
            raise ConfigError(f"step_embed_dim={self.step_embed_dim} must be even")
        if self.attn_head_reduce not in ("mean", "first"):
            raise ConfigError(f"unknown attn_head_reduce {self.attn_head_reduce!r}")


def step_embedding(tau, dim: int, dtype=torch.float64) -> torch.Tensor:
    """Sinusoidal embedding of diffusion steps.

    Component 2i is sin(tau / 10000^(2i/dim)), component 2i+1 the matching
    cosine. Accepts a scalar or a 1-D batch of steps.
    """
    if dim % 2 != 0:
        raise ConfigError(f"embedding dim {dim} must be even")
    tau = torch.as_tensor(tau, dtype=dtype)
    scalar = tau.ndim == 0
    tau = torch.atleast_1d(tau)
    freq = 10000.0 ** (-torch.arange(0, dim, 2, dtype=dtype) / dim)
    angles = tau[:, None] * freq[None, :]
    emb = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).reshape(-1, dim)
    return emb[0] if scalar else emb


def window_position_table(M: int, D: int, dtype=torch.float64) -> torch.Tensor:
    """Fixed sinusoidal encoding of window positions 0..M-1."""
    pos = torch.arange(M, dtype=dtype)
    return step_embedding(pos, D if D % 2 == 0 else D + 1, dtype=dtype)[:, :D]


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    # (..., D) -> (..., heads, D/heads)
    return x.reshape(*x.shape[:-1], heads, x.shape[-1] // heads)


class _Mlp(nn.Module):
    def __init__(self, D: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(D, hidden)
        self.act = nn.GELU()   # exact Gaussian CDF form
        self.fc2 = nn.Linear(hidden, D)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class CrossAttentionBlock(nn.Module):
    """Single-query multi-head cross-attention with a residual MLP.

    out = CA + MLP(LayerNorm(CA)); no output projection after the head
    concatenation.
    """

    def __init__(self, D: int, heads: int, mlp_hidden: int):
        super().__init__()
        self.heads = heads
        self.w_q = nn.Linear(D, D, bias=False)
        self.w_k = nn.Linear(D, D, bias=False)
        self.w_v = nn.Linear(D, D, bias=False)
        self.norm = nn.LayerNorm(D)
        self.mlp = _Mlp(D, mlp_hidden)

    def forward(self, q: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        """q: (..., D) single query; kv: (..., M, D) keys = values source."""
        if not (torch.isfinite(q).all() and torch.isfinite(kv).all()):
            raise ContextError("non-finite input to cross-attention")
        d_h = q.shape[-1] // self.heads
        qh = _split_heads(self.w_q(q), self.heads)          # (..., H, d_h)
        kh = _split_heads(self.w_k(kv), self.heads)         # (..., M, H, d_h)
        vh = _split_heads(self.w_v(kv), self.heads)
        scores = torch.einsum("...hd,...mhd->...hm", qh, kh) / np.sqrt(d_h)
        probs = torch.softmax(scores, dim=-1)               # (..., H, M)
        ca = torch.einsum("...hm,...mhd->...hd", probs, vh)
        ca = ca.reshape(*q.shape)
        return ca + self.mlp(self.norm(ca))


class SelfAttentionBlock(nn.Module):
    """Multi-head self-attention with a residual MLP; exposes the head-reduced
    attention probability matrix."""

    def __init__(self, D: int, heads: int, mlp_hidden: int, head_reduce: str = "mean"):
        super().__init__()
        self.heads = heads
        self.head_reduce = head_reduce
        self.u_q = nn.Linear(D, D, bias=False)
        self.u_k = nn.Linear(D, D, bias=False)
        self.u_v = nn.Linear(D, D, bias=False)
        self.norm = nn.LayerNorm(D)
        self.mlp = _Mlp(D, mlp_hidden)

    def forward(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """h: (..., S, D) -> (h', probs) with probs of shape (..., S, S)."""
        if not torch.isfinite(h).all():
            raise ContextError("non-finite input to self-attention")
        d_h = h.shape[-1] // self.heads
        qh = _split_heads(self.u_q(h), self.heads)   # (..., S, H, d_h)
        kh = _split_heads(self.u_k(h), self.heads)
        vh = _split_heads(self.u_v(h), self.heads)
        scores = torch.einsum("...shd,...thd->...hst", qh, kh) / np.sqrt(d_h)
        probs = torch.softmax(scores, dim=-1)        # (..., H, S, S)
        sa = torch.einsum("...hst,...thd->...shd", probs, vh)
        sa = sa.reshape(*h.shape)
        out = sa + self.mlp(self.norm(sa))
        if self.head_reduce == "mean":
            reduced = probs.mean(dim=-3)
        else:
            reduced = probs.select(-3, 0)
        return out, reduced


class Denoiser(nn.Module):
    """eps_theta: (x^tau, tau, context) -> (eps_hat, attention matrix A).

    The query/context embeddings, cross-attention block, and decoder are
    shared across all assets.
    """

    def __init__(self, config: DenoiserConfig, dtype=torch.float64):
        super().__init__()
        self.config = config
        c = config
        self.query_embed = nn.Linear(1 + c.step_embed_dim, c.D)
        self.context_embed = nn.Linear(1 + c.z_dim, c.D)
        self.register_buffer(
            "window_pos",
            window_position_table(c.M, c.D) if c.window_pos
            else torch.zeros(c.M, c.D, dtype=torch.float64),
        )
        self.sys_embed = nn.Linear(c.M, c.D)
        self.sys_id = nn.Parameter(torch.empty(c.N_y, c.D))
        nn.init.uniform_(self.sys_id, -1.0 / np.sqrt(c.M), 1.0 / np.sqrt(c.M))
        self.cross_blocks = nn.ModuleList(
            CrossAttentionBlock(c.D, c.heads, c.mlp_hidden)
            for _ in range(c.cross_depth)
        )
        self.self_blocks = nn.ModuleList(
            SelfAttentionBlock(c.D, c.heads, c.mlp_hidden, c.attn_head_reduce)
            for _ in range(c.self_depth)
        )
        self.decoder = nn.Linear(c.D, 1)
        self.to(dtype)

    def forward(
        self,
        x_tau: torch.Tensor,       # (B, N) noisy standardized targets
        tau: torch.Tensor,         # (B,) diffusion steps
        hist_returns: torch.Tensor,  # (B, M, N) standardized window returns
        asset_covs: torch.Tensor,    # (B, M, N, z_dim) normalized
        sys_covs: torch.Tensor,      # (B, M, N_y) normalized
    ) -> tuple[torch.Tensor, torch.Tensor]:
        c = self.config
        dtype = self.decoder.weight.dtype
        x_tau = torch.atleast_2d(torch.as_tensor(x_tau, dtype=dtype))
        b = x_tau.shape[0]
        tau = torch.atleast_1d(torch.as_tensor(tau, dtype=dtype))
        hist_returns = torch.as_tensor(hist_returns, dtype=dtype).reshape(b, c.M, c.N)
        asset_covs = torch.as_tensor(asset_covs, dtype=dtype).reshape(b, c.M, c.N, c.z_dim)
        sys_covs = torch.as_tensor(sys_covs, dtype=dtype).reshape(b, c.M, c.N_y)
        for name, t in (("x_tau", x_tau), ("hist_returns", hist_returns),
                        ("asset_covs", asset_covs), ("sys_covs", sys_covs)):
            if not torch.isfinite(t).all():
                raise ContextError(f"{name} contains undefined entries")

        # Stage 1: per-asset query over its own window.
        step_emb = step_embedding(tau, c.step_embed_dim, dtype=dtype)  # (B, E)
        q_in = torch.cat(
            [x_tau[:, :, None], step_emb[:, None, :].expand(b, c.N, -1)], dim=-1
        )
        q = self.query_embed(q_in)                                     # (B, N, D)
        ctx_in = torch.cat(
            [hist_returns.permute(0, 2, 1)[:, :, :, None],             # (B, N, M, 1)
             asset_covs.permute(0, 2, 1, 3)], dim=-1                   # (B, N, M, z)
        )
        kv = self.context_embed(ctx_in) + self.window_pos.to(dtype)    # (B, N, M, D)
        h = q
        for block in self.cross_blocks:
            h = block(h, kv)                                           # (B, N, D)

        # Stage 2: market-level self-attention over assets + systematics.
        sys = self.sys_embed(sys_covs.permute(0, 2, 1)) + self.sys_id  # (B, N_y, D)
        stacked = torch.cat([h, sys], dim=1)                           # (B, N+N_y, D)
        for block in self.self_blocks:
            stacked, probs = block(stacked)
        attn = probs[:, : c.N, : c.N]
        eps_hat = self.decoder(stacked[:, : c.N, :]).squeeze(-1)       # (B, N)
        return eps_hat, attn

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def expected_parameter_count(c: DenoiserConfig) -> int:
    """Closed-form learnable parameter count implied by the layer list."""
    linear = lambda fan_in, fan_out: fan_in * fan_out + fan_out
    mlp = linear(c.D, c.mlp_hidden) + linear(c.mlp_hidden, c.D)
    attn_core = 3 * c.D * c.D            # bias-free Q/K/V projections
    layernorm = 2 * c.D
    block = attn_core + layernorm + mlp
    return (
        linear(1 + c.step_embed_dim, c.D)
        + linear(1 + c.z_dim, c.D)
        + linear(c.M, c.D) + c.N_y * c.D
        + c.cross_depth * block
        + c.self_depth * block
        + linear(c.D, 1)
    )


def init_denoiser(
    config: DenoiserConfig, seed: int, dtype=torch.float64
) -> Denoiser:
    """Deterministic initialization: uniform fan-in scaling on linear maps
    (the torch default), layernorm gain 1 / bias 0."""
    torch.manual_seed(seed)
    return Denoiser(config, dtype=dtype)
