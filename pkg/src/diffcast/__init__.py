"""Conditional diffusion forecasting of multivariate asset returns.

A hierarchical attention denoiser trained with a correlation-guided
regularizer, DDIM sampling for forecast ensembles, proper scoring rules,
and long-only portfolio construction with a daily-rebalanced backtest.
"""

__version__ = "0.1.0"
