"""Shared fixtures and oracle helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from diffcast.data import MACRO_COLUMNS, ReturnPanel
from diffcast.denoiser import DenoiserConfig, init_denoiser


@pytest.fixture(autouse=True)
def _single_thread():
    # Bitwise-reproducible torch reductions for every test.
    torch.set_num_threads(1)


def write_csv(path, dates, columns, values):
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    with open(path, "w") as fh:
        fh.write("date," + ",".join(columns) + "\n")
        for date, row in zip(dates, values):
            fh.write(str(date) + "," + ",".join(repr(float(v)) for v in row) + "\n")
    return str(path)


def daily_dates(n, start="2020-01-01"):
    return np.datetime64(start, "D") + np.arange(n)


def make_panel(returns, factors=None, risk_free=None, start="2020-01-01"):
    returns = np.atleast_2d(np.asarray(returns, dtype=np.float64))
    t, n = returns.shape
    if factors is None:
        factors = np.zeros((t, 3))
    if risk_free is None:
        risk_free = np.zeros(t)
    return ReturnPanel(
        dates=daily_dates(t, start),
        asset_names=tuple(f"A{i}" for i in range(n)),
        raw_returns=returns,
        risk_free=np.asarray(risk_free, dtype=np.float64),
        factors=np.asarray(factors, dtype=np.float64),
    )


TINY_CONFIG = DenoiserConfig(
    N=3, N_y=2, M=5, D=8, heads=2, mlp_hidden=16, step_embed_dim=4, z_dim=2
)


def tiny_model(seed=0, config=TINY_CONFIG):
    return init_denoiser(config, seed=seed)


def tiny_context(rng, config=TINY_CONFIG, batch=1):
    c = config
    return (
        rng.standard_normal((batch, c.N)),
        rng.integers(1, 100, size=batch),
        rng.standard_normal((batch, c.M, c.N)),
        rng.standard_normal((batch, c.M, c.N, c.z_dim)),
        rng.standard_normal((batch, c.M, c.N_y)),
    )


def finite_difference_gradients(params, scalar_fn, h=1e-6):
    """Central finite differences of scalar_fn() w.r.t. a list of tensors.

    scalar_fn must recompute the scalar from the current parameter values.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + h
                up = scalar_fn()
                flat[j] = orig - h
                down = scalar_fn()
                flat[j] = orig
                g.view(-1)[j] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def assert_gradients_close(analytic, numeric, rel_tol=1e-4):
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    scale = torch.linalg.vector_norm(a)
    assert scale > 0
    assert float(torch.linalg.vector_norm(a - n) / scale) < rel_tol


def random_macro_csv(path, dates, rng):
    values = rng.standard_normal((len(dates), len(MACRO_COLUMNS)))
    return write_csv(path, dates, list(MACRO_COLUMNS), values)
