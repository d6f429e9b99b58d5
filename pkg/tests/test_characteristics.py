"""Characteristics: momentum, rolling OLS, and the 10-column tensor.

The main oracle is a naive per-date recomputation of every column with
plain numpy loops, written independently of the vectorized implementation.
"""

import numpy as np
import pytest

from diffcast.characteristics import (
    BETA_WINDOW, CHMOM_SHIFT, COLUMNS, CharacteristicsError, MOM_WINDOWS,
    VOL_WINDOW, cache_key, compute_characteristics, compute_momentum,
    load_characteristics, rolling_ols, save_characteristics,
)

from conftest import make_panel


class TestComputeMomentum:
    def test_zero_returns_zero_momentum(self):
        out = compute_momentum(np.zeros(30), 21)
        np.testing.assert_array_equal(out[20:], 0.0)
        assert np.isnan(out[:20]).all()

    def test_two_day_product(self):
        # [DERIVED: 1.1 * 1.1 - 1]
        out = compute_momentum(np.array([0.1, 0.1]), 2)
        assert out[1] == pytest.approx(0.21, abs=1e-15)

    def test_window_one_is_identity(self):
        r = np.array([0.01, -0.02, 0.03])
        np.testing.assert_allclose(compute_momentum(r, 1), r, atol=1e-15)

    def test_short_series_all_undefined(self):
        assert np.isnan(compute_momentum(np.ones(3), 5)).all()

    def test_bad_window(self):
        with pytest.raises(CharacteristicsError):
            compute_momentum(np.ones(3), 0)


def ols_normal_equations(y, Z):
    """Independent oracle: solve (Z'Z) b = Z'y directly."""
    return np.linalg.solve(Z.T @ Z, Z.T @ y)


class TestRollingOls:
    def test_identity_regression(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(30)
        coefs, resid_std = rolling_ols(x, x, 10)
        np.testing.assert_allclose(coefs[9:, 0], 0.0, atol=1e-12)
        np.testing.assert_allclose(coefs[9:, 1], 1.0, atol=1e-12)
        np.testing.assert_allclose(resid_std[9:], 0.0, atol=1e-12)

    def test_exact_affine_fit(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(25)
        coefs, _ = rolling_ols(2 * x + 3, x, 12)
        np.testing.assert_allclose(coefs[11:, 0], 3.0, atol=1e-10)
        np.testing.assert_allclose(coefs[11:, 1], 2.0, atol=1e-10)

    def test_matches_normal_equations_oracle(self):
        # [DERIVED: independent normal-equations solver on a 20-point window]
        rng = np.random.default_rng(2)
        t, window = 40, 20
        X = rng.standard_normal((t, 3))
        y = rng.standard_normal(t)
        coefs, resid_std = rolling_ols(y, X, window)
        for end in range(window - 1, t):
            sl = slice(end - window + 1, end + 1)
            Z = np.column_stack([np.ones(window), X[sl]])
            beta = ols_normal_equations(y[sl], Z)
            np.testing.assert_allclose(coefs[end], beta, atol=1e-10)
            resid = y[sl] - Z @ beta
            expected = np.sqrt(resid @ resid / (window - 3 - 1))
            assert resid_std[end] == pytest.approx(expected, abs=1e-10)

    def test_rank_deficient_window_undefined(self):
        x = np.zeros(15)  # constant regressor duplicates the intercept
        coefs, resid_std = rolling_ols(np.arange(15.0), x, 10)
        assert np.isnan(coefs[9:]).all()
        assert np.isnan(resid_std[9:]).all()

    def test_window_too_small(self):
        with pytest.raises(CharacteristicsError):
            rolling_ols(np.ones(10), np.ones((10, 2)), 3)


def _long_panel(rng, t=1000, n=2, scale=0.01):
    returns = scale * rng.standard_normal((t, n))
    factors = scale * rng.standard_normal((t, 3))
    return make_panel(returns, factors=factors)


def naive_characteristics(panel):
    """Brute-force per-date recomputation of all 10 columns."""
    r = panel.excess_returns
    t_len, n = r.shape
    out = np.full((t_len, n, 10), np.nan)
    for i in range(n):
        for t in range(t_len):
            row = {}
            for col, k in MOM_WINDOWS.items():
                if t >= k - 1:
                    row[col] = np.prod(1 + r[t - k + 1 : t + 1, i]) - 1
            if t >= CHMOM_SHIFT + MOM_WINDOWS["mom6m"] - 1:
                prev = np.prod(1 + r[t - CHMOM_SHIFT - 125 : t - CHMOM_SHIFT + 1, i]) - 1
                row["chmom"] = row["mom6m"] - prev
            if t >= VOL_WINDOW - 1:
                w = r[t - VOL_WINDOW + 1 : t + 1, i]
                row["retvol"] = np.std(w, ddof=1)
                row["maxret"] = np.max(w)
            if t >= BETA_WINDOW - 1:
                sl = slice(t - BETA_WINDOW + 1, t + 1)
                z1 = np.column_stack([np.ones(BETA_WINDOW), panel.factors[sl, 0]])
                b1 = ols_normal_equations(r[sl, i], z1)
                row["beta"], row["betasq"] = b1[1], b1[1] ** 2
                z3 = np.column_stack([np.ones(BETA_WINDOW), panel.factors[sl]])
                b3 = ols_normal_equations(r[sl, i], z3)
                resid = r[sl, i] - z3 @ b3
                row["idiovol"] = np.sqrt(resid @ resid / (BETA_WINDOW - 3 - 1))
            for j, col in enumerate(COLUMNS):
                if col in row:
                    out[t, i, j] = row[col]
    return out


class TestComputeCharacteristics:
    def test_brute_force_oracle(self):
        # [DERIVED: naive per-date recomputation, 1000-day fixture]
        rng = np.random.default_rng(3)
        panel = _long_panel(rng)
        tensor = compute_characteristics(panel)
        expected = naive_characteristics(panel)
        defined = np.isfinite(expected)
        np.testing.assert_array_equal(np.isfinite(tensor.values), defined)
        np.testing.assert_allclose(
            tensor.values[defined], expected[defined], atol=1e-10
        )
        assert tensor.valid_from == 755  # mom36m window dominates the warm-up

    def test_market_mimicking_asset(self):
        rng = np.random.default_rng(4)
        mkt = 0.01 * rng.standard_normal(900)
        factors = np.column_stack([
            mkt, 1e-4 * rng.standard_normal(900), 1e-4 * rng.standard_normal(900)
        ])
        panel = make_panel(mkt[:, None], factors=factors)
        tensor = compute_characteristics(panel, zero_fill=True)
        beta = tensor.values[BETA_WINDOW:, 0, COLUMNS.index("beta")]
        idio = tensor.values[BETA_WINDOW:, 0, COLUMNS.index("idiovol")]
        np.testing.assert_allclose(beta, 1.0, atol=1e-10)
        np.testing.assert_allclose(idio, 0.0, atol=1e-10)

    def test_zero_return_asset(self):
        rng = np.random.default_rng(5)
        returns = np.column_stack([
            np.zeros(900), 0.01 * rng.standard_normal(900)
        ])
        panel = make_panel(returns, factors=0.01 * rng.standard_normal((900, 3)))
        tensor = compute_characteristics(panel, zero_fill=True)
        for col in ("mom1m", "mom6m", "mom12m", "mom36m", "chmom",
                    "retvol", "maxret"):
            np.testing.assert_array_equal(
                tensor.values[:, 0, COLUMNS.index(col)], 0.0
            )

    def test_betasq_is_beta_squared(self):
        rng = np.random.default_rng(6)
        tensor = compute_characteristics(_long_panel(rng))
        beta = tensor.values[:, :, COLUMNS.index("beta")]
        betasq = tensor.values[:, :, COLUMNS.index("betasq")]
        defined = np.isfinite(beta)
        np.testing.assert_array_equal(betasq[defined], beta[defined] ** 2)

    def test_no_look_ahead_truncation(self):
        rng = np.random.default_rng(7)
        panel = _long_panel(rng, t=1000)
        full = compute_characteristics(panel)
        prefix_panel = make_panel(
            panel.raw_returns[:900], factors=panel.factors[:900]
        )
        prefix = compute_characteristics(prefix_panel)
        np.testing.assert_array_equal(full.values[:900], prefix.values.copy())

    def test_retvol_location_invariance(self):
        rng = np.random.default_rng(8)
        r = 0.01 * rng.standard_normal(100)
        base = compute_momentum  # noqa: F841 (keep import surface obvious)
        from diffcast.characteristics import _rolling_std
        np.testing.assert_allclose(
            _rolling_std(r, 21), _rolling_std(r + 0.5, 21), atol=1e-12
        )

    def test_mom1m_positive_returns_positive(self):
        rng = np.random.default_rng(9)
        r = rng.uniform(0.001, 0.02, size=60)
        out = compute_momentum(r, 21)
        assert np.all(out[20:] > 0)

    def test_short_panel_errors_with_first_computable_index(self):
        panel = make_panel(0.01 * np.random.default_rng(10).standard_normal((100, 1)))
        with pytest.raises(CharacteristicsError, match="first computable"):
            compute_characteristics(panel)

    def test_zero_fill_flag(self):
        rng = np.random.default_rng(11)
        tensor = compute_characteristics(_long_panel(rng), zero_fill=True)
        assert tensor.valid_from == 0
        assert np.all(np.isfinite(tensor.values))
        assert np.all(tensor.values[:20, :, COLUMNS.index("mom1m")] == 0.0)


class TestCache:
    def test_roundtrip_and_key_mismatch(self, tmp_path):
        rng = np.random.default_rng(12)
        panel = _long_panel(rng)
        tensor = compute_characteristics(panel)
        key = cache_key(panel, "default")
        path = str(tmp_path / "chars.npz")
        save_characteristics(path, tensor, key)
        loaded = load_characteristics(path, key)
        np.testing.assert_array_equal(
            np.nan_to_num(loaded.values), np.nan_to_num(tensor.values)
        )
        assert loaded.valid_from == tensor.valid_from
        assert loaded.columns == COLUMNS
        with pytest.raises(CharacteristicsError, match="key mismatch"):
            load_characteristics(path, cache_key(panel, "other"))

    def test_key_depends_on_data(self):
        rng = np.random.default_rng(13)
        p1, p2 = _long_panel(rng), _long_panel(rng)
        assert cache_key(p1) != cache_key(p2)
