"""Noise schedule, forward corruption, DDIM stepping, and ensembles."""

import numpy as np
import pytest

from diffcast.diffusion import (
    DdimPlan, NoiseSchedule, ScheduleError, StepError, chain_seed_sequence,
    ddim_sigma, ddim_step, forward_diffuse, generate_ensemble,
    make_ddim_plan, make_linear_schedule, sample_chain,
)


def custom_schedule(betas):
    betas = np.asarray(betas, dtype=np.float64)
    alpha = 1.0 - betas
    return NoiseSchedule(beta=betas, alpha=alpha, alpha_bar=np.cumprod(alpha))


class TestLinearSchedule:
    def test_single_step(self):
        sched = make_linear_schedule(1, 0.5, 0.5)
        np.testing.assert_array_equal(sched.alpha_bar, [0.5])

    def test_paper_default_endpoints(self):
        sched = make_linear_schedule(1000, 1e-4, 0.02)
        assert sched.beta[0] == 1e-4
        assert sched.beta[-1] == 0.02
        assert sched.abar(1000) < 1e-4  # near-total corruption

    def test_two_step_product(self):
        # [DERIVED: 0.9, 0.9 * 0.7]
        sched = make_linear_schedule(2, 0.1, 0.3)
        np.testing.assert_allclose(sched.alpha_bar, [0.9, 0.63], atol=1e-15)

    def test_alpha_bar_strictly_decreasing(self):
        sched = make_linear_schedule(500, 1e-4, 0.02)
        assert np.all(np.diff(sched.alpha_bar) < 0)
        assert sched.abar(0) == 1.0

    def test_bounds(self):
        with pytest.raises(ScheduleError):
            make_linear_schedule(0, 0.1, 0.2)
        with pytest.raises(ScheduleError):
            make_linear_schedule(10, 0.0, 0.2)
        with pytest.raises(ScheduleError):
            make_linear_schedule(10, 0.3, 0.2)
        with pytest.raises(StepError):
            make_linear_schedule(10, 0.1, 0.2).abar(11)


class TestForwardDiffuse:
    def test_zero_everything(self):
        sched = make_linear_schedule(10, 0.1, 0.2)
        np.testing.assert_array_equal(
            forward_diffuse(np.zeros(3), 5, np.zeros(3), sched), 0.0
        )

    def test_noiseless_scaling(self):
        sched = make_linear_schedule(10, 0.1, 0.2)
        x0 = np.array([1.0, -2.0])
        out = forward_diffuse(x0, 7, np.zeros(2), sched)
        np.testing.assert_allclose(out, np.sqrt(sched.abar(7)) * x0, atol=1e-15)

    def test_plug_in_arithmetic(self):
        # [DERIVED: abar = 0.8 * 0.8 = 0.64 -> (0.8, 0.6)]
        sched = custom_schedule([0.2, 0.2])
        out = forward_diffuse(np.array([1.0, 0.0]), 2, np.array([0.0, 1.0]), sched)
        np.testing.assert_allclose(out, [0.8, 0.6], atol=1e-15)

    def test_step_errors(self):
        sched = make_linear_schedule(10, 0.1, 0.2)
        with pytest.raises(StepError):
            forward_diffuse(np.zeros(2), 0, np.zeros(2), sched)
        with pytest.raises(StepError):
            forward_diffuse(np.zeros(2), 5, np.zeros(3), sched)


class TestDdimSigma:
    def test_eta_zero(self):
        sched = make_linear_schedule(10, 0.1, 0.2)
        assert ddim_sigma(sched, 7, 3, 0.0) == 0.0

    def test_terminal_step_zero_for_any_eta(self):
        sched = make_linear_schedule(10, 0.1, 0.2)
        assert ddim_sigma(sched, 4, 0, 1.0) == 0.0

    def test_plug_in_arithmetic(self):
        # [DERIVED: abar = (0.5, 0.25) -> sigma = sqrt(1/3) at eta=1]
        sched = custom_schedule([0.5, 0.5])
        assert ddim_sigma(sched, 2, 1, 1.0) == pytest.approx(np.sqrt(1 / 3), abs=1e-15)

    def test_monotone_in_eta(self):
        sched = make_linear_schedule(100, 1e-4, 0.02)
        etas = np.linspace(0, 1, 11)
        sigmas = [ddim_sigma(sched, 80, 40, e) for e in etas]
        assert np.all(np.diff(sigmas) > 0)

    def test_order_precondition(self):
        sched = make_linear_schedule(10, 0.1, 0.2)
        with pytest.raises(StepError):
            ddim_sigma(sched, 3, 3, 0.5)


class TestDdimStep:
    def test_exact_inversion_to_zero(self):
        # Exact-eps round trip over random (x0, tau) pairs.
        sched = make_linear_schedule(1000, 1e-4, 0.02)
        plan = DdimPlan(steps=(1000, 0), eta=0.0)
        rng = np.random.default_rng(0)
        for _ in range(100):
            x0 = rng.standard_normal(4)
            tau = int(rng.integers(1, 1001))
            eps = rng.standard_normal(4)
            x_tau = forward_diffuse(x0, tau, eps, sched)
            out = ddim_step(x_tau, eps, tau, 0, plan, sched)
            np.testing.assert_allclose(out, x0, atol=1e-10)

    def test_zero_noise_trajectory(self):
        sched = make_linear_schedule(100, 1e-3, 0.02)
        plan = DdimPlan(steps=(60, 30, 0), eta=0.0)
        x0 = np.array([0.5, -1.5])
        x_tau = np.sqrt(sched.abar(60)) * x0
        out = ddim_step(x_tau, np.zeros(2), 60, 30, plan, sched)
        np.testing.assert_allclose(out, np.sqrt(sched.abar(30)) * x0, atol=1e-12)

    def test_eta_one_matches_ddpm_posterior(self):
        # [DERIVED: Monte Carlo vs closed-form DDPM posterior q(x_{T-1}|x_T, x0)]
        sched = make_linear_schedule(50, 1e-3, 0.05)
        plan = DdimPlan(steps=(50, 49, 0), eta=1.0)
        rng = np.random.default_rng(1)
        x0 = np.array([0.7])
        eps = rng.standard_normal(1)
        x_tau = forward_diffuse(x0, 50, eps, sched)
        draws = np.array([
            ddim_step(x_tau, eps, 50, 49, plan, sched,
                      eps_prime=rng.standard_normal(1))[0]
            for _ in range(100_000)
        ])
        ab_t, ab_p, beta_t = sched.abar(50), sched.abar(49), sched.beta[49]
        alpha_t = 1.0 - beta_t
        post_mean = (
            np.sqrt(ab_p) * beta_t * x0[0]
            + np.sqrt(alpha_t) * (1 - ab_p) * x_tau[0]
        ) / (1 - ab_t)
        post_var = (1 - ab_p) / (1 - ab_t) * beta_t
        assert draws.mean() == pytest.approx(post_mean, abs=0.01 * abs(post_mean) + 1e-4)
        assert draws.var() == pytest.approx(post_var, rel=0.01)

    def test_requires_eps_prime_when_stochastic(self):
        sched = make_linear_schedule(10, 0.1, 0.2)
        plan = DdimPlan(steps=(8, 4, 0), eta=1.0)
        with pytest.raises(StepError, match="eps_prime"):
            ddim_step(np.zeros(2), np.zeros(2), 8, 4, plan, sched)


class TestDdimPlan:
    def test_even_spacing_with_endpoints(self):
        sched = make_linear_schedule(100, 1e-3, 0.02)
        plan = make_ddim_plan(sched, 10)
        assert plan.steps == (100, 90, 80, 70, 60, 50, 40, 30, 20, 10, 0)

    def test_default_count_on_paper_schedule(self):
        sched = make_linear_schedule(1000, 1e-4, 0.02)
        plan = make_ddim_plan(sched, 50)
        assert plan.steps[0] == 1000 and plan.steps[-1] == 0
        assert len(plan.steps) == 51
        assert all(a > b for a, b in zip(plan.steps, plan.steps[1:]))

    def test_plan_validation(self):
        with pytest.raises(ScheduleError):
            DdimPlan(steps=(10, 5), eta=0.0)        # must end at 0
        with pytest.raises(ScheduleError):
            DdimPlan(steps=(5, 10, 0), eta=0.0)     # must decrease
        with pytest.raises(ScheduleError):
            DdimPlan(steps=(10, 0), eta=1.5)


class TestGenerateEnsemble:
    sched = make_linear_schedule(100, 1e-3, 0.02)

    @staticmethod
    def contractive_eps(x, tau):
        # Deterministic pseudo-denoiser with some tau dependence.
        return np.tanh(x) * (0.5 + tau / 200.0)

    def test_rerun_is_bitwise_identical(self):
        plan = make_ddim_plan(self.sched, 10)
        a = generate_ensemble(self.contractive_eps, 3, plan, self.sched, 1, seed=5)
        b = generate_ensemble(self.contractive_eps, 3, plan, self.sched, 1, seed=5)
        np.testing.assert_array_equal(a, b)

    def test_first_samples_identical_across_K(self):
        # [DERIVED: per-chain seed-splitting contract]
        plan = make_ddim_plan(self.sched, 10, eta=0.0)
        small = generate_ensemble(self.contractive_eps, 3, plan, self.sched, 3, seed=5)
        large = generate_ensemble(self.contractive_eps, 3, plan, self.sched, 8, seed=5)
        np.testing.assert_array_equal(small, large[:3])

    def test_cross_K_contract_holds_with_stochastic_eta(self):
        plan = make_ddim_plan(self.sched, 10, eta=0.8)
        small = generate_ensemble(self.contractive_eps, 2, plan, self.sched, 2, seed=9)
        large = generate_ensemble(self.contractive_eps, 2, plan, self.sched, 6, seed=9)
        np.testing.assert_array_equal(small, large[:2])

    def test_zero_denoiser_analytic_recursion(self):
        # [DERIVED: with eps_hat = 0 each step scales by sqrt(abar'/abar),
        # so the chain ends at x_T / sqrt(abar_T)]
        plan = make_ddim_plan(self.sched, 10, eta=0.0)
        out = generate_ensemble(lambda x, tau: np.zeros_like(x), 4,
                                plan, self.sched, 2, seed=3)
        x_init = np.stack([
            np.random.Generator(np.random.Philox(chain_seed_sequence(3, k)))
            .standard_normal(4)
            for k in range(2)
        ])
        np.testing.assert_allclose(
            out, x_init / np.sqrt(self.sched.abar(100)), atol=1e-12
        )

    def test_matches_single_chain_sampler(self):
        plan = make_ddim_plan(self.sched, 10, eta=0.0)
        ens = generate_ensemble(self.contractive_eps, 3, plan, self.sched, 4, seed=11)
        for k in range(4):
            rng = np.random.Generator(np.random.Philox(chain_seed_sequence(11, k)))
            single = sample_chain(
                lambda x, tau: self.contractive_eps(x[None], tau)[0],
                3, plan, self.sched, rng,
            )
            np.testing.assert_allclose(ens[k], single, atol=1e-12)

    def test_chunking_changes_nothing_material(self):
        plan = make_ddim_plan(self.sched, 10, eta=0.0)
        per_chain = generate_ensemble(self.contractive_eps, 3, plan, self.sched,
                                      5, seed=7, chunk=1)
        batched = generate_ensemble(self.contractive_eps, 3, plan, self.sched,
                                    5, seed=7, chunk=0)
        np.testing.assert_allclose(batched, per_chain, atol=1e-12)

    def test_k_validation(self):
        plan = make_ddim_plan(self.sched, 10)
        with pytest.raises(StepError):
            generate_ensemble(self.contractive_eps, 3, plan, self.sched, 0, seed=0)


class TestSeeding:
    def test_chain_substreams_are_distinct(self):
        states = {
            tuple(chain_seed_sequence(42, k).generate_state(2)) for k in range(100)
        }
        assert len(states) == 100

    def test_independent_of_order(self):
        a = chain_seed_sequence(1, 7).generate_state(4)
        b = chain_seed_sequence(1, 7).generate_state(4)
        np.testing.assert_array_equal(a, b)
