import numpy as np
import pytest
from scipy.stats import norm

from degenhedge.engine import resolve_grid, simulate_paths
from degenhedge.errors import IllConditioned, SchemaError
from degenhedge.hedging import (
    HedgePlan,
    RegressionSpec,
    assemble_variables,
    clark_ocone_rhs,
    export_plan_csv,
    path_extras,
    regress_conditional,
    solve_hedge,
)
from degenhedge.payoffs import Payoff


def bs_call_price(x, k, r, sigma, tau):
    d1 = (np.log(x / k) + (r + 0.5 * sigma**2) * tau) / (sigma * np.sqrt(tau))
    d2 = d1 - sigma * np.sqrt(tau)
    return x * norm.cdf(d1) - k * np.exp(-r * tau) * norm.cdf(d2)


def bs_call_delta(x, k, r, sigma, tau):
    d1 = (np.log(x / k) + (r + 0.5 * sigma**2) * tau) / (sigma * np.sqrt(tau))
    return norm.cdf(d1)


class TestRegressionSpec:
    def test_validation(self):
        with pytest.raises(SchemaError):
            RegressionSpec(basis="fourier")
        with pytest.raises(SchemaError):
            RegressionSpec(degree=0)
        with pytest.raises(SchemaError):
            RegressionSpec(degree=7)
        with pytest.raises(SchemaError):
            RegressionSpec(ridge=-1.0)


class TestRegressConditional:
    def test_constant_samples(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((200, 1))
        fit = regress_conditional(np.full(200, 3.5), x, RegressionSpec(degree=2, ridge=0.0))
        np.testing.assert_allclose(fit.predict(x)[:, 0], 3.5, atol=1e-10)
        np.testing.assert_allclose(fit.r2, 1.0)

    def test_linear_exact(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((500, 2))
        y = 2.0 * x[:, 0] - 3.0 * x[:, 1] + 1.0
        fit = regress_conditional(y, x, RegressionSpec(degree=3, ridge=0.0))
        np.testing.assert_allclose(fit.predict(x)[:, 0], y, atol=1e-9)
        np.testing.assert_allclose(fit.r2, 1.0, atol=1e-12)

    def test_multi_output(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((400, 1))
        y = np.column_stack([x[:, 0] ** 2, -x[:, 0]])
        fit = regress_conditional(y, x, RegressionSpec(degree=2, ridge=0.0))
        np.testing.assert_allclose(fit.predict(x), y, atol=1e-9)

    def test_zero_time_degenerates_to_mean(self):
        # constant regressors at t = 0: the fit is the sample mean
        rng = np.random.default_rng(3)
        y = rng.standard_normal(300)
        x = np.full((300, 1), 100.0)
        fit = regress_conditional(y, x, RegressionSpec(degree=4, ridge=0.0))
        np.testing.assert_allclose(fit.predict(x)[:, 0], y.mean(), atol=1e-12)

    def test_precondition_on_sample_count(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((30, 2))
        with pytest.raises(ValueError, match="samples"):
            regress_conditional(x[:, 0], x, RegressionSpec(degree=4, ridge=0.0))

    def test_ill_conditioned_raises(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal(2000)
        x = np.column_stack([a, a * (1 + 1e-14)])  # duplicate variable
        with pytest.raises(IllConditioned):
            regress_conditional(a, x, RegressionSpec(degree=2, ridge=0.0))

    def test_ridge_shrinks_noise_coefficients(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((400, 1))
        y = rng.standard_normal(400)  # pure noise
        loose = regress_conditional(y, x, RegressionSpec(degree=5, ridge=0.0))
        tight = regress_conditional(y, x, RegressionSpec(degree=5, ridge=10.0))
        assert np.abs(tight.beta[1:]).sum() < np.abs(loose.beta[1:]).sum()
        # intercept unpenalized: still tracks the sample mean
        np.testing.assert_allclose(tight.beta[0, 0], y.mean(), atol=1e-6)


class TestVariables:
    def test_payoff_aware_adds_indicator(self):
        states = np.array([[105.0], [95.0]])
        p = Payoff("european_call", 100.0, (0,))
        variables, caps = assemble_variables(p, RegressionSpec(degree=3), states)
        np.testing.assert_allclose(variables[:, 1], [1.0, 0.0])
        assert caps == (3, 1)

    def test_asian_running_average_feature(self, rank1_model):
        grid = resolve_grid(rank1_model, 4)
        b = simulate_paths(rank1_model, grid, 8, seed=0)
        p = Payoff("asian_floating_call", 1.0, (0, 1))
        extras = path_extras(p, b)
        # left-Riemann running average at the final time equals the payoff average
        avg = np.sum(b.states[:, :-1, 0] * grid.dts[None, :], axis=1) / 1.0
        np.testing.assert_allclose(extras["running_avg"][:, -1], avg, rtol=1e-12)
        # at t=0 the average defaults to the spot
        np.testing.assert_allclose(extras["running_avg"][:, 0], b.states[:, 0, 0])
        extras_k = {n: a[:, 2] for n, a in extras.items()}
        variables, caps = assemble_variables(p, RegressionSpec(degree=2), b.states[:, 2, :], extras_k)
        assert variables.shape[1] == 4  # two states, running avg, indicator
        assert caps == (2, 2, 2, 1)

    def test_lookback_running_max_feature(self, rank1_model):
        grid = resolve_grid(rank1_model, 4)
        b = simulate_paths(rank1_model, grid, 8, seed=1)
        p = Payoff("lookback_floating", 1.0, (0, 1))
        extras = path_extras(p, b)
        np.testing.assert_allclose(
            extras["running_max"][:, -1], np.max(b.states[:, :, 0], axis=1)
        )
        assert np.all(np.diff(extras["running_max"], axis=1) >= 0)


class TestClarkOconeRhs:
    def test_terminal_time_identity(self, bs_model):
        # at t = T the integrand is 1{S_T > K} sigma S_T with no discount
        grid = resolve_grid(bs_model, 8)
        b = simulate_paths(bs_model, grid, 256, seed=7)
        p = Payoff("european_call", 100.0, (0,))
        samples = clark_ocone_rhs(bs_model, p, b, grid.n_steps)
        s_t = b.states[:, -1, 0]
        expected = (s_t > 100.0) * 0.2 * s_t
        np.testing.assert_allclose(samples.values[:, 0], expected, rtol=1e-12)
        assert samples.discount == 1.0

    def test_correction_bitwise_zero_state_independent(self, bs_model, rank1_model):
        p1 = Payoff("european_call", 100.0, (0,))
        p2 = Payoff("exchange", 0.0, (0, 1))
        for model, payoff in ((bs_model, p1), (rank1_model, p2)):
            grid = resolve_grid(model, 4)
            b = simulate_paths(model, grid, 64, seed=8)
            samples = clark_ocone_rhs(model, payoff, b, 2)
            assert not samples.correction.any()  # exact zeros, no roundoff

    def test_unconditional_mean_is_discounted_delta_leg(self, bs_model):
        # E_Q[1{S_T>K} e^{-rT} sigma S_T] = sigma K e^{-rT} E[(S_T/K) 1{.}]
        # sanity: positive and below sigma * x0 for an ATM call
        grid = resolve_grid(bs_model, 16)
        b = simulate_paths(bs_model, grid, 20000, seed=9)
        p = Payoff("european_call", 100.0, (0,))
        samples = clark_ocone_rhs(bs_model, p, b, 0)
        mean = samples.values[:, 0].mean()
        # exact continuous-time value: sigma * x0 * Phi(d1)
        target = 0.2 * 100.0 * bs_call_delta(100.0, 100.0, 0.03, 0.2, 1.0)
        se = samples.values[:, 0].std(ddof=1) / np.sqrt(b.n_paths)
        assert abs(mean - target) < 4 * se + 0.05  # Euler bias allowance

    def test_requires_q_bundle(self, bs_model):
        grid = resolve_grid(bs_model, 4)
        b = simulate_paths(bs_model, grid, 32, seed=10, measure="P")
        with pytest.raises(ValueError):
            clark_ocone_rhs(bs_model, Payoff("european_call", 100.0, (0,)), b, 0)


class TestSolveHedge:
    def test_zero_strike_call_replicates_asset(self, bs_model):
        # G = S_T: price is x0 exactly (Euler drift compounding aside)
        # and the hedge is one unit of the asset at every time
        grid = resolve_grid(bs_model, 8)
        b = simulate_paths(bs_model, grid, 20000, seed=11)
        p = Payoff("european_call", 0.0, (0,))
        plan = solve_hedge(bs_model, p, b, RegressionSpec(degree=2, ridge=0.0))
        assert abs(plan.v0 - 100.0) < 3 * plan.v0_se + 0.05
        states = np.array([[80.0], [100.0], [125.0]])
        theta = plan.theta_at(bs_model, 4, states)
        np.testing.assert_allclose(theta[:, 0], 1.0, atol=2e-2)

    def test_bs_delta_mid_horizon(self, bs_model):
        grid = resolve_grid(bs_model, 16)
        b = simulate_paths(bs_model, grid, 40000, seed=12)
        p = Payoff("european_call", 100.0, (0,))
        plan = solve_hedge(
            bs_model, p, b, RegressionSpec(degree=4, ridge=1e-8), hedge_times=[0, 8]
        )
        states = np.array([[90.0], [100.0], [110.0]])
        theta = plan.theta_at(bs_model, 8, states)
        target = bs_call_delta(states[:, 0], 100.0, 0.03, 0.2, 0.5)
        np.testing.assert_allclose(theta[:, 0], target, atol=2e-2)
        # t = 0 fit degenerates to the unconditional mean = delta at x0
        theta0 = plan.theta_at(bs_model, 0, np.array([[100.0]]))
        np.testing.assert_allclose(
            theta0[0, 0], bs_call_delta(100.0, 100.0, 0.03, 0.2, 1.0), atol=2e-2
        )
        assert abs(plan.v0 - bs_call_price(100.0, 100.0, 0.03, 0.2, 1.0)) < 3 * plan.v0_se + 0.05

    def test_embedding_second_component_zero(self, embedding_model):
        # the degenerate component carries no hedge: theta_2 = 0 by the
        # minimal-norm solve on the rank-one volatility
        grid = resolve_grid(embedding_model, 8)
        b = simulate_paths(embedding_model, grid, 20000, seed=13)
        p = Payoff("european_call", 100.0, (0,))
        plan = solve_hedge(embedding_model, p, b, RegressionSpec(degree=3, ridge=0.0), hedge_times=[0, 4])
        states = b.states[:100, 4, :]
        theta = plan.theta_at(embedding_model, 4, states)
        np.testing.assert_allclose(theta[:, 1], 0.0, atol=1e-12)
        assert np.abs(theta[:, 0]).max() > 0.1

    def test_hedge_times_subset_and_fit_at(self, bs_model):
        grid = resolve_grid(bs_model, 8)
        b = simulate_paths(bs_model, grid, 2000, seed=14)
        p = Payoff("european_call", 100.0, (0,))
        plan = solve_hedge(bs_model, p, b, RegressionSpec(degree=2), hedge_times=[0, 4, 8])
        assert list(plan.hedge_times) == [0, 4, 8]
        plan.fit_at(4)
        with pytest.raises(KeyError):
            plan.fit_at(3)
        with pytest.raises(ValueError):
            solve_hedge(bs_model, p, b, RegressionSpec(degree=2), hedge_times=[99])

    def test_diagnostics_present(self, bs_model):
        grid = resolve_grid(bs_model, 4)
        b = simulate_paths(bs_model, grid, 2000, seed=15)
        p = Payoff("european_call", 100.0, (0,))
        plan = solve_hedge(bs_model, p, b, RegressionSpec(degree=2))
        assert len(plan.diagnostics["r2"]) == 5
        assert plan.admissibility > 0.0
        assert max(plan.diagnostics["max_linear_residual"]) < 1e-8


class TestPersistence:
    def test_save_load_roundtrip(self, bs_model, tmp_path):
        grid = resolve_grid(bs_model, 4)
        b = simulate_paths(bs_model, grid, 2000, seed=16)
        p = Payoff("european_call", 100.0, (0,))
        plan = solve_hedge(bs_model, p, b, RegressionSpec(degree=3, ridge=1e-8))
        plan.save(tmp_path / "plan.json", tmp_path / "plan.npz")
        back = HedgePlan.load(tmp_path / "plan.json", tmp_path / "plan.npz")
        assert back.v0 == plan.v0
        assert back.model_hash == plan.model_hash
        states = np.array([[90.0], [105.0]])
        np.testing.assert_array_equal(
            back.theta_at(bs_model, 2, states), plan.theta_at(bs_model, 2, states)
        )
        export_plan_csv(plan, tmp_path / "plan.csv")
        header = (tmp_path / "plan.csv").read_text().splitlines()[0]
        assert header.startswith("time,X_1,theta_1")
