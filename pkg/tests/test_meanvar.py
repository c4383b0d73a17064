import numpy as np
import pytest

from tilq import (CoefficientPath, assemble_policy, det_ansatz, det_premium_M,
                  det_premium_policy, gamma_path, wealth_representation)
from tilq.errors import AssumptionError
from tilq.integrate import CumInt
from tilq.meanvar import gamma1_path
from tilq.simulate import SimConfig, make_dynamics, simulate_state

from conftest import mv_market, ou_market


class TestDetPremiumM:
    def test_flat_rate_example(self, grid100):
        # oracle: quadrature of e^{2*0}(1 + 1 * int 0.04) = 1.04
        M = det_premium_M(mv_market(grid100, theta=0.2, mu1=1.0))
        assert M[0] == pytest.approx(1.04, abs=1e-12)
        assert M[-1] == 1.0

    def test_mu1_zero_collapses(self, grid100):
        M = det_premium_M(mv_market(grid100, theta=0.7, mu1=0.0))
        assert np.allclose(M, 1.0, atol=1e-13)

    def test_pure_discount(self, grid100):
        M = det_premium_M(mv_market(grid100, theta=0.2, mu1=0.0, r=0.05))
        assert M[0] == pytest.approx(1.1051709180756477, abs=1e-12)

    def test_matches_backward_ode(self, grid100):
        # independent route: RK4 on dM/ds = -(2 r M + Gamma1 |theta|^2)
        from tilq.integrate import rk4_backward

        market = mv_market(grid100, theta=0.4, mu1=1.7, mu2=0.1, r=0.03)
        M = det_premium_M(market)
        rint = CumInt(lambda t: market.r(t), grid100)
        theta = market.premium.theta

        def rhs(t, y):
            g1 = market.mu1 * np.exp(rint(t))
            th = theta(t)
            return -(2.0 * market.r(t) * y + g1 * float(th @ th))

        ode = rk4_backward(rhs, grid100, np.array(1.0))
        assert np.abs(ode - M).max() < 1e-9


class TestDetPremiumPolicy:
    def test_mu1_zero_case(self, grid100):
        # alpha = 0 and u* = mu2 e^{-int r} theta (no feedback part)
        market = mv_market(grid100, theta=0.3, mu1=0.0, mu2=0.8, r=0.04)
        pol = det_premium_policy(market)
        assert np.abs(pol.alpha).max() <= 1e-12
        rint = CumInt(lambda t: market.r(t), grid100)
        for i in (0, 37, 100):
            t = grid100.nodes[i]
            expected = 0.8 * np.exp(-rint(t)) * market.premium.theta(t)
            assert np.abs(pol.beta[i] - expected).max() <= 1e-12

    def test_mu2_zero_case(self, grid100):
        pol = det_premium_policy(mv_market(grid100, theta=0.3, mu1=1.0, mu2=0.0))
        assert np.abs(pol.beta).max() <= 1e-12

    def test_strategy_value_example(self, grid100):
        market = mv_market(grid100, theta=0.2, mu1=1.0, mu2=0.0)
        pol = det_premium_policy(market)
        u = pol.evaluate(0, 1.0)
        assert u[0] == pytest.approx(0.2 / 1.04, abs=1e-12)


class TestGammaPath:
    def test_mu2_zero(self, grid100):
        assert np.all(gamma_path(mv_market(grid100, mu2=0.0)) == 0.0)

    def test_flat_rate(self, grid100):
        g = gamma_path(mv_market(grid100, mu2=0.5, r=0.0))
        assert np.allclose(g, -0.5, atol=1e-14)

    def test_exponent(self, grid100):
        g = gamma_path(mv_market(grid100, mu2=1.0, r=0.05))
        assert g[0] == pytest.approx(-1.0512710963760241, abs=1e-12)
        assert g[-1] == -1.0


class TestAssemblePolicy:
    def test_coincides_with_closed_form(self, grid100):
        market = mv_market(grid100, theta=0.45, mu1=1.2, mu2=0.6, r=0.03)
        a = assemble_policy(market, det_ansatz(market))
        b = det_premium_policy(market)
        assert np.abs(a.alpha - b.alpha).max() <= 1e-10
        assert np.abs(a.beta - b.beta).max() <= 1e-10

    def test_no_objective_no_trading(self, grid100):
        market = mv_market(grid100, theta=0.5, mu1=0.0, mu2=0.0)
        pol = assemble_policy(market, det_ansatz(market))
        assert np.abs(pol.alpha).max() == 0.0
        assert np.abs(pol.beta).max() == 0.0

    def test_ansatz_terminal_data(self, grid100):
        sol = det_ansatz(mv_market(grid100, theta=0.3, mu1=1.5, mu2=0.7, r=0.02))
        assert sol.M[-1] == 1.0
        assert sol.Gamma1[-1] == 1.5
        assert sol.Gamma2[-1] == -0.7
        assert sol.Gamma3[-1] == 0.0
        assert np.array_equal(sol.Gamma3, sol.Gamma2 - sol.Gamma)

    def test_gamma1_terminal(self, grid100):
        g1 = gamma1_path(mv_market(grid100, mu1=2.0, r=0.05))
        assert g1[-1] == 2.0
        assert g1[0] == pytest.approx(2.0 * np.exp(0.05), abs=1e-12)

    def test_rejects_factor_ops_on_det(self, grid100):
        market = ou_market(grid100)
        with pytest.raises(AssumptionError):
            det_premium_M(market)


class TestWealthRepresentation:
    def test_no_trading_discount_growth(self, grid100):
        market = mv_market(grid100, theta=0.2, mu1=0.0, mu2=0.0, r=0.07, x0=2.0)
        pol = assemble_policy(market, det_ansatz(market))
        rng = np.random.default_rng(3)
        dw = rng.standard_normal((5, 100, 1)) * np.sqrt(grid100.dt)[None, :, None]
        X = wealth_representation(market, pol, dw)
        rint = CumInt(lambda t: market.r(t), grid100)
        expected = 2.0 * np.exp(rint(0.0) - rint.node_values)
        assert np.abs(X - expected[None, :]).max() < 1e-12

    def test_mu2_zero_pure_exponential(self, grid100):
        # beta = 0: X_t = rho_t x0 exactly in the discretisation
        market = mv_market(grid100, theta=0.3, mu1=1.0, mu2=0.0, x0=1.5)
        pol = assemble_policy(market, det_ansatz(market))
        rng = np.random.default_rng(4)
        dw = rng.standard_normal((1, 100, 1)) * np.sqrt(grid100.dt)[None, :, None]
        X = wealth_representation(market, pol, dw[0])
        dt = grid100.dt
        theta = market.premium.theta(grid100.nodes)[:-1]
        alpha = pol.alpha[:-1]
        dwth = dw[0] + theta * dt[:, None]
        log_rho = np.cumsum(np.einsum("sj,sj->s", alpha, dwth)
                            - 0.5 * np.sum(alpha * alpha, axis=1) * dt)
        assert np.abs(X[1:] - 1.5 * np.exp(log_rho)).max() < 1e-12

    def test_euler_crosscheck(self):
        # strong-error coupling on the same increments, 1e4 steps
        from tilq.model import TimeGrid

        grid = TimeGrid.uniform(1.0, 10000)
        market = mv_market(grid, theta=0.3, mu1=1.0, mu2=0.4, r=0.02, x0=1.0)
        pol = assemble_policy(market, det_ansatz(market))
        cfg = SimConfig(num_paths=64, inner_paths=64, seed=5, antithetic=False)
        dyn = make_dynamics(market)
        bundle = simulate_state(dyn, pol, cfg, num_paths=64, stream_ids=(1,))
        X_rep = wealth_representation(market, pol, bundle.increments)
        rel = np.abs(X_rep - bundle.states).max() / np.abs(bundle.states).max()
        assert rel <= 5e-3

    def test_terminal_mean_vs_euler(self, grid100):
        market = mv_market(grid100, theta=0.25, mu1=1.0, mu2=0.3, r=0.02)
        pol = assemble_policy(market, det_ansatz(market))
        cfg = SimConfig(num_paths=4000, inner_paths=4000, seed=6, antithetic=False)
        dyn = make_dynamics(market)
        bundle = simulate_state(dyn, pol, cfg, stream_ids=(2,))
        X_rep = wealth_representation(market, pol, bundle.increments)
        diff = X_rep[:, -1] - bundle.states[:, -1]
        se = bundle.states[:, -1].std(ddof=1) / np.sqrt(bundle.num_paths)
        assert abs(diff.mean()) <= 3.0 * se
