import numpy as np
import pytest

from tilq import (MVPolicy, SimConfig, TimeGrid, assemble_policy, det_ansatz,
                  det_premium_policy, equilibrium_ratio, estimate_cost,
                  feedback_coeffs, hessian_weight, lambda_pathwise_at_t,
                  lambda_residual, make_dynamics, simulate_state,
                  solve_riccati, spike_control)
from tilq.simulate import (LQPredictor, MVPredictor, draw_increments,
                           expansion_check, probe_directions, stream)

from conftest import lq_spec, lq_verify_spec, mv_market, mv_verify_market


def constant_mv_policy(grid, u, d=1):
    m = grid.steps + 1
    return MVPolicy(grid=grid, alpha=np.zeros((m, d)),
                    beta=np.full((m, d), u), mode="deterministic")


class TestSimulateState:
    def test_no_dynamics(self, grid100):
        market = mv_market(grid100, theta=0.0, mu1=0.0, mu2=0.0, r=0.0, x0=1.0)
        cfg = SimConfig(num_paths=200, seed=1, antithetic=False)
        pol = constant_mv_policy(grid100, 0.0)
        b = simulate_state(market, pol, cfg)
        assert np.all(b.states == 1.0)

    def test_exponential_drift_exact(self, grid100):
        spec = lq_spec(grid100, A=0.1, B=[0.0], C=[0.0], D=[[0.0]], b=0.0,
                       sigma=[0.0], Q=0.0, R=[[1.0]], mu1=0.0, x0=1.0)
        pol = feedback_coeffs(spec, solve_riccati(spec))  # alpha = beta = 0
        cfg = SimConfig(num_paths=64, seed=2, antithetic=False)
        b = simulate_state(spec, pol, cfg)
        assert np.abs(b.states[:, -1] - np.exp(0.1)).max() < 1e-13

    def test_restart_at_interior_node(self, grid100):
        market = mv_verify_market(grid100)
        pol = det_premium_policy(market)
        cfg = SimConfig(num_paths=128, seed=3, antithetic=False)
        b = simulate_state(market, pol, cfg, start=40, x_init=2.5)
        assert b.start == 40
        assert b.states.shape == (128, 61)
        assert np.all(b.states[:, 0] == 2.5)

    def test_blowup_detected(self, grid100):
        spec = lq_spec(grid100, A=0.0, B=[0.0], C=[0.0], D=[[0.0]],
                       Q=0.0, R=[[1.0]], mu1=0.0)
        m = grid100.steps + 1
        from tilq.riccati import EquilibriumPolicy
        from tilq.errors import NumericalError

        crazy = EquilibriumPolicy(grid=grid100,
                                  alpha=np.full((m, 1), 1e4),
                                  beta=np.zeros((m, 1)))
        spec2 = lq_spec(grid100, A=0.0, B=[1e4], C=[0.0], D=[[0.0]],
                        Q=0.0, R=[[1.0]], mu1=0.0)
        cfg = SimConfig(num_paths=101, seed=4, antithetic=False)
        with pytest.raises(NumericalError):
            simulate_state(spec2, crazy, cfg)


class TestEstimateCost:
    def test_deterministic_exact(self, grid100):
        # sigma = D = 0, A = 0, u = 0, Q = 0, G = h = 1, mu1 = 0, mu2 = 1,
        # x0 = 1: J = 1/2 - 1/2 - 1 = -1 with zero Monte Carlo variance
        spec = lq_spec(grid100, A=0.0, B=[0.0], C=[0.0], D=[[0.0]], b=0.0,
                       sigma=[0.0], Q=0.0, R=[[1.0]], G=1.0, h=1.0,
                       mu1=0.0, mu2=1.0, x0=1.0)
        pol = feedback_coeffs(spec, solve_riccati(spec))
        cfg = SimConfig(num_paths=256, seed=5, antithetic=False)
        b = simulate_state(spec, pol, cfg)
        est = estimate_cost(b, spec, 0.0)
        assert est.value == pytest.approx(-1.0, abs=1e-12)
        assert est.ci == 0.0

    def test_mv_no_trading(self, grid100):
        market = mv_market(grid100, theta=0.0, mu1=1.0, mu2=0.0, r=0.0, x0=1.0)
        pol = constant_mv_policy(grid100, 0.0)
        cfg = SimConfig(num_paths=200, seed=6, antithetic=False)
        est = estimate_cost(simulate_state(market, pol, cfg), market)
        assert est.value == pytest.approx(-1.0, abs=1e-12)

    def test_mv_constant_control_gaussian(self, grid100):
        # X_T = x0 + u W_T: J = 0.5 u^2 T = 0.045 for u = 0.3
        market = mv_market(grid100, theta=0.0, mu1=0.0, mu2=0.0, r=0.0, x0=1.0)
        pol = constant_mv_policy(grid100, 0.3)
        cfg = SimConfig(num_paths=20000, seed=7, antithetic=False)
        est = estimate_cost(simulate_state(market, pol, cfg), market)
        assert abs(est.value - 0.045) <= 3.0 * est.ci

    def test_too_few_paths_rejected(self, grid100):
        market = mv_market(grid100)
        pol = constant_mv_policy(grid100, 0.0)
        cfg = SimConfig(num_paths=50, seed=8, antithetic=False)
        b = simulate_state(market, pol, cfg)
        with pytest.raises(ValueError):
            estimate_cost(b, market)


class TestSpikeControl:
    def test_zero_direction_bitwise(self, grid100):
        market = mv_verify_market(grid100)
        pol = det_premium_policy(market)
        cfg = SimConfig(num_paths=128, seed=9, antithetic=False)
        base = simulate_state(market, pol, cfg, stream_ids=(5,))
        spiked = simulate_state(market, spike_control(pol, 0.2, 0.1, [0.0]),
                                cfg, stream_ids=(5,))
        assert np.array_equal(base.states, spiked.states)
        assert np.array_equal(base.controls, spiked.controls)

    def test_disjoint_spikes_commute(self, grid100):
        market = mv_verify_market(grid100)
        pol = det_premium_policy(market)
        cfg = SimConfig(num_paths=64, seed=10, antithetic=False)
        p12 = spike_control(spike_control(pol, 0.1, 0.1, [0.4]), 0.5, 0.1, [-0.2])
        p21 = spike_control(spike_control(pol, 0.5, 0.1, [-0.2]), 0.1, 0.1, [0.4])
        b12 = simulate_state(market, p12, cfg, stream_ids=(6,))
        b21 = simulate_state(market, p21, cfg, stream_ids=(6,))
        assert np.array_equal(b12.states, b21.states)

    def test_window_past_horizon_rejected(self, grid100):
        pol = det_premium_policy(mv_verify_market(grid100))
        with pytest.raises(ValueError):
            spike_control(pol, 0.95, 0.1, [1.0])

    def test_epsilon_continuity_bound(self):
        # |dJ| <= 10 eps (|<Lambda,v>| + |H| |v|^2) at eps = 1e-4 with CRN;
        # at the solved equilibrium the first-order term vanishes.
        grid = TimeGrid.uniform(1.0, 10000)
        spec = lq_verify_spec(grid)
        sol = solve_riccati(spec)
        pol = feedback_coeffs(spec, sol)
        cfg = SimConfig(num_paths=2000, seed=11, antithetic=True)
        base = simulate_state(spec, pol, cfg, stream_ids=(7,))
        spk = simulate_state(spec, spike_control(pol, 0.5, 1e-4, [1.0]),
                             cfg, stream_ids=(7,))
        dj = estimate_cost(spk, spec).value - estimate_cost(base, spec).value
        H = float(hessian_weight(spec, 0.5)[0, 0])
        assert abs(dj) <= 10.0 * 1e-4 * H


class TestIncrements:
    def test_antithetic_pairing(self):
        rng = stream(42, 1)
        dW = draw_increments(rng, 64, np.full(10, 0.1), 2, True)
        assert np.array_equal(dW[:32], -dW[32:])

    def test_antithetic_variance_reduction(self, grid100):
        # terminal-mean estimator variance ratio <= 0.75 on the linear term
        market = mv_verify_market(grid100)
        pol = det_premium_policy(market)
        means = {True: [], False: []}
        for anti in (True, False):
            for k in range(40):
                cfg = SimConfig(num_paths=512, seed=1000 + k, antithetic=anti)
                b = simulate_state(market, pol, cfg, stream_ids=(8, k))
                means[anti].append(b.states[:, -1].mean())
        v_anti = np.var(means[True], ddof=1)
        v_plain = np.var(means[False], ddof=1)
        assert v_anti / v_plain <= 0.75

    def test_weak_convergence_in_steps(self):
        market_fine = mv_verify_market(TimeGrid.uniform(1.0, 200))
        market_coarse = mv_verify_market(TimeGrid.uniform(1.0, 100))
        out = {}
        for market in (market_coarse, market_fine):
            pol = det_premium_policy(market)
            cfg = SimConfig(num_paths=40000, seed=12, antithetic=True)
            b = simulate_state(market, pol, cfg, stream_ids=(9,))
            xt = b.states[:, -1]
            out[market.grid.steps] = (xt.mean(),
                                      xt.std(ddof=1) / np.sqrt(xt.size))
        gap = abs(out[100][0] - out[200][0])
        assert gap <= 3.0 * (out[100][1] + out[200][1])


class TestEquilibriumRatio:
    def test_zero_direction_exact_zero(self, grid100):
        from tilq.simulate import _conditional_runs

        market = mv_verify_market(grid100)
        pol = det_premium_policy(market)
        cfg = SimConfig(num_paths=512, inner_paths=512, seed=13, antithetic=True)
        dyn = make_dynamics(market)
        rows, _ = _conditional_runs(dyn, pol, cfg, 0, market.x0, None,
                                    [("0", np.zeros(1))], [0.1])
        row, phis = rows[(0, 0)]
        assert row.delta_j == 0.0
        assert row.delta_ci == 0.0
        assert np.all(phis == 0.0)

    def test_equilibrium_passes_small_budget(self, grid100):
        market = mv_market(grid100, theta=0.2, mu1=1.0, mu2=0.0, r=0.0)
        pol = det_premium_policy(market)
        cfg = SimConfig(num_paths=6000, inner_paths=6000, seed=14,
                        antithetic=True)
        rep = equilibrium_ratio(pol, cfg, market,
                                predictor=MVPredictor(market, pol))
        assert rep.overall == "pass"
        assert all(p.extrapolated >= -3 * p.extrapolated_ci for p in rep.probes)

    def test_detuned_fails(self, grid100):
        spec = lq_verify_spec(grid100)
        sol = solve_riccati(spec)
        pol = feedback_coeffs(spec, sol)
        cfg = SimConfig(num_paths=8000, inner_paths=8000, seed=15,
                        antithetic=True, probe_times=(0.75,))
        rep = equilibrium_ratio(pol.detuned(1.5), cfg, spec,
                                predictor=LQPredictor(spec, sol, pol))
        assert rep.overall == "fail"
        assert any(p.verdict == "fail" for p in rep.probes)

    def test_report_reproducible(self, grid100):
        market = mv_verify_market(grid100)
        pol = det_premium_policy(market)
        cfg = SimConfig(num_paths=2000, inner_paths=2000, seed=16,
                        antithetic=True, probe_times=(0.0, 0.5))
        pred = MVPredictor(market, pol)
        r1 = equilibrium_ratio(pol, cfg, market, predictor=pred)
        r2 = equilibrium_ratio(pol, cfg, market, predictor=pred)
        assert r1.csv_rows() == r2.csv_rows()

    def test_probe_directions_default(self):
        dirs = probe_directions(1, 2.0)
        labels = [d[0] for d in dirs]
        assert labels == ["+e1", "-e1", "+x*e1", "-x*e1"]
        dirs0 = probe_directions(2, 0.0)
        assert len(dirs0) == 4  # scaled probes dropped at x = 0


class TestExpansion:
    def test_equilibrium_expansion(self, grid100):
        spec = lq_verify_spec(grid100)
        sol = solve_riccati(spec)
        pol = feedback_coeffs(spec, sol)
        pred = LQPredictor(spec, sol, pol)
        cfg = SimConfig(num_paths=20000, inner_paths=20000, seed=17,
                        antithetic=True, epsilons=(0.2, 0.1, 0.05))
        rep = expansion_check(pol, cfg, spec, pred, probe_times=(0.0,))
        assert rep.ok
        for p in rep.probes:
            assert p.predicted_first == pytest.approx(0.0, abs=1e-10)
            assert p.predicted_second > 0

    def test_d_zero_slope_is_half_r(self, grid100):
        # with D = 0 the quadratic response weight is R itself
        spec = lq_spec(grid100, A=0.0, B=[0.4], C=[0.0], D=[[0.0]], b=0.0,
                       sigma=[0.1], Q=0.3, R=[[0.8]], G=1.5, h=1.0,
                       mu1=0.5, mu2=0.0)
        H = hessian_weight(spec, 0.3)
        assert H[0, 0] == pytest.approx(0.8, abs=1e-13)


class TestLambdaResidual:
    def test_zero_at_t_and_zero_B(self, grid100):
        spec = lq_spec(grid100, B=[0.0], mu2=0.2, b=0.1, sigma=[0.2])
        sol = solve_riccati(spec)
        pol = feedback_coeffs(spec, sol)
        cfg = SimConfig(num_paths=500, seed=18, antithetic=False)
        b = simulate_state(spec, pol, cfg, start=30, x_init=1.2,
                           stream_ids=(10,))
        res = lambda_residual(spec, sol, b, grid100.nodes[30])
        assert res[0] == 0.0
        assert np.all(res == 0.0)  # B = 0 kills the whole expression
        assert lambda_pathwise_at_t(spec, sol, b) == 0.0

    def test_pathwise_zero_at_t_general(self, grid100):
        spec = lq_verify_spec(grid100)
        sol = solve_riccati(spec)
        pol = feedback_coeffs(spec, sol)
        cfg = SimConfig(num_paths=400, seed=19, antithetic=False)
        b = simulate_state(spec, pol, cfg, start=25, x_init=2.2,
                           stream_ids=(11,))
        assert lambda_pathwise_at_t(spec, sol, b) <= 1e-12
        res = lambda_residual(spec, sol, b, 0.25)
        assert res[0] <= 1e-12
        assert res[1] > 0  # non-trivial one step later
