import numpy as np
import pytest

from tilq import (CoefficientPath, ProblemSpec, TimeGrid, TruncationConfig,
                  closed_form_P, feedback_coeffs, hessian_weight, recover_MN,
                  solve_MJ, solve_MN_direct, solve_gamma1, solve_phi,
                  solve_riccati, adjoint_diagnostics)
from tilq.errors import NumericalError
from tilq.riccati import RiccatiSolution

from conftest import lq_spec


def oracle_mn_rk4(spec, steps_mult=2):
    """Independent fixed-step RK4 of the coupled (M, N) pair, written out
    from the printed system (no shared code with the solver)."""
    grid = TimeGrid.uniform(spec.grid.horizon, spec.grid.steps * steps_mult)
    nodes = grid.nodes
    T = grid.horizon

    def gamma1(t):
        # exp(int_t^T A) via dense trapezoid on a fine local grid
        ts = np.linspace(t, T, 2001)
        return spec.mu1 * np.exp(np.trapezoid(spec.A(ts), ts))

    def rhs(t, y):
        M, N = y
        B, C, D = spec.B(t), spec.C(t), spec.D(t)
        S = np.linalg.inv(spec.R(t) + M * (D.T @ D))
        dc = D.T @ C
        g1 = gamma1(t)
        bsb = B @ S @ B
        bsbdc = B @ S @ (B + dc)
        full = (B + dc) @ S @ (B + dc)
        c2 = C @ C
        mdot = (-(2 * spec.A(t) + c2 + g1 * bsbdc) * M - spec.Q(t)
                + full * M * M - bsbdc * M * N)
        ndot = -(2 * spec.A(t) + g1 * bsb) * N + bsbdc * M * N - bsb * N * N
        return np.array([mdot, ndot])

    y = np.array([spec.G, spec.h])
    out = [y]
    for i in range(grid.steps, 0, -1):
        t1, t0 = nodes[i], nodes[i - 1]
        h = t1 - t0
        k1 = rhs(t1, y)
        k2 = rhs(t1 - h / 2, y - h / 2 * k1)
        k3 = rhs(t1 - h / 2, y - h / 2 * k2)
        k4 = rhs(t0, y - h * k3)
        y = y - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(y)
    return grid, np.array(out[::-1])


class TestGamma1:
    def test_zero_exponent(self, grid100):
        g = solve_gamma1(lq_spec(grid100, A=0.0, mu1=1.0))
        assert np.all(g == 1.0)

    def test_constant_a(self, grid100):
        # oracle: mu1 e^{int A} = 2 e^{0.1}, quadrature exact for constant A
        g = solve_gamma1(lq_spec(grid100, A=0.1, mu1=2.0))
        assert g[0] == pytest.approx(2.2103418361512954, abs=1e-12)
        assert g[-1] == 2.0

    def test_piecewise_linear_a(self, grid100):
        # int_0^1 A = 0.1 exactly (trapezoid on the linear segment)
        a = CoefficientPath.piecewise([0.0, 1.0], [0.0, 0.2])
        g = solve_gamma1(lq_spec(grid100, A=a, mu1=1.0))
        assert g[0] == pytest.approx(1.1051709180756477, abs=1e-12)


class TestSolveMJ:
    def test_all_drivers_vanish(self, grid100):
        spec = lq_spec(grid100, A=0.0, B=[0.0], C=[0.0], D=[[0.0]], Q=0.0,
                       R=[[1.0]], G=2.0, h=1.0, mu1=0.0)
        M, J, rep = solve_MJ(spec)
        assert np.allclose(M, 2.0, atol=1e-12)
        assert np.allclose(J, 2.0, atol=1e-12)
        assert not any(rep["binding"].values())

    def test_decoupled_q_drift(self, grid100):
        # B = 0, C = 0: the pair reduces to dM/dt = -Q, dN/dt = 0, so
        # M(t) = 1 + (1 - t), N = 1, J = M (hand integration; RK4 oracle
        # below confirms).
        spec = lq_spec(grid100, A=0.0, B=[0.0], C=[0.0], D=[[1.0]], Q=1.0,
                       R=[[1.0]], G=1.0, h=1.0, mu1=0.0)
        M, J, _ = solve_MJ(spec)
        M, N = recover_MN(M, J, h=spec.h)
        assert M[0] == pytest.approx(2.0, abs=1e-10)
        assert np.allclose(N, 1.0, atol=1e-10)
        assert np.abs(J - (2.0 - grid100.nodes)).max() < 1e-10
        _, oracle = oracle_mn_rk4(spec)
        assert np.abs(oracle[::2, 0] - M).max() < 1e-8
        assert np.abs(oracle[::2, 1] - N).max() < 1e-8

    def test_standard_case_properties(self, grid200):
        spec = lq_spec(grid200, A=0.05, B=[0.2], C=[0.2], D=[[1.0]], Q=0.5,
                       R=[[1.0]], G=2.0, h=1.0, mu1=0.5)
        M, J, rep = solve_MJ(spec)
        assert np.all(J >= 1.0 - 1e-8)
        assert M[0] > 0
        assert not any(rep["binding"].values())
        _, oracle = oracle_mn_rk4(spec)
        M2, N2 = recover_MN(M, J)
        assert np.abs(oracle[::2, 0] - M2).max() < 1e-6
        assert np.abs(oracle[::2, 1] - N2).max() < 1e-6

    def test_singular_case(self, grid200):
        spec = lq_spec(grid200, B=[0.3], C=[0.2], D=[[1.0]], R=[[0.0]],
                       Q=1.0, mu1=0.0, G=2.0, h=1.0, A=0.0)
        M, J, rep = solve_MJ(spec)
        assert rep["case"] == "iii"
        assert np.all(M > 0) and np.all(J >= 1.0 - 1e-8)
        _, oracle = oracle_mn_rk4(spec)
        M2, N2 = recover_MN(M, J)
        assert np.abs(oracle[::2, 0] - M2).max() < 1e-6
        assert np.abs(oracle[::2, 1] - N2).max() < 1e-6

    def test_truncation_retry_loop(self, grid100):
        # Start with an absurd floor: it binds, the retry loop shrinks it,
        # and the accepted solution reports non-binding truncations.
        spec = lq_spec(grid100)
        trunc = TruncationConfig(c0=10.0, K0=1e6)
        M, J, rep = solve_MJ(spec, trunc)
        assert rep["rounds"] > 1
        assert not any(rep["binding"].values())
        M0, J0, _ = solve_MJ(spec)
        assert np.abs(M - M0).max() < 1e-9

    def test_persistently_binding_raises(self, grid100):
        spec = lq_spec(grid100)
        with pytest.raises(NumericalError, match="persistently"):
            solve_MJ(spec, TruncationConfig(c0=10.0, K0=1e6, shrink=1.0,
                                            grow=1.0, max_retries=3))


class TestRecoverMN:
    def test_pointwise_division(self):
        M = np.full(5, 2.0)
        J = np.full(5, 2.0)
        _, N = recover_MN(M, J)
        assert np.all(N == 1.0)

    def test_terminal_data(self):
        M = np.array([3.0, 2.5, 2.0])
        J = M / 1.0
        _, N = recover_MN(M, J, h=1.0)
        assert N[-1] == pytest.approx(1.0, abs=1e-12)

    def test_nonpositive_j_rejected(self):
        with pytest.raises(NumericalError):
            recover_MN(np.ones(3), np.array([1.0, 0.0, 1.0]))

    def test_terminal_mismatch_rejected(self):
        with pytest.raises(NumericalError):
            recover_MN(np.ones(3), np.ones(3), h=2.0)


def synthetic_solution(spec, M, N, Phi=None):
    grid = spec.grid
    m = grid.steps + 1
    Mv = np.full(m, M)
    Nv = np.full(m, N)
    return RiccatiSolution(grid=grid, M=Mv, N=Nv, J=Mv / Nv,
                           Gamma1=np.zeros(m),
                           Phi=np.zeros(m) if Phi is None else np.full(m, Phi),
                           case="i", trunc_c=1e-6, trunc_K=1e6,
                           binding={}, history=(), eta=float(Mv.min()))


class TestSolvePhi:
    def test_zero_forcing_zero_terminal(self, grid100):
        spec = lq_spec(grid100, b=0.0, sigma=[0.0], mu2=0.0)
        sol = solve_riccati(spec)
        assert np.allclose(sol.Phi, 0.0, atol=1e-12)

    def test_constant_minus_mu2(self, grid100):
        spec = lq_spec(grid100, A=0.0, B=[0.0], C=[0.0], D=[[0.0]], Q=0.0,
                       R=[[1.0]], b=0.0, sigma=[0.0], mu1=0.0, mu2=1.0,
                       G=2.0, h=1.0)
        sol = solve_riccati(spec)
        assert np.allclose(sol.Phi, -1.0, atol=1e-12)

    def test_linear_forcing(self, grid100):
        # dPhi/dt = -(M - N) b = -1 with Phi(T) = 0  =>  Phi(0) = 1
        spec = lq_spec(grid100, A=0.0, B=[0.0], C=[0.0], D=[[0.0]], Q=0.0,
                       R=[[1.0]], b=1.0, sigma=[0.0], mu1=0.0, mu2=0.0,
                       G=2.0, h=1.0)
        sol = solve_riccati(spec)  # here M = 2, N = 1 constant in time
        assert np.allclose(sol.M, 2.0, atol=1e-12)
        assert np.allclose(sol.N, 1.0, atol=1e-12)
        assert sol.Phi[0] == pytest.approx(1.0, abs=1e-10)
        assert sol.Phi[-1] == 0.0


class TestFeedback:
    def test_zero_numerators(self, grid100):
        spec = lq_spec(grid100, B=[0.0], C=[0.0], D=[[1.0]], sigma=[0.0])
        sol = solve_riccati(spec)
        pol = feedback_coeffs(spec, sol)
        assert np.allclose(pol.alpha, 0.0, atol=1e-14)
        assert np.allclose(pol.beta, 0.0, atol=1e-14)

    def test_zero_phi_gives_zero_beta(self, grid100):
        spec = lq_spec(grid100, b=0.0, sigma=[0.0], mu2=0.0)
        sol = solve_riccati(spec)
        pol = feedback_coeffs(spec, sol)
        assert np.abs(pol.beta).max() <= 1e-12

    def test_diagonal_residual(self, grid200):
        spec = lq_spec(grid200, A=0.05, B=[0.2], C=[0.2], D=[[1.0]], Q=0.5,
                       R=[[1.0]], G=2.0, h=1.0, mu1=0.5, mu2=0.3, b=0.1,
                       sigma=[0.2])
        sol = solve_riccati(spec)
        pol = feedback_coeffs(spec, sol)
        assert np.abs(pol.alpha_residual).max() <= 1e-10
        assert np.abs(pol.beta_residual).max() <= 1e-10

    def test_detuned_scales_alpha_only(self, grid100):
        spec = lq_spec(grid100, mu2=0.5, b=0.1, sigma=[0.2])
        pol = feedback_coeffs(spec, solve_riccati(spec))
        det = pol.detuned(1.5)
        assert np.allclose(det.alpha, 1.5 * pol.alpha)
        assert np.array_equal(det.beta, pol.beta)


class TestClosedFormP:
    def test_quadrature_example(self, grid100):
        spec = lq_spec(grid100, A=0.0, C=[0.0], Q=1.0, G=1.0, h=1.0)
        assert closed_form_P(spec, 0.0) == pytest.approx(2.0, abs=1e-12)

    def test_constant_solution(self, grid100):
        spec = lq_spec(grid100, A=0.0, C=[0.0], Q=0.0, G=2.0, h=1.0)
        P = closed_form_P(spec)
        assert np.allclose(P, 2.0, atol=1e-13)

    def test_exponential_growth(self, grid100):
        spec = lq_spec(grid100, A=0.1, C=[0.0], Q=0.0, G=1.0, h=1.0)
        assert closed_form_P(spec, 0.0) == pytest.approx(1.2214027581601699,
                                                         abs=1e-12)

    def test_matrix_ode_matches_scalar(self, grid100):
        kw = dict(A=0.07, C=[0.3], Q=0.4, G=1.5, h=1.0)
        p1 = closed_form_P(lq_spec(grid100, **kw))
        p2 = closed_form_P(lq_spec(grid100, n=2, **kw))
        assert p2.shape == (101, 2, 2)
        assert np.abs(p2[:, 0, 1]).max() < 1e-14
        assert np.abs(p2[:, 0, 0] - p1).max() < 1e-9

    def test_nonnegative(self, grid100):
        spec = lq_spec(grid100, A=-0.3, C=[0.4], Q=0.2, G=0.5, h=0.5)
        assert np.all(closed_form_P(spec) >= 0.0)


class TestHessianWeight:
    def test_no_diffusion_control(self, grid100):
        spec = lq_spec(grid100, D=[[0.0]], B=[0.0], R=[[0.7]])
        H = hessian_weight(spec, 0.3)
        assert H == pytest.approx(np.array([[0.7]]))

    def test_zero_r_unit_d(self, grid100):
        # P(0) = 2 from the quadrature example, so H = 2 I
        spec = lq_spec(grid100, A=0.0, C=[0.0], Q=1.0, G=1.0, h=1.0,
                       R=[[0.0]], D=[[1.0]], B=[0.0], mu1=0.0)
        assert hessian_weight(spec, 0.0)[0, 0] == pytest.approx(2.0, abs=1e-12)

    def test_unit_r_unit_d(self, grid100):
        spec = lq_spec(grid100, A=0.0, C=[0.0], Q=0.0, G=1.0, h=1.0,
                       R=[[1.0]], D=[[1.0]], B=[0.0], mu1=0.0)
        H = hessian_weight(spec, 0.5)
        assert H[0, 0] == pytest.approx(2.0, abs=1e-13)

    def test_psd_along_grid(self, grid100):
        spec = lq_spec(grid100, mu2=0.4, b=0.1, sigma=[0.3])
        sol = solve_riccati(spec)
        diag = adjoint_diagnostics(spec, sol)
        assert min(np.linalg.eigvalsh(H).min() for H in diag.Hweight) >= -1e-10


class TestInvariants:
    def test_terminal_bit_exact(self, grid100):
        spec = lq_spec(grid100, mu2=0.7, b=0.2, sigma=[0.3], mu1=0.9)
        sol = solve_riccati(spec)
        assert sol.M[-1] == spec.G
        assert sol.N[-1] == spec.h
        assert sol.J[-1] == spec.G / spec.h
        assert sol.Gamma1[-1] == spec.mu1
        assert sol.Phi[-1] == -spec.mu2

    def test_grid_refinement_convergence(self):
        # self-difference between successive refinements drops >= 8x
        kw = dict(A=0.05, B=[0.2], C=[0.2], D=[[1.0]], Q=0.5, R=[[1.0]],
                  G=2.0, h=1.0, mu1=0.5, mu2=0.3, b=0.1, sigma=[0.2])
        sols = {}
        for steps in (50, 100, 200):
            sols[steps] = solve_riccati(lq_spec(TimeGrid.uniform(1.0, steps), **kw))
        for field in ("M", "N", "Phi"):
            coarse = getattr(sols[50], field)
            mid = getattr(sols[100], field)
            fine = getattr(sols[200], field)
            d1 = np.abs(mid[::2] - coarse).max()
            d2 = np.abs(fine[::2] - mid).max()
            assert d1 / max(d2, 1e-16) >= 8.0, field

    def test_mn_route_equivalence(self, grid200):
        spec = lq_spec(grid200, A=0.05, B=[0.2], C=[0.2], D=[[1.0]], Q=0.5,
                       R=[[1.0]], G=2.0, h=1.0, mu1=0.5)
        M1, J1, _ = solve_MJ(spec)
        M1, N1 = recover_MN(M1, J1)
        M2, N2 = solve_MN_direct(spec)
        assert np.abs(M1 - M2).max() < 1e-6
        assert np.abs(N1 - N2).max() < 1e-6

    def test_j_equals_m_over_n(self, grid100):
        spec = lq_spec(grid100)
        sol = solve_riccati(spec)
        rel = np.abs(sol.J - sol.M / sol.N) / np.maximum(np.abs(sol.J), 1e-12)
        assert rel.max() < 1e-8

    def test_eta_reported_positive(self, grid100):
        sol = solve_riccati(lq_spec(grid100))
        assert sol.eta > 0
        assert sol.eta == sol.M.min()
