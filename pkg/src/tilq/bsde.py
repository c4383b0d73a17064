"""Regression Monte Carlo solver for the stochastic-premium backward equations.

Backward induction on the factor Markov state Y with per-step polynomial
regression (monomials in Y, standardised per step against the empirical
measure before the least-squares projection):

* martingale integrands (U, gamma2) from the increment regression
  E_i[(next - proj(next)) dW / dt]; subtracting the F_i-measurable
  projection leaves the conditional expectation unchanged and removes the
  O(1/sqrt(dt)) variance of the raw product estimator, which would
  otherwise bias the |U|^2 driver term at desk-scale path counts,
* values (M, Gamma2) from the one-step explicit backward Euler target
  next + driver * dt, with one Picard refinement of the value argument and
  the 1/M nonlinearity floored at M_FLOOR (flooring is audited: it must
  never bind on a resolved solve).

Terminal rows equal the terminal data exactly, as constants in the basis.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb, sqrt
from typing import Optional

import numpy as np

from . import kernels
from .errors import AssumptionError, NumericalError, RegressionError
from .meanvar import gamma1_path, gamma_path
from .model import DeterministicPremium, MarketSpec, OUPremium, TimeGrid

M_FLOOR = 1e-6
COND_LIMIT = 1e12
FLOOR_AUDIT_FRACTION = 1e-3


@dataclass(frozen=True)
class BasisSpec:
    degree: int = 3

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")


@dataclass(frozen=True)
class FactorPaths:
    """Simulated factor values plus the full Brownian increments that drive
    both the factor and the wealth equation (shared noise)."""

    paths: np.ndarray        # (num_paths, steps + 1)
    increments: np.ndarray   # (num_paths, steps, d)
    seed: int
    scheme: str

    @property
    def num_paths(self) -> int:
        return self.paths.shape[0]


def simulate_factor(premium: OUPremium, grid: TimeGrid, num_paths: int,
                    seed: int, d: int, scheme: str = "exact") -> FactorPaths:
    """Factor paths with exact Gaussian OU transitions (or Euler).

    The factor loads on Brownian component `premium.component`; the other
    components are drawn too so the same noise can drive the wealth
    equation.  A sanity gate checks the per-step increment moments.
    """
    if premium.kappa < 0 or premium.vol < 0:
        raise ValueError("kappa and vol must be nonnegative")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    dt = grid.dt
    dW = rng.standard_normal((num_paths, grid.steps, d)) * np.sqrt(dt)[None, :, None]
    z = dW[:, :, premium.component] / np.sqrt(dt)[None, :]
    if scheme == "exact":
        if premium.kappa > 0:
            ecoef = np.exp(-premium.kappa * dt)
            sdcoef = premium.vol * np.sqrt(
                (1.0 - np.exp(-2.0 * premium.kappa * dt)) / (2.0 * premium.kappa))
        else:
            ecoef = np.ones_like(dt)
            sdcoef = premium.vol * np.sqrt(dt)
    elif scheme == "euler":
        ecoef = 1.0 - premium.kappa * dt
        sdcoef = premium.vol * np.sqrt(dt)
    else:
        raise ValueError(f"unknown factor scheme {scheme!r}")
    y0 = np.full(num_paths, premium.y0)
    Y = kernels.ou_paths(y0, ecoef, premium.mean, sdcoef, z)

    _increment_gate(dW, dt)
    return FactorPaths(paths=Y, increments=dW, seed=seed, scheme=scheme)


def _increment_gate(dW: np.ndarray, dt: np.ndarray) -> None:
    """Moment sanity gate on raw Brownian increments.

    Per-step sample means must stay within 4/sqrt(paths*d) of zero and
    per-step variances within 10% of dt; the variance tolerance is floored
    at six sampling sigmas sqrt(2/(paths*d)) so the gate keeps its meaning
    at small path counts instead of tripping on its own noise.
    """
    num_paths, _, d = dW.shape
    zn = dW / np.sqrt(dt)[None, :, None]
    mean_tol = 4.0 / sqrt(num_paths * d)
    step_means = zn.mean(axis=(0, 2))
    if np.any(np.abs(step_means) > mean_tol):
        worst = int(np.argmax(np.abs(step_means)))
        raise NumericalError(
            f"increment mean gate failed at step {worst}: "
            f"{step_means[worst]:.3g} vs {mean_tol:.3g}")
    var_tol = max(0.10, 6.0 * sqrt(2.0 / (num_paths * d)))
    step_vars = dW.var(axis=(0, 2))
    rel = np.abs(step_vars / dt - 1.0)
    if np.any(rel > var_tol):
        worst = int(np.argmax(rel))
        raise NumericalError(
            f"increment variance gate failed at step {worst}: "
            f"deviation {rel[worst]:.3g} vs {var_tol:.3g}")


def theta_values(market: MarketSpec, t: float, y: np.ndarray) -> np.ndarray:
    """Risk premium per path: theta(t) broadcast, or theta_bar + loading y."""
    if isinstance(market.premium, DeterministicPremium):
        th = market.premium.theta(t)
        return np.broadcast_to(th, y.shape + (market.d,)).copy()
    return market.premium.theta(y)


def design_matrix(y: np.ndarray, degree: int):
    """Standardised monomial design matrix and the map back to raw powers.

    Returns (V, to_raw) where f(y) = V @ a and to_raw(a) are the
    coefficients of f in plain powers of y.
    """
    mu = float(y.mean())
    sd = float(y.std())
    if sd < 1e-10 * max(1.0, abs(mu)):
        V = np.ones((y.size, 1))

        def to_raw(a):
            out = np.zeros(degree + 1)
            out[0] = a[0]
            return out

        return V, to_raw
    z = (y - mu) / sd
    V = np.vander(z, degree + 1, increasing=True)

    def to_raw(a):
        # z^k = sum_j C(k,j) (-mu)^(k-j) y^j / sd^k
        out = np.zeros(degree + 1)
        for k in range(degree + 1):
            if a[k] == 0.0:
                continue
            for j in range(k + 1):
                out[j] += a[k] * comb(k, j) * (-mu) ** (k - j) / sd ** k
        return out

    return V, to_raw


@dataclass(frozen=True)
class RegressionBSDESolution:
    """Per-step raw-monomial coefficient tables for a value process and its
    martingale integrand, plus solver diagnostics."""

    grid: TimeGrid
    degree: int
    value_name: str
    value_coefs: np.ndarray   # (steps+1, degree+1)
    mart_coefs: np.ndarray    # (steps, d, degree+1)
    residuals: np.ndarray     # (steps,)
    conds: np.ndarray         # (steps,)
    floor_count: int
    terminal: float

    def value_at(self, i: int, y):
        return np.polynomial.polynomial.polyval(np.asarray(y, float),
                                                self.value_coefs[i])

    def mart_at(self, i: int, y):
        y = np.asarray(y, dtype=float)
        d = self.mart_coefs.shape[1]
        if i >= self.mart_coefs.shape[0]:
            return np.zeros(y.shape + (d,))
        cols = [np.polynomial.polynomial.polyval(y, self.mart_coefs[i, j])
                for j in range(d)]
        return np.stack(cols, axis=-1)


def _lstsq(V: np.ndarray, targets: np.ndarray) -> np.ndarray:
    coef, *_ = np.linalg.lstsq(V, targets, rcond=None)
    return coef


def solve_MU_regression(market: MarketSpec, factors: FactorPaths,
                        basis: BasisSpec = BasisSpec()) -> RegressionBSDESolution:
    """Backward regression solve of the stochastic Riccati value pair (M, U).

    Driver: 2rM - U'theta + Gamma1 |theta|^2 - |U|^2/M + Gamma1 U'theta / M,
    terminal M_T = 1.
    """
    grid = market.grid
    Y = factors.paths
    dW = factors.increments
    npaths, nsteps, d = dW.shape
    if nsteps != grid.steps:
        raise ValueError("factor paths and grid disagree")
    dt = grid.dt
    nodes = grid.nodes
    r_left = np.asarray(market.r(nodes[:-1]), dtype=float)
    g1 = gamma1_path(market)

    nb = basis.degree + 1
    value_coefs = np.zeros((nsteps + 1, nb))
    mart_coefs = np.zeros((nsteps, d, nb))
    residuals = np.zeros(nsteps)
    conds = np.zeros(nsteps)
    value_coefs[nsteps, 0] = 1.0            # terminal data, exact in the basis
    m_next = np.ones(npaths)
    floor_count = 0

    def driver(mref, mval, uval, th, g1i, ri):
        uth = np.sum(uval * th, axis=1)
        th2 = np.sum(th * th, axis=1)
        u2 = np.sum(uval * uval, axis=1)
        return (2.0 * ri * mval - uth + g1i * th2
                - u2 / mref + g1i * uth / mref)

    for i in range(nsteps - 1, -1, -1):
        y = Y[:, i]
        V, to_raw = design_matrix(y, basis.degree)
        cond = float(np.linalg.cond(V))
        if cond > COND_LIMIT:
            raise RegressionError(f"ill-conditioned basis at step {i} "
                                  f"(cond {cond:.3g})")
        conds[i] = cond
        cv = V @ _lstsq(V, m_next)
        u_targets = (m_next - cv)[:, None] * dW[:, i, :] / dt[i]
        u_coef = _lstsq(V, u_targets)       # (nb, d)
        uval = V @ u_coef
        th = theta_values(market, float(nodes[i]), y)

        mref0 = np.maximum(m_next, M_FLOOR)
        f0 = driver(mref0, m_next, uval, th, g1[i], r_left[i])
        c0 = _lstsq(V, m_next + dt[i] * f0)
        m0 = V @ c0
        floor_count += int(np.sum(m0 <= M_FLOOR))
        mref1 = np.maximum(m0, M_FLOOR)
        f1 = driver(mref1, m0, uval, th, g1[i], r_left[i])
        target = m_next + dt[i] * f1
        c1 = _lstsq(V, target)
        m_i = V @ c1
        floor_count += int(np.sum(m_i <= M_FLOOR))

        value_coefs[i] = to_raw(c1)
        for j in range(d):
            mart_coefs[i, j] = to_raw(u_coef[:, j])
        residuals[i] = float(np.linalg.norm(target - V @ c1) / sqrt(npaths))
        m_next = m_i

    total_nodes = nsteps * npaths
    if floor_count > FLOOR_AUDIT_FRACTION * total_nodes:
        raise RegressionError(
            f"positivity audit failed: {floor_count} floored values "
            f"out of {total_nodes} regression nodes")
    return RegressionBSDESolution(grid=grid, degree=basis.degree,
                                  value_name="M", value_coefs=value_coefs,
                                  mart_coefs=mart_coefs, residuals=residuals,
                                  conds=conds, floor_count=floor_count,
                                  terminal=1.0)


def solve_gamma2_regression(market: MarketSpec, factors: FactorPaths,
                            mu: RegressionBSDESolution,
                            basis: BasisSpec = BasisSpec()) -> RegressionBSDESolution:
    """Backward regression solve of the linear offset pair (Gamma2, gamma2).

    Driver: r Gamma2 - (theta + U/M)' gamma2 - (|theta|^2 + U'theta / M) Gamma,
    terminal -mu2; linear in the unknowns, so only the (M, U) input is
    floored when divided.
    """
    grid = market.grid
    Y = factors.paths
    dW = factors.increments
    npaths, nsteps, d = dW.shape
    dt = grid.dt
    nodes = grid.nodes
    r_left = np.asarray(market.r(nodes[:-1]), dtype=float)
    gam = gamma_path(market)

    nb = basis.degree + 1
    value_coefs = np.zeros((nsteps + 1, nb))
    mart_coefs = np.zeros((nsteps, d, nb))
    residuals = np.zeros(nsteps)
    conds = np.zeros(nsteps)
    value_coefs[nsteps, 0] = -market.mu2
    g_next = np.full(npaths, -market.mu2)
    floor_count = 0

    for i in range(nsteps - 1, -1, -1):
        y = Y[:, i]
        V, to_raw = design_matrix(y, basis.degree)
        cond = float(np.linalg.cond(V))
        if cond > COND_LIMIT:
            raise RegressionError(f"ill-conditioned basis at step {i} "
                                  f"(cond {cond:.3g})")
        conds[i] = cond
        cv = V @ _lstsq(V, g_next)
        gz_targets = (g_next - cv)[:, None] * dW[:, i, :] / dt[i]
        gz_coef = _lstsq(V, gz_targets)
        gzval = V @ gz_coef

        th = theta_values(market, float(nodes[i]), y)
        m_in = np.asarray(mu.value_at(i, y), dtype=float)
        floor_count += int(np.sum(m_in <= M_FLOOR))
        m_in = np.maximum(m_in, M_FLOOR)
        u_in = mu.mart_at(i, y)
        th2 = np.sum(th * th, axis=1)
        uth = np.sum(u_in * th, axis=1)
        load = np.sum((th + u_in / m_in[:, None]) * gzval, axis=1)
        forcing = (th2 + uth / m_in) * gam[i]

        f0 = r_left[i] * g_next - load - forcing
        g0 = V @ _lstsq(V, g_next + dt[i] * f0)
        f1 = r_left[i] * g0 - load - forcing
        target = g_next + dt[i] * f1
        c1 = _lstsq(V, target)
        g_i = V @ c1

        value_coefs[i] = to_raw(c1)
        for j in range(d):
            mart_coefs[i, j] = to_raw(gz_coef[:, j])
        residuals[i] = float(np.linalg.norm(target - V @ c1) / sqrt(npaths))
        g_next = g_i

    return RegressionBSDESolution(grid=grid, degree=basis.degree,
                                  value_name="Gamma2", value_coefs=value_coefs,
                                  mart_coefs=mart_coefs, residuals=residuals,
                                  conds=conds, floor_count=floor_count,
                                  terminal=-market.mu2)
