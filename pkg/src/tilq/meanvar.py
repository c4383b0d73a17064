"""Mean-variance equilibrium strategies in u-coordinates (u = sigma' pi).

Deterministic risk premium: everything is in closed form,
    M_t = e^{2 int_t^T r} (1 + mu1 int_t^T e^{-int_s^T r} |theta_s|^2 ds),
    alpha_t = mu1 e^{int_t^T r} theta_t / M_t,
    beta_t  = mu2 e^{int_t^T r} theta_t / M_t.

Stochastic (OU-factor) premium: the strategy is assembled from the
regression solutions of the (M, U) and (Gamma2, gamma2) backward equations
produced by the bsde module, via

    u*_s = -M^{-1} [ (U - theta Gamma1) X* + Gamma theta + gamma2 ].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import AssumptionError, NumericalError
from .integrate import CumInt
from .model import DeterministicPremium, MarketSpec, OUPremium, TimeGrid

# Floor for dividing by M; flooring must never bind on a correct solve and
# every floored division is counted.
M_FLOOR = 1e-6
IDENTITY_TOL = 1e-10


@dataclass(frozen=True)
class MVAnsatzSolution:
    """Backward solution family for the mean-variance ansatz.

    Deterministic mode stores plain paths (U and gamma2 identically zero);
    stochastic mode additionally keeps the regression tables that represent
    M, U, Gamma2, gamma2 as functions of the factor.
    """

    grid: TimeGrid
    M: np.ndarray
    U: np.ndarray            # (steps+1, d); zero in deterministic mode
    Gamma1: np.ndarray
    Gamma: np.ndarray        # Gamma2 - Gamma3 = -mu2 e^{int r}
    Gamma2: np.ndarray
    gamma2: np.ndarray       # (steps+1, d); zero in deterministic mode
    Gamma3: np.ndarray
    mu_regression: object = None      # RegressionBSDESolution in stochastic mode
    gamma2_regression: object = None

    @property
    def stochastic(self) -> bool:
        return self.mu_regression is not None


@dataclass(frozen=True)
class MVPolicy:
    """Feedback strategy u*_s = alpha_s X*_s + beta_s.

    In factor mode alpha/beta are functions of the factor state; the stored
    arrays then hold their values along the long-run-mean path and
    `alpha_at`/`evaluate` give the state-dependent values.
    """

    grid: TimeGrid
    alpha: np.ndarray  # (steps+1, d)
    beta: np.ndarray   # (steps+1, d)
    mode: str = "deterministic"   # "deterministic" | "factor"
    ansatz: Optional[MVAnsatzSolution] = None
    market: Optional[MarketSpec] = None
    detune_factor: float = 1.0
    floored_divisions: int = 0

    def __post_init__(self):
        self.alpha.flags.writeable = False
        self.beta.flags.writeable = False

    def detuned(self, factor: float) -> "MVPolicy":
        return MVPolicy(grid=self.grid, alpha=factor * self.alpha,
                        beta=self.beta.copy(), mode=self.mode,
                        ansatz=self.ansatz, market=self.market,
                        detune_factor=factor * self.detune_factor)

    def coeffs_at(self, idx, y=None):
        """(alpha, beta) at time index idx; y is the factor value (any shape)
        and is required in factor mode."""
        if self.mode == "deterministic":
            return self.alpha[idx], self.beta[idx]
        if y is None:
            raise ValueError("factor-mode policy needs the factor value")
        sol = self.ansatz
        y = np.asarray(y, dtype=float)
        theta = self.market.premium.theta(y)
        m = np.maximum(sol.mu_regression.value_at(idx, y), M_FLOOR)[..., None]
        u = sol.mu_regression.mart_at(idx, y)
        g2 = sol.gamma2_regression.mart_at(idx, y)
        alpha = self.detune_factor * (sol.Gamma1[idx] * theta - u) / m
        beta = -(sol.Gamma[idx] * theta + g2) / m
        return alpha, beta

    def evaluate(self, idx, x, y=None):
        """Strategy value u(t_idx, x[, y]); x and y broadcast."""
        alpha, beta = self.coeffs_at(idx, y)
        return alpha * np.asarray(x, dtype=float)[..., None] + beta


def discount_exponent(market: MarketSpec) -> CumInt:
    """R(s) = int_s^T r dv as a CumInt (exact on the piecewise-linear rate)."""
    return CumInt(lambda t: market.r(t), market.grid)


def gamma1_path(market: MarketSpec) -> np.ndarray:
    return market.mu1 * np.exp(discount_exponent(market).node_values)


def gamma_path(market: MarketSpec) -> np.ndarray:
    """Gamma_s = -mu2 e^{int_s^T r}; Gamma(T) = -mu2 exactly."""
    return -market.mu2 * np.exp(discount_exponent(market).node_values)


def _require_deterministic(market: MarketSpec, what: str) -> DeterministicPremium:
    if not isinstance(market.premium, DeterministicPremium):
        raise AssumptionError(f"{what} needs a deterministic risk premium")
    return market.premium


def det_premium_M(market: MarketSpec) -> np.ndarray:
    """Closed-form M path by quadrature; M(T) = 1 and M > 0."""
    prem = _require_deterministic(market, "det_premium_M")
    rint = discount_exponent(market)

    def integrand(s):
        th = prem.theta(s)
        return np.exp(-np.asarray(rint(s))) * np.sum(th * th, axis=-1)

    w = CumInt(integrand, market.grid)
    M = np.exp(2.0 * rint.node_values) * (1.0 + market.mu1 * w.node_values)
    M[-1] = 1.0
    if np.any(M <= 0.0):
        raise NumericalError("closed-form M not positive")
    return M


def det_premium_policy(market: MarketSpec) -> MVPolicy:
    """Closed-form equilibrium strategy for deterministic risk premium."""
    prem = _require_deterministic(market, "det_premium_policy")
    nodes = market.grid.nodes
    disc = np.exp(discount_exponent(market).node_values)
    M = det_premium_M(market)
    theta = prem.theta(nodes)
    alpha = market.mu1 * disc[:, None] * theta / M[:, None]
    beta = market.mu2 * disc[:, None] * theta / M[:, None]
    return MVPolicy(grid=market.grid, alpha=alpha, beta=beta,
                    mode="deterministic", market=market)


def det_ansatz(market: MarketSpec) -> MVAnsatzSolution:
    """Ansatz family in deterministic mode (U = 0, gamma2 = 0).

    Gamma2 integrates the deterministic reduction of its backward equation:
    Gamma2_t = -mu2 e^{int_t^T r} - int_t^T e^{int_t^s r} Gamma_s |theta_s|^2 ds.
    """
    prem = _require_deterministic(market, "det_ansatz")
    grid = market.grid
    rint = discount_exponent(market)
    disc = np.exp(rint.node_values)

    # e^{int_t^s r} = e^{int_t^T r} / e^{int_s^T r}; pull e^{int_t^T r} out.
    def integrand_scaled(s):
        th = prem.theta(s)
        gam = -market.mu2 * np.exp(np.asarray(rint(s)))
        return np.exp(-np.asarray(rint(s))) * gam * np.sum(th * th, axis=-1)

    w = CumInt(integrand_scaled, grid)
    gamma2_vals = -market.mu2 * disc - disc * w.node_values
    gamma2_vals[-1] = -market.mu2
    gam = gamma_path(market)
    M = det_premium_M(market)
    zeros = np.zeros((grid.steps + 1, market.d))
    return MVAnsatzSolution(grid=grid, M=M, U=zeros, Gamma1=gamma1_path(market),
                            Gamma=gam, Gamma2=gamma2_vals, gamma2=zeros.copy(),
                            Gamma3=gamma2_vals - gam)


def stochastic_ansatz(market: MarketSpec, mu_regression, gamma2_regression,
                      y_ref: Optional[float] = None) -> MVAnsatzSolution:
    """Ansatz family backed by regression tables; the stored paths are the
    regression functions evaluated along the constant reference factor value
    (defaults to the OU long-run mean)."""
    if not isinstance(market.premium, OUPremium):
        raise AssumptionError("stochastic_ansatz needs an OU-factor premium")
    grid = market.grid
    yr = market.premium.mean if y_ref is None else float(y_ref)
    m = grid.steps + 1
    M = np.array([mu_regression.value_at(i, yr) for i in range(m)], dtype=float)
    U = np.stack([mu_regression.mart_at(i, yr) for i in range(m)])
    g2 = np.stack([gamma2_regression.mart_at(i, yr) for i in range(m)])
    G2 = np.array([gamma2_regression.value_at(i, yr) for i in range(m)], dtype=float)
    gam = gamma_path(market)
    return MVAnsatzSolution(grid=grid, M=M, U=U, Gamma1=gamma1_path(market),
                            Gamma=gam, Gamma2=G2, gamma2=g2, Gamma3=G2 - gam,
                            mu_regression=mu_regression,
                            gamma2_regression=gamma2_regression)


def assemble_policy(market: MarketSpec, sol: MVAnsatzSolution,
                    x_probe: Optional[np.ndarray] = None) -> MVPolicy:
    """Strategy from the ansatz family, with the assembled-identity check.

    alpha = (Gamma1 theta - U) / M, beta = -(Gamma theta + gamma2) / M, and
    alpha x + beta must reproduce -M^{-1}[(U - theta Gamma1) x + Gamma theta
    + gamma2] pointwise (1e-10 in deterministic mode).
    """
    grid = market.grid
    nodes = grid.nodes
    if isinstance(market.premium, DeterministicPremium):
        theta = market.premium.theta(nodes)
    else:
        # Reference-path values; state dependence lives in coeffs_at.
        yr = market.premium.mean
        theta = np.broadcast_to(market.premium.theta(yr), (nodes.size, market.d)).copy()
    floored = int(np.sum(sol.M <= M_FLOOR))
    Msafe = np.maximum(sol.M, M_FLOOR)[:, None]
    alpha = (sol.Gamma1[:, None] * theta - sol.U) / Msafe
    beta = -(sol.Gamma[:, None] * theta + sol.gamma2) / Msafe

    if x_probe is None:
        x_probe = np.array([-1.0, 0.0, 0.5, 1.0, 2.0])
    direct = (-(sol.U - theta * sol.Gamma1[:, None])[None, :, :]
              * x_probe[:, None, None]
              - (sol.Gamma[:, None] * theta + sol.gamma2)[None, :, :]) / Msafe[None, :, :]
    assembled = alpha[None, :, :] * x_probe[:, None, None] + beta[None, :, :]
    gap = float(np.abs(direct - assembled).max())
    tol = IDENTITY_TOL if not sol.stochastic else 1e-8
    if gap > tol * max(1.0, float(np.abs(direct).max())):
        raise NumericalError(f"strategy identity violated by {gap:.3g}")

    mode = "factor" if sol.stochastic else "deterministic"
    return MVPolicy(grid=grid, alpha=alpha, beta=beta, mode=mode, ansatz=sol,
                    market=market, floored_divisions=floored)


def wealth_representation(market: MarketSpec, policy: MVPolicy,
                          increments: np.ndarray,
                          x0: Optional[float] = None) -> np.ndarray:
    """Explicit wealth path from the exponential representation.

    X_t = rho_t (x0 - int_0^t rho^{-1} alpha' beta ds + int_0^t rho^{-1} beta' dW^theta)
    with rho_t = e^{int_0^t r} E_t(alpha . W^theta), W^theta = W + int theta ds.
    Deterministic-premium mode only; `increments` has shape (paths, steps, d)
    or (steps, d) and the stochastic integrals use left-point values on the
    same grid as the Euler scheme, so both discretisations can be coupled
    path by path.
    """
    prem = _require_deterministic(market, "wealth_representation")
    grid = market.grid
    dw = np.asarray(increments, dtype=float)
    single = dw.ndim == 2
    if single:
        dw = dw[None, :, :]
    if dw.shape[1] != grid.steps or dw.shape[2] != market.d:
        raise ValueError("increments must have shape (paths, steps, d)")
    x_init = market.x0 if x0 is None else float(x0)

    nodes = grid.nodes
    dt = grid.dt
    theta = prem.theta(nodes)[:-1]          # left values, (steps, d)
    alpha = policy.alpha[:-1]
    beta = policy.beta[:-1]
    r_left = np.asarray(market.r(nodes[:-1]), dtype=float)

    dwtheta = dw + (theta * dt[:, None])[None, :, :]
    # log rho increments: r dt + alpha' dW^theta - |alpha|^2/2 dt
    log_inc = (r_left * dt)[None, :] + np.einsum("sj,psj->ps", alpha, dwtheta) \
        - 0.5 * np.sum(alpha * alpha, axis=1)[None, :] * dt[None, :]
    log_rho = np.concatenate([np.zeros((dw.shape[0], 1)),
                              np.cumsum(log_inc, axis=1)], axis=1)
    rho = np.exp(log_rho)

    ab = np.sum(alpha * beta, axis=1)       # alpha' beta, (steps,)
    drift_int = np.cumsum((ab * dt)[None, :] / rho[:, :-1], axis=1)
    stoch_int = np.cumsum(np.einsum("sj,psj->ps", beta, dwtheta) / rho[:, :-1],
                          axis=1)
    inner = np.concatenate([np.full((dw.shape[0], 1), x_init),
                            x_init - drift_int + stoch_int], axis=1)
    X = rho * inner
    return X[0] if single else X
