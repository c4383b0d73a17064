import numpy as np
import pytest

from tilq import (CoefficientPath, DeterministicPremium, MarketSpec,
                  OUPremium, ProblemSpec, TimeGrid)


@pytest.fixture(scope="session")
def grid100():
    return TimeGrid.uniform(1.0, 100)


@pytest.fixture(scope="session")
def grid200():
    return TimeGrid.uniform(1.0, 200)


def lq_spec(grid, **overrides):
    """Baseline solvable case-(i) spec; override freely."""
    kw = dict(grid=grid, A=0.05, B=[0.2], C=[0.2], D=[[1.0]], b=0.0,
              sigma=[0.0], Q=0.5, R=[[1.0]], G=2.0, h=1.0, mu1=0.5, mu2=0.0,
              x0=1.0)
    kw.update(overrides)
    return ProblemSpec(**kw)


def mv_market(grid, theta=0.2, r=0.0, mu1=1.0, mu2=0.0, x0=1.0, d=1):
    th = theta if isinstance(theta, CoefficientPath) \
        else CoefficientPath.constant(np.full(d, theta))
    return MarketSpec(grid=grid, d=d, r=CoefficientPath.constant(r),
                      premium=DeterministicPremium(theta=th),
                      mu1=mu1, mu2=mu2, x0=x0)


def ou_market(grid, kappa=1.5, mean=0.0, vol=0.4, y0=0.0, theta_bar=0.55,
              loading=0.35, r=0.02, mu1=1.8, mu2=0.3, x0=3.0):
    prem = OUPremium(kappa=kappa, mean=mean, vol=vol, y0=y0,
                     theta_bar=[theta_bar], loading=[loading])
    return MarketSpec(grid=grid, d=1, r=CoefficientPath.constant(r),
                      premium=prem, mu1=mu1, mu2=mu2, x0=x0)


# Acceptance-grade specs: feedback strong enough that a 1.5x-detuned gain is
# improvable by a unit spike, volatility mild enough for tight CIs.
def lq_verify_spec(grid):
    return ProblemSpec(grid=grid, A=0.03, B=[-0.3], C=[0.4], D=[[0.25]],
                       b=0.05, sigma=[0.15], Q=2.0, R=[[0.3]], G=1.5, h=1.0,
                       mu1=4.0, mu2=0.2, x0=2.0)


def mv_verify_market(grid):
    return mv_market(grid, theta=0.55, r=0.02, mu1=1.8, mu2=0.3, x0=3.0)


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile the JIT kernels once so timed tests measure the solvers."""
    from tilq import kernels

    dW = np.zeros((2, 3, 1))
    kernels.lq_paths(np.ones(2), np.ones(3), np.full(3, 0.1),
                     np.zeros((3, 1)), np.zeros(3), np.zeros((3, 1)),
                     np.zeros((3, 1, 1)), np.zeros((3, 1)),
                     np.zeros((3, 1)), np.zeros((3, 1)), dW=dW)
    kernels.lq_paths(np.ones(2), np.ones(3), np.full(3, 0.1),
                     np.zeros((3, 1)), np.zeros(3), np.zeros((3, 1)),
                     np.zeros((3, 1, 1)), np.zeros((3, 1)),
                     np.zeros((1, 1)), np.zeros((1, 1)),
                     u_replay=np.zeros((2, 3, 1)), dW=dW)
    kernels.mv_paths(np.ones(2), np.ones(3), np.full(3, 0.1),
                     np.zeros((1, 3, 1)), np.zeros((1, 3, 1)),
                     np.zeros((1, 3, 1)), dW=dW)
    kernels.mv_paths(np.ones(2), np.ones(3), np.full(3, 0.1),
                     np.zeros((2, 3, 1)), np.zeros((2, 3, 1)),
                     np.zeros((2, 3, 1)), u_replay=np.zeros((2, 3, 1)), dW=dW)
    kernels.ou_paths(np.zeros(2), np.ones(3), 0.0, np.ones(3), np.zeros((2, 3)))
