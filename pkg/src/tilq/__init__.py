"""Solvers and Monte Carlo verification for time-inconsistent stochastic LQ
control and mean-variance portfolio equilibrium strategies."""

__version__ = "0.1.0"

from .model import (CoefficientPath, DeterministicPremium, MarketSpec,
                    OUPremium, ProblemSpec, TimeGrid, ValidationResult,
                    eval_coefficient, validate_spec)
from .riccati import (AdjointDiagnostics, EquilibriumPolicy, RiccatiSolution,
                      TruncationConfig, adjoint_diagnostics, closed_form_P,
                      feedback_coeffs, hessian_weight, recover_MN, solve_MJ,
                      solve_MN_direct, solve_gamma1, solve_phi, solve_riccati)
from .meanvar import (MVAnsatzSolution, MVPolicy, assemble_policy, det_ansatz,
                      det_premium_M, det_premium_policy, gamma1_path,
                      gamma_path, stochastic_ansatz, wealth_representation)
from .bsde import (BasisSpec, FactorPaths, RegressionBSDESolution,
                   simulate_factor, solve_MU_regression,
                   solve_gamma2_regression)
from .simulate import (LQPredictor, MVPredictor, PathBundle, SimConfig,
                       SpikedPolicy, VerificationReport, equilibrium_ratio,
                       estimate_cost, expansion_check, lambda_decay_exponent,
                       lambda_pathwise_at_t, lambda_residual, make_dynamics,
                       probe_directions, simulate_state, spike_control)
from .config import BsdeSettings, RunConfig, load_config
from .errors import (AssumptionError, ConfigError, NumericalError,
                     RegressionError, TilqError)
