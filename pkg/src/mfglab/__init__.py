"""Weak-formulation mean-field games and their N-player approximations.

Regression Monte-Carlo BSDE solvers, Picard iteration for (generalized)
McKean-Vlasov BSDEs, particle solvers for symmetric N-player games, and
Wasserstein convergence diagnostics.
"""
__version__ = "0.1.0"

from .core import (ActionSet, EmpiricalMeasure, ModelSpec, PathPrefix, TimeGrid,
                   argmax_hamiltonian, best_response_fixed_point, hamiltonian, project_to_A)
from .errors import (BudgetExceeded, ConfigError, ContractViolation, MaxIterExceeded, MfgError,
                     NonConvergence, NumericalAbort, SingularRegression)
from .models import case_study, delay_toy, price_impact
from .paths import (PathEnsemble, WeightEnsemble, girsanov_weights, reweighted_expectation,
                    simulate_state_paths)
from .bsde import BsdeSolution, RegressionBasis, martingale_residual_check, solve_bsde_regression
from .mfg import (MeasureFlow, MfgSolution, MkvProblem, PicardReport, equilibrium_certificate,
                  solve_generalized_mkv, solve_mkv_bsde)
from .nplayer import NPlayerSolution, coupled_comparison, solve_nplayer_particle, zsum_diagnostic
from .metrics import (RateTable, fit_loglog_slope, gamma_N_estimate, rate_bound,
                      wasserstein2_1d, wasserstein2_exact_small)
