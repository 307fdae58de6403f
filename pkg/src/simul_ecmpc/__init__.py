"""Simultaneous moving-horizon estimation and model predictive control.

One receding-horizon problem estimates the current state from past
measurements and plans future inputs at the same time; a weight ``phi``
balances the two parts.
"""

from .costs import (ArrivalCost, KBoundFunctions, PowerLaw, QuadraticWeights, arrival_cost,
                    combined_criterion, controller_stage_cost, cost_to_go, estimator_stage_cost,
                    sigma_lower_bound, update_arrival)
from .dynamics import (BoxSet, Discretization, IntegrationError, NoiseSpec, SystemModel, discretize,
                       linear_model, project_box, sample_noise, scalar_cubic_model,
                       trial_generators, van_der_pol_model)
from .ecmpc import (DecisionVector, EcmpcConfig, IndependentController, SimultaneousController,
                    WindowBuffer, build_problem)
from .horizons import (ControllabilityBudget, EstimatorBoundConstants, HorizonCertificate,
                       UncontrollableBudget, estimation_error_bound, estimation_error_bound_example1,
                       iioss_bound_example1, min_backward_horizon_example1,
                       min_backward_horizon_general, min_forward_horizon, omega_empirical,
                       pi_E_bar, pseudo_controllability, robust_controllable_membership)
from .nlp import NlpProblem, SolveOptions, SolveResult, grid_oracle, solve
from .sim import (ClosedLoopRecord, MonteCarloCase, MonteCarloSummary, check_theorem1, export_csv,
                  mse, read_csv, run_closed_loop, run_monte_carlo, simulate_batch)

__version__ = "0.1.0"
