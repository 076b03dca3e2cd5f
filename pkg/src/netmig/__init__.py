"""Migration choice with social networks.

Synthetic data, conditional-logit estimation with sampled choice sets,
weather and shift-share instruments, gravity decomposition and a spatial
equilibrium counterfactual engine.
"""
from .choice import (ChoiceData, ConditionalLogit, FitResult, ModelSpec, build_choice_sets, fit_logit,
                     gravity_decomposition, mwtp_distance, mwtp_wages)
from .equilibrium import (EquilibriumParams, EquilibriumState, Scenario, apply_counterfactual,
                          calibrate_scales, draw_shocks, make_economy, outcomes_report, solve_equilibrium)
from .exceptions import (CollinearityError, ConvergenceError, EquilibriumError, EstimationError,
                         NetmigError, SchemaError, SeparationError, ValidationError)
from .geo import City, World, haversine_km, transition_matrix, wage_quartiles
from .linear import LinearRegression, TwoStageLeastSquares, did_event_study, fe_regress, ols, tsls
from .simulate import DgpConfig, simulate
from .utility import ParameterSet

__version__ = "0.1.0"

__all__ = [
    "ChoiceData", "City", "CollinearityError", "ConditionalLogit", "ConvergenceError", "DgpConfig",
    "EquilibriumError", "EquilibriumParams", "EquilibriumState", "EstimationError", "FitResult",
    "LinearRegression", "ModelSpec", "NetmigError", "ParameterSet", "Scenario", "SchemaError",
    "SeparationError", "TwoStageLeastSquares", "ValidationError", "World", "apply_counterfactual",
    "build_choice_sets", "calibrate_scales", "did_event_study", "draw_shocks", "fe_regress", "fit_logit",
    "gravity_decomposition", "haversine_km", "make_economy", "mwtp_distance", "mwtp_wages", "ols",
    "outcomes_report", "simulate", "solve_equilibrium", "transition_matrix", "tsls", "wage_quartiles",
]
