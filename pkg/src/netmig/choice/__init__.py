"""Conditional-logit migration choice: choice sets, estimation, gravity."""
from .fit import ConditionalLogit, FitResult, fit_logit
from .gravity import (GravityDecomposition, gravity_curve, gravity_decomposition, moving_costs,
                      mwtp_distance, mwtp_wages)
from .model import Design, LogitProblem, ModelSpec, RDSpec, build_design, systematic_utility
from .sets import ChoiceData, ChoiceObservation, build_choice_sets

__all__ = ["ChoiceData", "ChoiceObservation", "ConditionalLogit", "Design", "FitResult",
           "GravityDecomposition", "LogitProblem", "ModelSpec", "RDSpec", "build_choice_sets",
           "build_design", "fit_logit", "gravity_curve", "gravity_decomposition", "moving_costs",
           "mwtp_distance", "mwtp_wages", "systematic_utility"]
