"""Regularized longitudinal targeted estimation for off-policy evaluation."""

from __future__ import annotations

__version__ = "0.1.0"

from .baseline import dm_estimate, is_family, magic_estimate, partial_returns, stabilized_weights, wdr_estimate
from .ensemble import default_grid, rltmle1, rltmle2, solve_simplex_qp
from .environments import make_environment, make_gridworld, make_modelfail, make_modelwin
from .ltmle import LTMLEConfig, RegularizationTriple, cv_ltmle, ltmle_backward
from .mdp import Dataset, DiscountSpec, QStack, StochasticPolicy, TabularMDP, exact_policy_value, simulate
from .model import fit_empirical_model, inject_bias, q_from_model

__all__ = [
    "Dataset",
    "DiscountSpec",
    "LTMLEConfig",
    "QStack",
    "RegularizationTriple",
    "StochasticPolicy",
    "TabularMDP",
    "cv_ltmle",
    "default_grid",
    "dm_estimate",
    "exact_policy_value",
    "fit_empirical_model",
    "inject_bias",
    "is_family",
    "ltmle_backward",
    "magic_estimate",
    "make_environment",
    "make_gridworld",
    "make_modelfail",
    "make_modelwin",
    "partial_returns",
    "q_from_model",
    "rltmle1",
    "rltmle2",
    "simulate",
    "solve_simplex_qp",
    "stabilized_weights",
    "wdr_estimate",
]
