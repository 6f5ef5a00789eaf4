"""Bayesian-network joint policies for cooperative Markov games."""

from .bn_policy import Dag, TabularBnPolicy, Topology, fixed_topology
from .exact_pg import AscentConfig, ascend, bn_policy_gradient, smoothness_step_bound
from .markov_game import (CooperativeMarkovGame, evaluate_policy, value_from_start,
                          visitation)
from .solvers import best_response_value, nash_gap, optimal_value, poa

__all__ = [
    "AscentConfig", "CooperativeMarkovGame", "Dag", "TabularBnPolicy", "Topology",
    "ascend", "best_response_value", "bn_policy_gradient", "evaluate_policy",
    "fixed_topology", "nash_gap", "optimal_value", "poa", "smoothness_step_bound",
    "value_from_start", "visitation",
]

__version__ = "0.1.0"
