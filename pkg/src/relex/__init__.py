"""Optimistic representation selection for bilinear episodic MDPs."""

from .learner import BetaSchedule, EpisodePlan, ReLEX, RepState, SingleRepresentation
from .mdp import MdpSpec, OptimalSolution, Trajectory, ValidationError, evaluate_policy, solve_optimal
from .representation import (
    CoverageReport,
    FactorizationError,
    FeatureMap,
    RepresentationClass,
    StateFeatureMap,
)

__all__ = [
    "BetaSchedule",
    "CoverageReport",
    "EpisodePlan",
    "FactorizationError",
    "FeatureMap",
    "MdpSpec",
    "OptimalSolution",
    "ReLEX",
    "RepState",
    "RepresentationClass",
    "SingleRepresentation",
    "StateFeatureMap",
    "Trajectory",
    "ValidationError",
    "evaluate_policy",
    "solve_optimal",
]
