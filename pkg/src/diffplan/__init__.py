"""Differentiable joint lane-decision and trajectory planning."""

from diffplan.decision import DecisionVars, compliance_check, init_decisions, round_decision
from diffplan.estimator import DiffPlanner
from diffplan.planner import Planner
from diffplan.residuals import CostWeights
from diffplan.solver import SolverConfig, SolveResult, solve, solve_with_sensitivities
from diffplan.vehicle import VehicleParams, rollout, step, step_jacobians
from diffplan.world import Lane, Scenario, load_scenario, save_scenario

__version__ = "0.1.0"

__all__ = [
    "CostWeights",
    "DecisionVars",
    "DiffPlanner",
    "Lane",
    "Planner",
    "Scenario",
    "SolveResult",
    "SolverConfig",
    "VehicleParams",
    "compliance_check",
    "init_decisions",
    "load_scenario",
    "rollout",
    "round_decision",
    "save_scenario",
    "solve",
    "solve_with_sensitivities",
    "step",
    "step_jacobians",
]
