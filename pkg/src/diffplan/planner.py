"""One planning cycle: predict agents, initialize, solve."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

from diffplan.initializer import Initialization, default_params, make_initializer
from diffplan.residuals import CostWeights
from diffplan.solver import PlanVariables, SolveResult, SolverConfig, solve
from diffplan.world import Scenario


class PlanOutcome(NamedTuple):
    init: Initialization
    result: SolveResult


@dataclass
class Planner:
    weights: CostWeights = field(default_factory=CostWeights)
    config: SolverConfig = field(default_factory=SolverConfig)
    initializer: str = "heuristic"
    horizon: int | None = None

    def __post_init__(self):
        self._init_fn = make_initializer(self.initializer)

    def initialize(self, scenario: Scenario, step: int | None = None, ego_state=None, sigma=None,
                   warm=None) -> Initialization:
        return self._init_fn(scenario, self.weights, step=step, ego_state=ego_state, sigma=sigma,
                             params=default_params(scenario), horizon=self.horizon or scenario.horizon_steps,
                             warm=warm)

    def plan(self, scenario: Scenario, step: int | None = None, ego_state=None, sigma=None,
             warm=None) -> PlanOutcome:
        """Initialize and solve; ``warm`` is the previous ``(u, sigma, maneuver)`` in closed loop."""
        init = self.initialize(scenario, step, ego_state, sigma, warm)
        result = solve(init.ctx, PlanVariables(init.u_init, init.b_init), self.weights, self.config)
        return PlanOutcome(init, result)

    def describe(self) -> dict:
        return {"initializer": self.initializer, "horizon": self.horizon, "mode": self.config.mode,
                "beta": self.config.beta, "max_iters": self.config.max_iters, "step_tol": self.config.step_tol}
