"""Scikit-learn style wrapper: ``fit`` learns weights and the toy initializer, ``predict`` plans."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from diffplan.initializer import ToyInitializer, toy_init
from diffplan.planner import Planner
from diffplan.residuals import CostWeights
from diffplan.solver import PlanVariables, SolverConfig, solve
from diffplan.training import LossWeights, TrainingConfig, TrainState, mean_loss, train_step
from diffplan.world import Scenario, load_scenario, scenario_from_dict


def check_scenarios(X) -> list[Scenario]:
    """Coerce a scenario, path, scenario-v1 dict or a sequence of those to a list of scenarios."""
    if isinstance(X, (Scenario, str, Path, dict)):
        X = [X]
    try:
        items = list(X)
    except TypeError:
        raise TypeError(f"expected scenarios, paths or scenario dicts, got {type(X).__name__}") from None
    if not items:
        raise ValueError("at least one scenario is required")
    out = []
    for item in items:
        if isinstance(item, Scenario):
            out.append(item)
        elif isinstance(item, (str, Path)):
            out.append(load_scenario(item))
        elif isinstance(item, dict):
            out.append(scenario_from_dict(item))
        else:
            raise TypeError(f"cannot interpret {type(item).__name__} as a scenario")
    return out


def check_weights(weights) -> CostWeights:
    if weights is None:
        return CostWeights()
    if isinstance(weights, CostWeights):
        return weights
    if isinstance(weights, dict):
        return CostWeights.from_dict(weights)
    if isinstance(weights, (str, Path)):
        return CostWeights.load(weights)
    raise TypeError(f"cannot interpret {type(weights).__name__} as cost weights")


class DiffPlanner(BaseEstimator):
    """Joint decision-making and motion planning by differentiable optimization.

    ``fit`` runs ``n_steps`` Adam steps on the batch mean training loss
    (all given scenarios form the batch).  ``predict`` returns one maneuver
    per scenario; :meth:`plan` returns the full solve results.
    """

    def __init__(self, weights=None, initializer="heuristic", solver_mode="inference", beta=None, max_iters=None,
                 step_tol=1e-3, mu=1e-4, horizon=None, n_steps=50, learning_rate=2e-4, huber_delta=1.0,
                 loss_weights=None):
        self.weights = weights
        self.initializer = initializer
        self.solver_mode = solver_mode
        self.beta = beta
        self.max_iters = max_iters
        self.step_tol = step_tol
        self.mu = mu
        self.horizon = horizon
        self.n_steps = n_steps
        self.learning_rate = learning_rate
        self.huber_delta = huber_delta
        self.loss_weights = loss_weights

    def _solver_config(self) -> SolverConfig:
        overrides = {"step_tol": self.step_tol, "mu": self.mu}
        if self.beta is not None:
            overrides["beta"] = self.beta
        if self.max_iters is not None:
            overrides["max_iters"] = self.max_iters
        return SolverConfig.for_mode(self.solver_mode, **overrides)

    def _validate(self):
        if self.initializer not in ("heuristic", "constant-velocity", "toy"):
            raise ValueError(f"initializer must be heuristic, constant-velocity or toy, got {self.initializer!r}")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")

    def fit(self, X, y=None):
        """Train the learnable weights and the toy initializer; ``y`` is unused (recorded egos live in X)."""
        self._validate()
        scenarios = check_scenarios(X)
        lam = self.loss_weights if isinstance(self.loss_weights, LossWeights) else LossWeights(
            **(self.loss_weights or {}))
        config = TrainingConfig(lr=self.learning_rate, huber_delta=self.huber_delta)
        solver = SolverConfig.for_mode("training")
        state = TrainState.initial(check_weights(self.weights))
        curve = []
        for _ in range(self.n_steps):
            state, report = train_step(scenarios, state, config, solver, lam)
            curve.append(report.loss)
        self.weights_ = state.weights
        self.phi_ = state.phi.copy()
        self.loss_curve_ = curve
        self.n_iter_ = state.step
        self.n_scenarios_seen_ = len(scenarios)
        return self

    def plan(self, X) -> list:
        check_is_fitted(self, "weights_")
        self._validate()
        config = self._solver_config()
        results = []
        for sc in check_scenarios(X):
            if self.initializer == "toy":
                init = toy_init(sc, self.weights_, ToyInitializer(self.phi_), horizon=self.horizon)
                results.append(solve(init.ctx, PlanVariables(init.u_init, init.b_init), self.weights_, config))
            else:
                planner = Planner(self.weights_, config, self.initializer, self.horizon)
                results.append(planner.plan(sc).result)
        return results

    def predict(self, X) -> np.ndarray:
        """Selected maneuver (-1 left, 0 keep, +1 right) per scenario."""
        return np.array([r.maneuver for r in self.plan(X)], dtype=int)

    def predict_trajectory(self, X) -> list:
        """Planned ego states ``(T + 1, 4)`` per scenario."""
        return [r.trajectory.states for r in self.plan(X)]

    def score(self, X, y=None) -> float:
        """Negative mean training loss (higher is better)."""
        check_is_fitted(self, "weights_")
        state = TrainState.initial(self.weights_, self.phi_)
        return -mean_loss(check_scenarios(X), state, delta=self.huber_delta)
