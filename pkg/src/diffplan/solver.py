"""Damped Gauss-Newton over controls and relaxed decisions, with unrolled sensitivities."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from diffplan import ad
from diffplan.decision import ALPHAS, DecisionVars, one_hot, round_decision
from diffplan.residuals import (LEARNABLE, PlanContext, CostWeights, assemble, block_costs,
                                nonfinite_blocks)
from diffplan.vehicle import Trajectory, rollout

SOLVE_SCHEMA = "solve-v1"
MODES = {"training": (0.4, 2), "inference": (0.5, 10)}


class SolverError(RuntimeError):
    """Raised when the normal equations cannot be factorized or residuals are not finite."""


@dataclass(frozen=True)
class SolverConfig:
    beta: float = 0.5
    max_iters: int = 10
    step_tol: float = 1e-3
    mu: float = 1e-4
    mode: str = "inference"
    max_retries: int = 5

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if self.mu < 0 or self.step_tol < 0:
            raise ValueError("mu and step_tol must be non-negative")
        if self.mode not in MODES and self.mode != "custom":
            raise ValueError(f"unknown solver mode {self.mode!r}")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "SolverConfig":
        beta, iters = MODES[mode]
        fields = {"beta": beta, "max_iters": iters, "mode": mode}
        fields.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**fields)


@dataclass
class PlanVariables:
    u: np.ndarray  # (T, 2)
    b: np.ndarray  # (T, 3)

    def __post_init__(self):
        if not ad.is_dual(self.u):
            self.u = np.array(self.u, dtype=float).reshape(-1, 2)
        if not ad.is_dual(self.b):
            self.b = np.array(self.b, dtype=float).reshape(-1, 3)
        if len(ad.value(self.u)) != len(ad.value(self.b)):
            raise ValueError("controls and decisions must share the horizon")

    @property
    def T(self) -> int:
        return len(ad.value(self.u))


@dataclass
class SolveResult:
    variables: PlanVariables
    trajectory: Trajectory
    maneuver: int
    cost_trace: list
    converged: bool
    iterations_used: int
    initial_cost: float
    mask: np.ndarray
    block_costs: dict = field(default_factory=dict)

    @property
    def final_cost(self) -> float:
        return self.cost_trace[-1] if self.cost_trace else self.initial_cost

    @property
    def decisions(self) -> DecisionVars:
        return DecisionVars(self.variables.b, self.mask)

    def to_dict(self) -> dict:
        return {
            "schema": SOLVE_SCHEMA,
            "controls": self.variables.u.tolist(),
            "decisions": self.variables.b.tolist(),
            "mask": self.mask.tolist(),
            "trajectory": self.trajectory.states.tolist(),
            "maneuver": int(self.maneuver),
            "initial_cost": self.initial_cost,
            "cost_trace": list(self.cost_trace),
            "converged": bool(self.converged),
            "iterations_used": int(self.iterations_used),
            "block_costs": dict(self.block_costs),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class Sensitivities:
    """Jacobians of the flattened solution ``[u*, b*]`` (rows) w.r.t. each input group (columns)."""

    weights: np.ndarray  # (5T, 9), learnable weights in LEARNABLE order
    init_u: np.ndarray  # (5T, 2T)
    init_b: np.ndarray  # (5T, 3T)
    agent_positions: np.ndarray  # (5T, N*T*2), agent-major then step then (x, y)


def solve_normal_equations(r, J, mu: float, max_retries: int = 5):
    """``(J^T J + mu I)^{-1} J^T r`` by Cholesky; escalates ``mu`` tenfold on failure.

    Duals are supported: the tangent follows from differentiating the
    linear system, ``dD = H^{-1} (dJ^T r + J^T dr - dH D)``.
    """
    Jv, rv = ad.value(J), ad.value(r)
    n = Jv.shape[1]
    H = Jv.T @ Jv
    g = Jv.T @ rv
    damp = mu
    for _ in range(max_retries + 1):
        try:
            factor = cho_factor(H + damp * np.eye(n), lower=True, check_finite=True)
            break
        except (LinAlgError, ValueError):
            damp = max(damp * 10.0, 1e-8)
    else:
        raise SolverError(f"normal equations not positive definite after {max_retries} damping increases")
    delta = cho_solve(factor, g)
    if not np.all(np.isfinite(delta)):
        raise SolverError("non-finite Gauss-Newton step")
    if not ad.is_dual(J) and not ad.is_dual(r):
        return delta
    P = ad.n_dirs_of(J, r)
    dJ = J.tan if ad.is_dual(J) else np.zeros(Jv.shape + (P,))
    dr = r.tan if ad.is_dual(r) else np.zeros(rv.shape + (P,))
    Jd = Jv @ delta
    rhs = (np.einsum("mnz,m->nz", dJ, rv - Jd) + Jv.T @ dr - Jv.T @ np.einsum("mnz,n->mz", dJ, delta))
    return ad.Dual(delta, cho_solve(factor, rhs))


def gn_step(theta, residual_fn, config: SolverConfig, linearization=None):
    """One damped Gauss-Newton update; returns ``(theta', cost at theta, update)``.

    ``residual_fn(theta)`` must return the residual vector and its Jacobian;
    pass ``linearization`` to reuse an already evaluated ``(r, J)`` at ``theta``.
    """
    r, J = residual_fn(theta) if linearization is None else linearization
    rv = ad.value(r)
    if not np.all(np.isfinite(rv)) or not np.all(np.isfinite(ad.value(J))):
        raise SolverError("non-finite residuals or Jacobian")
    delta = solve_normal_equations(r, J, config.mu, config.max_retries)
    update = config.beta * delta
    return theta - update, float(rv @ rv), update


def _pack(u, b):
    return ad.concatenate([u.reshape(-1), b.reshape(-1)])


def _unpack(theta, T):
    return theta[:2 * T].reshape(T, 2), theta[2 * T:].reshape(T, 3)


def _plan_residual_fn(ctx: PlanContext, w: CostWeights, fixed_b=None):
    T = ctx.T
    if fixed_b is None:
        def fn(theta):
            u, b = _unpack(theta, T)
            return assemble(u, b, ctx, w)
    else:
        def fn(theta):
            r, J = assemble(theta.reshape(T, 2), fixed_b, ctx, w)
            return r, J[:, :2 * T]
    return fn


def _iterate(theta, fn, cost_fn, config: SolverConfig, n_iters: int | None = None):
    """Run GN steps; a fixed ``n_iters`` disables the tolerance test (used for unrolling)."""
    trace = []
    converged = False
    iters = config.max_iters if n_iters is None else n_iters
    used = 0
    lin = None
    for _ in range(iters):
        theta, _, update = gn_step(theta, fn, config, lin)
        used += 1
        done = n_iters is None and np.linalg.norm(ad.value(update)) < config.step_tol
        if done or used == iters:
            trace.append(cost_fn(ad.value(theta)))
        else:
            # the residuals at the new iterate give both the traced cost and the next linearization
            lin = fn(theta)
            rv = ad.value(lin[0])
            trace.append(float(rv @ rv))
        if done:
            converged = True
            break
    return theta, trace, converged, used


def solve(ctx: PlanContext, init: PlanVariables, w: CostWeights, config: SolverConfig | None = None,
          optimize_decisions: bool = True) -> SolveResult:
    """Minimize the stacked squared residuals from ``init``.

    With ``optimize_decisions=False`` the decisions stay at ``init.b`` and only
    the controls are optimized.
    """
    config = config or SolverConfig()
    T = ctx.T
    if init.T != T:
        raise ValueError(f"init horizon {init.T} does not match context horizon {T}")
    u0 = np.asarray(init.u, dtype=float)
    b0 = np.where(ctx.mask[None, :], np.asarray(init.b, dtype=float), 0.0)
    bad = nonfinite_blocks(u0, b0, ctx, w)
    if bad:
        raise SolverError(f"non-finite residuals at the initial guess in blocks: {', '.join(bad)}")
    if optimize_decisions:
        fn = _plan_residual_fn(ctx, w)
        theta0 = _pack(u0, b0)

        def cost_fn(theta):
            u, b = _unpack(theta, T)
            r = assemble(u, b, ctx, w, jacobian=False)
            return float(r @ r)
    else:
        fn = _plan_residual_fn(ctx, w, fixed_b=b0)
        theta0 = u0.reshape(-1).copy()

        def cost_fn(theta):
            r = assemble(theta.reshape(T, 2), b0, ctx, w, jacobian=False)
            return float(r @ r)
    initial = cost_fn(theta0)
    theta, trace, converged, used = _iterate(theta0, fn, cost_fn, config)
    if optimize_decisions:
        u, b = _unpack(theta, T)
    else:
        u, b = theta.reshape(T, 2), b0
    return _result(ctx, w, u, b, trace, converged, used, initial)


def _result(ctx, w, u, b, trace, converged, used, initial):
    u = np.array(u, dtype=float)
    b = np.where(ctx.mask[None, :], np.array(b, dtype=float), 0.0)
    traj = rollout(ctx.x0, u, ctx.params)
    return SolveResult(
        variables=PlanVariables(u, b), trajectory=traj, maneuver=round_decision(b, ctx.mask),
        cost_trace=trace, converged=converged, iterations_used=used, initial_cost=initial,
        mask=ctx.mask.copy(), block_costs=block_costs(u, b, ctx, w),
    )


def unrolled_solution(ctx: PlanContext, init: PlanVariables, w: CostWeights, config: SolverConfig,
                      n_iters: int):
    """Solution after exactly ``n_iters`` GN steps; carries tangents if any input is a dual."""
    T = ctx.T
    b0 = init.b * ctx.mask[None, :].astype(float)
    theta = _pack(init.u, b0)
    fn = _plan_residual_fn(ctx, w)
    for _ in range(n_iters):
        theta, _, _ = gn_step(theta, fn, config)
    return theta


def _dual_row(values, offset, P):
    """Seed a flat vector of scalars as duals on directions ``offset ...``."""
    d = ad.Dual.seed(np.asarray(values, dtype=float), offset, P)
    return [d[i] for i in range(len(values))]


def solve_with_sensitivities(ctx: PlanContext, init: PlanVariables, w: CostWeights,
                             config: SolverConfig | None = None, chunk: int = 64):
    """Solve, then differentiate the executed iterations by forward-mode duals.

    Directions are the learnable weights, the initial controls and decisions
    and the predicted agent positions, processed in chunks of ``chunk``.
    """
    config = config or SolverConfig()
    result = solve(ctx, init, w, config)
    T, N = ctx.T, ctx.n_agents
    u0 = np.asarray(init.u, dtype=float)
    b0 = np.asarray(init.b, dtype=float)
    wvec = w.learnable_vector()
    pos0 = np.asarray(ad.value(ctx.agent_pos), dtype=float)
    groups = [("weights", len(LEARNABLE)), ("init_u", 2 * T), ("init_b", 3 * T), ("agent_positions", pos0.size)]
    total = sum(n for _, n in groups)
    columns = np.zeros((5 * T, total))
    for start in range(0, total, chunk):
        stop = min(start + chunk, total)
        P = stop - start

        def seeded(values, g_offset):
            """Dual over this chunk's directions for entries [g_offset, g_offset + size)."""
            values = np.asarray(values, dtype=float)
            tan = np.zeros(values.shape + (P,))
            flat = tan.reshape(values.size, P)
            idx = np.arange(values.size) + g_offset
            hit = (idx >= start) & (idx < stop)
            flat[np.flatnonzero(hit), idx[hit] - start] = 1.0
            return ad.Dual(values, tan)

        offset = 0
        wd = seeded(wvec, offset)
        offset += len(LEARNABLE)
        ud = seeded(u0, offset)
        offset += 2 * T
        bd = seeded(b0, offset)
        offset += 3 * T
        pd = seeded(pos0, offset)
        w_dual = w.with_learnable([wd[i] for i in range(len(LEARNABLE))])
        ctx_dual = ctx.with_agent_positions(pd) if N else ctx
        theta = unrolled_solution(ctx_dual, PlanVariables(ud, bd), w_dual, config, result.iterations_used)
        if ad.is_dual(theta):
            columns[:, start:stop] = theta.tan
    # masked decision entries are held at zero by construction
    keep = np.concatenate([np.ones(2 * T, dtype=bool), np.tile(ctx.mask, T)])
    columns[~keep] = 0.0
    split = np.cumsum([n for _, n in groups])[:-1]
    parts = np.split(columns, split, axis=1)
    return result, Sensitivities(*parts)


def decision_enumeration(ctx: PlanContext, init_u, w: CostWeights, config: SolverConfig | None = None):
    """Solve with each available maneuver fixed one-hot; returns ``(best alpha, {alpha: result})``."""
    config = config or SolverConfig()
    results = {}
    for i, alpha in enumerate(ALPHAS):
        if not ctx.mask[i]:
            continue
        init = PlanVariables(np.asarray(init_u, dtype=float), one_hot(alpha, ctx.T))
        results[alpha] = solve(ctx, init, w, config, optimize_decisions=False)
    best = min(results, key=lambda a: (results[a].final_cost, abs(a), -a))
    return best, results


def converged_rate(results) -> float:
    results = list(results)
    if not results:
        raise ValueError("converged_rate needs at least one result")
    return 100.0 * sum(1 for r in results if r.converged) / len(results)
