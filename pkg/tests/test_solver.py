import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_scenario
from diffplan import ad
from diffplan.initializer import heuristic_init
from diffplan.residuals import LEARNABLE, CostWeights
from diffplan.solver import (PlanVariables, SolveResult, SolverConfig, SolverError, converged_rate,
                             decision_enumeration, gn_step, solve, solve_normal_equations, solve_with_sensitivities,
                             unrolled_solution)
from diffplan.vehicle import rollout


def linear_fn(A, c):
    return lambda theta: (A @ theta - c, A)


def test_scalar_full_step_is_exact():
    cfg = SolverConfig(beta=1.0, mu=0.0, mode="custom")
    theta, cost, _ = gn_step(np.array([0.0]), linear_fn(np.eye(1), np.array([3.0])), cfg)
    assert theta[0] == pytest.approx(3.0, abs=1e-15) and cost == 9.0


def test_scalar_half_step():
    cfg = SolverConfig(beta=0.5, mu=0.0, mode="custom")
    theta, _, _ = gn_step(np.array([0.0]), linear_fn(np.eye(1), np.array([3.0])), cfg)
    assert theta[0] == pytest.approx(1.5, abs=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_linear_fixed_point_is_least_squares(seed, n):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n + 4, n))
    c = rng.normal(size=n + 4)
    cfg = SolverConfig(beta=0.5, mu=0.0, mode="custom")
    theta = np.zeros(n)
    for _ in range(60):
        theta, _, _ = gn_step(theta, linear_fn(A, c), cfg)
    ref = np.linalg.solve(A.T @ A, A.T @ c)
    assert np.allclose(theta, ref, atol=1e-9 * max(1.0, np.abs(ref).max()))
    one = gn_step(np.zeros(n), linear_fn(A, c), dataclasses.replace(cfg, beta=1.0))[0]
    assert np.allclose(one, ref, atol=1e-9 * max(1.0, np.abs(ref).max()))


def test_scalar_sensitivity_to_target():
    c = ad.Dual(np.array([3.0]), np.array([[1.0]]))
    cfg = SolverConfig(beta=1.0, mu=0.0, mode="custom")
    theta, _, _ = gn_step(np.array([0.0]), lambda th: (th - c, np.eye(1)), cfg)
    assert theta.val[0] == pytest.approx(3.0) and theta.tan[0, 0] == pytest.approx(1.0)


def test_singular_system_escalates_damping_then_fails():
    J = np.zeros((3, 2))
    delta = solve_normal_equations(np.ones(3), J, mu=0.0)
    assert np.all(np.isfinite(delta))
    with pytest.raises(SolverError):
        solve_normal_equations(np.ones(3), J, mu=0.0, max_retries=0)
    with pytest.raises(SolverError):
        gn_step(np.zeros(1), lambda th: (np.array([np.nan]), np.eye(1)), SolverConfig())


def test_config_modes_and_validation():
    tr, inf = SolverConfig.for_mode("training"), SolverConfig.for_mode("inference")
    assert (tr.beta, tr.max_iters) == (0.4, 2) and (inf.beta, inf.max_iters) == (0.5, 10)
    with pytest.raises(ValueError):
        SolverConfig(beta=0.0)
    with pytest.raises(ValueError):
        SolverConfig(beta=1.5)


def plan_problem(scenario, T=None):
    init = heuristic_init(scenario, CostWeights(), horizon=T)
    return init.ctx, PlanVariables(init.u_init, init.b_init)


def test_empty_road_lane_keep():
    sc = make_scenario(n_lanes=2, ego_v=15.0, speed_limit=15.0)
    ctx, init = plan_problem(sc)
    res = solve(ctx, init, CostWeights(), SolverConfig.for_mode("inference"))
    assert res.converged and res.maneuver == 0
    assert np.max(np.abs(res.variables.u)) < 0.05


def test_slow_leader_changes_right(suite_by_name):
    sc = suite_by_name["slow_lv_00"]
    ctx, init = plan_problem(sc)
    w, cfg = CostWeights(), SolverConfig.for_mode("inference")
    res = solve(ctx, init, w, cfg)
    best, _ = decision_enumeration(ctx, init.u, w, cfg)
    assert res.maneuver == 1 == best


def test_solve_is_deterministic_and_serializes(suite_by_name, tmp_path):
    ctx, init = plan_problem(suite_by_name["car_following_00"])
    a = solve(ctx, init, CostWeights())
    b = solve(ctx, init, CostWeights())
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    assert np.array_equal(a.trajectory.states, rollout(ctx.x0, a.variables.u, ctx.params).states)
    assert len(a.cost_trace) == a.iterations_used
    a.save(tmp_path / "r.json")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["schema"] == "solve-v1" and doc["maneuver"] == a.maneuver


def test_final_cost_not_above_initial_on_suite(suite):
    cfg = SolverConfig.for_mode("inference")
    for sc in suite:
        ctx, init = plan_problem(sc)
        res = solve(ctx, init, CostWeights(), cfg)
        assert res.final_cost <= res.initial_cost, sc.name


def test_masked_decision_column_is_a_gauge(suite_by_name):
    ctx, init = plan_problem(suite_by_name["red_light_01"])
    assert not ctx.mask[0] and not ctx.mask[2]
    noisy = init.b.copy()
    noisy[:, [0, 2]] = 0.6
    a = solve(ctx, init, CostWeights())
    b = solve(ctx, PlanVariables(init.u, noisy), CostWeights())
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())


def test_nonfinite_initial_residual_names_block(suite_by_name):
    ctx, init = plan_problem(suite_by_name["car_following_00"])
    ctx.ref[1, 3, 0] = np.nan
    with pytest.raises(SolverError, match="tracking"):
        solve(ctx, init, CostWeights())


def test_horizon_mismatch_rejected(suite_by_name):
    ctx, init = plan_problem(suite_by_name["car_following_00"])
    with pytest.raises(ValueError):
        solve(ctx, PlanVariables(init.u[:-1], init.b[:-1]), CostWeights())


def test_absent_interaction_gives_zero_weight_sensitivity():
    sc = make_scenario(n_lanes=2, ego_v=12.0)
    ctx, init = plan_problem(sc, T=8)
    _, sens = solve_with_sensitivities(ctx, init, CostWeights(), SolverConfig.for_mode("training"))
    for name in ("w_v_lon", "w_d_lon", "w_v_lat", "w_d_lat"):
        assert np.all(sens.weights[:, LEARNABLE.index(name)] == 0.0)
    assert np.all(np.isfinite(sens.init_u)) and np.all(np.isfinite(sens.init_b))


def test_weight_sensitivity_matches_finite_differences(suite_by_name):
    ctx, init = plan_problem(suite_by_name["slow_lv_01"], T=10)
    init = PlanVariables(init.u, np.where(ctx.mask, 0.1 + 0.8 * init.b, 0.0))
    w, cfg = CostWeights(), SolverConfig.for_mode("inference")
    res, sens = solve_with_sensitivities(ctx, init, w, cfg)
    assert sens.weights.shape == (5 * ctx.T, len(LEARNABLE))
    wv = w.learnable_vector()
    h = 1e-4
    for j in range(len(LEARNABLE)):
        e = np.zeros_like(wv)
        e[j] = h
        plus = unrolled_solution(ctx, init, w.with_learnable(wv + e), cfg, res.iterations_used)
        minus = unrolled_solution(ctx, init, w.with_learnable(wv - e), cfg, res.iterations_used)
        fd = (plus - minus) / (2 * h)
        col = sens.weights[:, j]
        assert np.max(np.abs(col - fd)) / max(np.max(np.abs(fd)), 1e-6) < 1e-3, LEARNABLE[j]


def test_converged_rate_examples():
    def fake(c):
        return SolveResult(PlanVariables(np.zeros((1, 2)), np.zeros((1, 3))), None, 0, [], c, 0, 0.0,
                           np.ones(3, dtype=bool))

    assert converged_rate([fake(True)] * 3) == 100.0
    assert converged_rate([fake(True)] + [fake(False)] * 3) == 25.0
    with pytest.raises(ValueError):
        converged_rate([])
