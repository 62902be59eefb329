import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffplan.initializer import heuristic_init
from diffplan.residuals import (BLOCKS, FIXED, LEARNABLE, ROWS_PER_STEP, CostWeights, PlanContext, SignalContext,
                                assemble, block_costs, block_slices, decision_factor, r_binary,
                                r_collision, r_comfort, r_efficiency, r_equality, r_lv_safety, r_nv_safety,
                                r_tracking, r_traffic)
from diffplan.vehicle import VehicleParams
from diffplan.world import Lane

FULL = np.array([True, True, True])
ZERO_W = CostWeights(**{n: 0.0 for n in LEARNABLE + FIXED})


def only(**kw):
    return dataclasses.replace(ZERO_W, **kw)


def hand_context(T=1, mask=FULL, ref=None, limits=(15.0, 15.0, 15.0), agents=(), lv=(-1, -1, -1), nv=(-1, -1, -1),
                 params=None, signals=()):
    """Context on a straight road along +x; agents are (x, y, speed, length) held for every step."""
    lane = Lane(2, [[-100.0, 0.0], [500.0, 0.0]])
    ref = np.zeros((3, T, 2)) if ref is None else np.asarray(ref, dtype=float)
    kw = {}
    if agents:
        agents = np.asarray(agents, dtype=float)
        kw = dict(agent_ids=tuple(range(len(agents))),
                  agent_pos=np.repeat(agents[:, None, :2], T, axis=1),
                  agent_speed=np.repeat(agents[:, None, 2], T, axis=1),
                  agent_length=agents[:, 3], interactive=np.ones(len(agents), dtype=bool))
    return PlanContext(x0=np.zeros(4), T=T, params=params or VehicleParams(), sigma=2, mask=np.asarray(mask),
                       ref=ref, speed_limit=np.asarray(limits, dtype=float), frame=lane,
                       lv_index=np.array(lv), nv_index=np.array(nv), signals=list(signals), **kw)


def block(fn, ctx, w, x, b, u=(0.0, 0.0)):
    xs = np.atleast_2d(np.asarray(x, dtype=float))
    bb = np.atleast_2d(np.asarray(b, dtype=float))
    g, gp = decision_factor(bb, ctx.mask[None, :])
    return fn(xs, np.atleast_2d(np.asarray(u, dtype=float)), bb, ctx, w, g, gp)


def cost(fn, ctx, w, x, b, u=(0.0, 0.0)):
    return float(np.sum(block(fn, ctx, w, x, b, u)[0] ** 2))


def test_tracking_examples():
    ctx = hand_context(ref=[[[0.0, 3.5]], [[10.0, 0.0]], [[10.0, -3.5]]])
    assert cost(r_tracking, ctx, only(w_tr_x=1, w_tr_y=1), [10.0, 0.0, 0, 10], [0, 1, 0]) == 0.0
    assert cost(r_tracking, ctx, only(w_tr_y=1), [10.0, 2.0, 0, 10], [0, 1, 0]) == pytest.approx(4.0)


def test_tracking_mixed_matches_direct_sum():
    ref = np.array([[[0.0, 3.5]], [[10.0, 0.0]], [[10.0, -3.5]]])
    ctx = hand_context(ref=ref)
    w = only(w_tr_x=0.7, w_tr_y=1.3)
    p = np.array([9.0, 1.0])
    got = cost(r_tracking, ctx, w, [*p, 0, 10], [0, 0.5, 0.5])
    direct = sum(bi * (w.w_tr_x * (p[0] - ref[i, 0, 0]) ** 2 + w.w_tr_y * (p[1] - ref[i, 0, 1]) ** 2)
                 for i, bi in ((1, 0.5), (2, 0.5)))
    assert got == pytest.approx(direct, rel=1e-12)


def test_lv_velocity_gate_and_cost():
    ctx = hand_context(agents=[(30.0, 0.0, 15.0, 4.8)], lv=(-1, 0, -1))
    r = block(r_lv_safety, ctx, only(w_v_lon=1), [0, 0, 0, 10], [0, 1, 0])[0]
    assert np.all(r == 0.0)
    ctx = hand_context(agents=[(30.0, 0.0, 5.0, 4.8)], lv=(-1, 0, -1))
    assert cost(r_lv_safety, ctx, only(w_v_lon=1), [0, 0, 0, 10], [0, 1, 0]) == pytest.approx(25.0)


def test_lv_distance_cost():
    ctx = hand_context(agents=[(15.0, 0.0, 10.0, 4.8)], lv=(-1, 0, -1), params=VehicleParams(length=5.0))
    w = only(w_d_lon=1, eps_num=0.5)
    assert cost(r_lv_safety, ctx, w, [0, 0, 0, 10], [0, 1, 0]) == pytest.approx(1 / (100 + 0.25), rel=1e-12)


def test_nv_examples():
    ctx = hand_context(agents=[(-10.0, -3.5, 8.0, 4.8)], nv=(-1, -1, 0))
    r = block(r_nv_safety, ctx, only(w_v_lat=1), [0, 0, 0, 10], [0, 0, 1])[0]
    assert np.all(r == 0.0)
    ctx = hand_context(agents=[(-10.0, -3.5, 12.0, 4.8)], nv=(-1, -1, 0))
    assert cost(r_nv_safety, ctx, only(w_v_lat=1), [0, 0, 0, 10], [0, 0, 1]) == pytest.approx(4.0)
    w = only(w_v_lat=1, w_d_lat=1)
    assert cost(r_nv_safety, ctx, w, [0, 0, 0, 10], [0, 1, 0]) == 0.0
    ctx = hand_context(agents=[(-10.0, 0.0, 12.0, 4.8)], nv=(-1, 0, -1))
    assert cost(r_nv_safety, ctx, w, [0, 0, 0, 10], [0, 1, 0]) == 0.0


def test_efficiency_examples():
    ctx = hand_context(limits=(13.0, 13.0, 13.0))
    assert cost(r_efficiency, ctx, only(w_velo=1), [0, 0, 0, 13.0], [0, 1, 0]) == 0.0
    assert cost(r_efficiency, ctx, only(w_velo=1), [0, 0, 0, 8.0], [0, 1, 0]) == pytest.approx(25.0)
    limits = np.array([11.0, 13.0, 17.0])
    ctx = hand_context(limits=limits)
    b = np.array([0.25, 0.25, 0.5])
    got = cost(r_efficiency, ctx, only(w_velo=0.4), [0, 0, 0, 12.0], b)
    assert got == pytest.approx(float(np.sum(0.4 * b * (12.0 - limits) ** 2)), rel=1e-12)


def test_comfort_examples():
    ctx = hand_context()
    assert np.all(block(r_comfort, ctx, only(w_rc1=1, w_rc2=1), [0, 0, 0, 0], [0, 1, 0], u=(0, 0))[0] == 0)
    assert cost(r_comfort, ctx, only(w_rc1=1), [0, 0, 0, 0], [0, 1, 0], u=(2.0, 0)) == pytest.approx(4.0)
    w = only(w_rc1=0.7)
    h = 1e-6
    fd = (cost(r_comfort, ctx, w, [0] * 4, [0, 1, 0], u=(1.3 + h, 0)) -
          cost(r_comfort, ctx, w, [0] * 4, [0, 1, 0], u=(1.3 - h, 0))) / (2 * h)
    assert fd == pytest.approx(2 * 0.7 * 1.3, rel=1e-6)


def collision_ctx(dist):
    # ego length 5 + agent length 5 + gap 2 = 12
    return hand_context(agents=[(dist, 0.0, 0.0, 5.0)], params=VehicleParams(length=5.0))


def test_collision_examples():
    w = only(w_safe=100)
    assert cost(r_collision, collision_ctx(50.0), w, [0, 0, 0, 0], [0, 1, 0]) == 0.0
    assert cost(r_collision, collision_ctx(10.0), w, [0, 0, 0, 0], [0, 1, 0]) == pytest.approx(400.0, rel=1e-9)
    assert cost(r_collision, hand_context(), w, [0, 0, 0, 0], [0, 1, 0]) == 0.0


def test_collision_continuous_across_boundary():
    w = only(w_safe=100)
    lo, hi = 11.0, 13.0
    f = lambda d: float(block(r_collision, collision_ctx(d), w, [0, 0, 0, 0], [0, 1, 0])[0][0, 0])
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if f(mid) > 0 else (lo, mid)
    assert hi - lo < 1e-9
    assert abs(f(lo) - f(hi)) < 1e-6
    assert lo == pytest.approx(12.0, abs=1e-6)


def test_traffic_examples():
    lane = Lane(2, [[-100.0, 0.0], [500.0, 0.0]])
    # lane arc length is measured from the first vertex, so x = 5 maps to s = 105
    red = SignalContext(lane, 105.0, np.array([True]))
    w = only(w_stop=100)
    ctx = hand_context(signals=[red])
    assert cost(r_traffic, ctx, w, [5.0, 0, 0, 10.0], [0, 1, 0]) == pytest.approx(100.0 * 1.0, rel=1e-9)
    assert cost(r_traffic, hand_context(signals=[SignalContext(lane, 104.0, np.array([False]))]), w,
                [5.0, 0, 0, 10.0], [0, 1, 0]) == 0.0
    assert cost(r_traffic, ctx, w, [3.0, 0, 0, 0.0], [0, 1, 0]) == 0.0
    assert cost(r_traffic, hand_context(), w, [5.0, 0, 0, 10.0], [0, 1, 0]) == 0.0


def test_binary_examples():
    ctx, w = hand_context(), only(w_bi=10)
    assert cost(r_binary, ctx, w, [0] * 4, [0, 1, 0]) == 0.0
    assert cost(r_binary, ctx, w, [0] * 4, [0.5, 0.5, 0]) == 0.0
    assert cost(r_binary, ctx, w, [0] * 4, [0, 1.5, 0]) == pytest.approx(10 * 0.5625)


def test_equality_examples():
    ctx = hand_context()
    two = only(w_eq=1000)
    one = only(w_eq=1000, equality_two_sided=False)
    for w in (one, two):
        assert cost(r_equality, ctx, w, [0] * 4, [0, 1, 0]) == 0.0
        assert cost(r_equality, ctx, w, [0] * 4, [0.4, 0.4, 0.4]) == pytest.approx(1000 * 0.04)
    # the one-sided form leaves under-sums free; the default two-sided form penalizes them too
    assert cost(r_equality, ctx, one, [0] * 4, [0.4, 0.4, 0.0]) == 0.0
    assert cost(r_equality, ctx, two, [0] * 4, [0.4, 0.4, 0.0]) == pytest.approx(1000 * 0.04)
    masked = hand_context(mask=[False, True, True])
    assert cost(r_equality, masked, two, [0] * 4, [0.7, 1.0, 0.0]) == 0.0


def suite_problem(scenario, T=10, seed=0):
    init = heuristic_init(scenario, CostWeights(), horizon=T)
    ctx = init.ctx
    rng = np.random.default_rng(seed)
    u = init.u_init + rng.normal(0, [0.3, 0.02], size=(T, 2))
    b = np.where(ctx.mask, rng.uniform(0.15, 0.85, size=(T, 3)), 0.0)
    return ctx, u, b


def test_all_zero_weights_give_zero_residual(suite):
    ctx, u, b = suite_problem(suite[0])
    assert np.all(assemble(u, b, ctx, ZERO_W, jacobian=False) == 0.0)


def test_blocks_are_additive(suite):
    ctx, u, b = suite_problem(suite[4])
    w = CostWeights()
    per_block = block_costs(u, b, ctx, w)
    r = assemble(u, b, ctx, w, jacobian=False).reshape(ctx.T, ROWS_PER_STEP)
    for name, sl in block_slices().items():
        assert float(np.sum(r[:, sl] ** 2)) == pytest.approx(per_block[name], rel=1e-12, abs=1e-15)
    assert sum(per_block.values()) == pytest.approx(float(r.ravel() @ r.ravel()), rel=1e-12)
    assert ROWS_PER_STEP == sum(n for _, n in BLOCKS)


def fd_jacobian(ctx, u, b, w, h=1e-6):
    theta = np.concatenate([u.ravel(), b.ravel()])
    T = ctx.T
    cols = []
    for j in range(len(theta)):
        e = np.zeros_like(theta)
        e[j] = h
        rp = assemble((theta + e)[:2 * T].reshape(T, 2), (theta + e)[2 * T:].reshape(T, 3), ctx, w, jacobian=False)
        rm = assemble((theta - e)[:2 * T].reshape(T, 2), (theta - e)[2 * T:].reshape(T, 3), ctx, w, jacobian=False)
        cols.append((rp - rm) / (2 * h))
    return np.stack(cols, axis=1)


@pytest.mark.parametrize("index", [0, 4, 8, 12, 16])
def test_jacobian_matches_central_differences(suite, index):
    ctx, u, b = suite_problem(suite[index], seed=index)
    w = CostWeights()
    _, J = assemble(u, b, ctx, w)
    fd = fd_jacobian(ctx, u, b, w)
    assert np.max(np.abs(J - fd)) / np.max(np.abs(fd)) < 1e-4


def test_masked_maneuver_contributes_nothing(suite_by_name):
    sc = suite_by_name["red_light_00"]  # single lane: both lane changes masked
    ctx, u, b = suite_problem(sc)
    assert ctx.mask.tolist() == [False, True, False]
    w = CostWeights()
    r, J = assemble(u, b, ctx, w)
    b2 = b.copy()
    b2[:, [0, 2]] = 0.37
    r2, J2 = assemble(u, b2, ctx, w)
    assert np.array_equal(r, r2)
    T = ctx.T
    masked_cols = [2 * T + 3 * k + i for k in range(T) for i in (0, 2)]
    assert np.all(J[:, masked_cols] == 0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-3.0, 3.0))
def test_binary_hinge_one_sided_derivatives(b0):
    # straddle the hinge kinks at 0 and 1 and check both one-sided slopes against the Jacobian
    ctx, w = hand_context(), only(w_bi=10)
    for kink in (0.0, 1.0):
        x = kink + 1e-3 * np.sign(b0) if b0 != 0 else kink + 1e-3
        h = 1e-7
        f = lambda v: float(block(r_binary, ctx, w, [0] * 4, [0, v, 0])[0][0, 1])
        slope = float(block(r_binary, ctx, w, [0] * 4, [0, x, 0])[3][0, 1, 1])
        assert slope == pytest.approx((f(x + h) - f(x - h)) / (2 * h), abs=1e-5)
        assert abs(f(kink + 1e-9) - f(kink - 1e-9)) < 1e-7


def test_weights_round_trip(tmp_path):
    w = CostWeights(w_tr_x=0.25)
    w.save(tmp_path / "w.json")
    assert CostWeights.load(tmp_path / "w.json") == w
    assert w.to_dict()["schema"] == "weights-v1"
    with pytest.raises(ValueError):
        CostWeights(w_velo=-1.0)
    with pytest.raises(ValueError):
        CostWeights.from_dict({"w_bogus": 1.0})
    assert (CostWeights().w_bi, CostWeights().w_eq) == (10.0, 1000.0)
