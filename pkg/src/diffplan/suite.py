"""Seeded synthetic scenario templates on straight multi-lane roads.

Templates: ``slow_lv`` (slow leader, free lane to the right), ``blocked_adjacent``
(slower leader but the adjacent lane is a dense platoon), ``red_light``,
``car_following`` (leader with oscillating speed) and ``yielding`` (pedestrian
crossing ahead).  Agents replay scripted tracks; the recorded ego comes from a
simple scripted driver that sees the true agent poses.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from diffplan.vehicle import VehicleParams, step as vehicle_step
from diffplan.world import AgentTrack, Lane, Scenario, TrafficSignal, load_scenario, save_scenario, wrap_angle

TEMPLATES = ("slow_lv", "blocked_adjacent", "red_light", "car_following", "yielding")
LANE_WIDTH = 3.5
ROAD_LENGTH = 600.0
HISTORY = 20
HORIZON = 50
EPISODE = 150
TRACK_STEPS = HISTORY + EPISODE + HORIZON + 2
DT = 0.1
SPEED_LIMIT = 15.0
BUNDLED_SUITE = Path(__file__).resolve().parent / "data" / "suite"


def straight_lanes(n: int, speed_limit: float = SPEED_LIMIT) -> tuple[Lane, ...]:
    """``n`` parallel lanes along +x; lane 1 is leftmost (largest y)."""
    xs = np.arange(0.0, ROAD_LENGTH + 1e-9, 10.0)
    lanes = []
    for i in range(n):
        y = -i * LANE_WIDTH
        lanes.append(Lane(
            id=i + 1, centerline=np.stack([xs, np.full_like(xs, y)], axis=1), width=LANE_WIDTH,
            speed_limit=speed_limit, left_neighbor=i if i > 0 else None, right_neighbor=i + 2 if i < n - 1 else None,
        ))
    return tuple(lanes)


def lane_y(lane_id: int) -> float:
    return -(lane_id - 1) * LANE_WIDTH


def straight_track(x0: float, y: float, speeds) -> np.ndarray:
    """Poses along +x with a per-step speed profile (positions integrate the speeds)."""
    speeds = np.asarray(speeds, dtype=float)
    x = x0 + np.concatenate([[0.0], np.cumsum(speeds[:-1] * DT)])
    return np.stack([x, np.full_like(x, y), np.zeros_like(x), speeds], axis=1)


def _vehicle(aid, poses, length=4.8, width=1.9):
    return AgentTrack(aid, "vehicle", length, width, poses)


def scripted_driver(lanes, agents, signals, ego0, target_lane_id: int, n_steps: int, start_step: int = HISTORY,
                    params: VehicleParams | None = None) -> np.ndarray:
    """Recorded ego: pure pursuit to the target lane, speed from limit, leader, red lights and crossers."""
    params = params or VehicleParams()
    lanes_by_id = {ln.id: ln for ln in lanes}
    lane = lanes_by_id[target_lane_id]
    x = np.array(ego0, dtype=float)
    out = [x.copy()]
    for k in range(n_steps):
        t = start_step + k
        fp = lane.project(x[:2])
        look = max(6.0, 1.2 * x[3])
        tgt, _ = lane.point_at(fp.s + look)
        eta = wrap_angle(np.arctan2(tgt[1] - x[1], tgt[0] - x[0]) - x[2])
        delta = np.arctan(2 * params.wheelbase * np.sin(eta) / max(np.hypot(*(tgt - x[:2])), 1e-3))
        v_des = lane.speed_limit
        for agent in agents:
            pose = agent.pose_at(t)
            if pose is None:
                continue
            ap = lane.project(pose[:2])
            gap = ap.s - fp.s
            if gap <= 0:
                continue
            if agent.kind == "vehicle" and abs(ap.d) < lane.width / 2:
                room = gap - params.length - 2.0 - 1.0 * x[3]
                v_des = min(v_des, max(pose[3] + 0.5 * room, 0.0))
            elif agent.kind != "vehicle" and abs(ap.d) < lane.width / 2 + 3.0:
                room = max(gap - params.length - 4.0, 0.0)
                v_des = min(v_des, np.sqrt(2.0 * 2.0 * room))
        for sig in signals:
            if sig.lane_id == lane.id and fp.s < sig.stop_line_s and sig.is_red(t):
                room = max(sig.stop_line_s - 1.5 - fp.s, 0.0)
                v_des = min(v_des, np.sqrt(2.0 * 2.0 * room))
        a = np.clip(1.0 * (v_des - x[3]), -5.0, 2.0)
        x = vehicle_step(x, (a, np.clip(delta, -0.5, 0.5)), params)
        out.append(x.copy())
    return np.array(out)


def _make(name, template, lanes, agents, signals, ego_lane, ego_x, ego_v, expected, gt_lane, extra=None):
    ego0 = np.array([ego_x, lane_y(ego_lane), 0.0, ego_v])
    gt = scripted_driver(lanes, agents, signals, ego0, gt_lane, EPISODE + HORIZON)
    meta = {"template": template, "expected_maneuver": expected}
    meta.update(extra or {})
    return Scenario(lanes=lanes, agents=tuple(agents), signals=tuple(signals), ego_start=ego0, ego_lane_id=ego_lane,
                    ego_ground_truth=gt, dt=DT, history_steps=HISTORY, horizon_steps=HORIZON, name=name, meta=meta)


def _back_extrapolate(x_now: float, speeds) -> float:
    """Track start position so that the agent is at ``x_now`` at the current step."""
    return x_now - float(np.sum(np.asarray(speeds)[:HISTORY] * DT))


def slow_lv(rng, name):
    lanes = straight_lanes(2)
    ego_x, ego_v = 60.0, rng.uniform(10.0, 13.0)
    lv_v = rng.uniform(3.0, 6.0)
    lv_gap = rng.uniform(25.0, 35.0)
    speeds = np.full(TRACK_STEPS, lv_v)
    agents = [_vehicle(1, straight_track(_back_extrapolate(ego_x + lv_gap, speeds), lane_y(1), speeds))]
    far_v = rng.uniform(13.0, 15.0)
    far = np.full(TRACK_STEPS, far_v)
    agents.append(_vehicle(2, straight_track(_back_extrapolate(ego_x + rng.uniform(70.0, 90.0), far), lane_y(2), far)))
    return _make(name, "slow_lv", lanes, agents, [], 1, ego_x, ego_v, 1, 2, {"lv_speed": lv_v})


def blocked_adjacent(rng, name):
    lanes = straight_lanes(2)
    ego_x, ego_v = 60.0, rng.uniform(10.0, 12.0)
    lv_v = ego_v - rng.uniform(1.0, 2.5)
    lv_gap = rng.uniform(28.0, 36.0)
    speeds = np.full(TRACK_STEPS, lv_v)
    agents = [_vehicle(1, straight_track(_back_extrapolate(ego_x + lv_gap, speeds), lane_y(1), speeds))]
    platoon_v = lv_v + rng.uniform(-0.5, 0.5)
    spacing = rng.uniform(9.0, 11.0)
    offset = rng.uniform(-3.0, 3.0)
    pv = np.full(TRACK_STEPS, platoon_v)
    for j, rel in enumerate(np.arange(-3, 5) * spacing + offset):
        agents.append(_vehicle(10 + j, straight_track(_back_extrapolate(ego_x + rel, pv), lane_y(2), pv)))
    return _make(name, "blocked_adjacent", lanes, agents, [], 1, ego_x, ego_v, 0, 1, {"lv_speed": lv_v})


def red_light(rng, name):
    lanes = straight_lanes(1)
    ego_x, ego_v = 60.0, rng.uniform(8.0, 12.0)
    stop_s = ego_x + rng.uniform(45.0, 60.0)
    signals = [TrafficSignal(1, float(stop_s), ("red",) * TRACK_STEPS)]
    return _make(name, "red_light", lanes, [], signals, 1, ego_x, ego_v, 0, 1, {"stop_line_s": float(stop_s)})


def car_following(rng, name):
    lanes = straight_lanes(1)
    ego_x, ego_v = 60.0, rng.uniform(8.0, 11.0)
    base = rng.uniform(7.0, 10.0)
    amp = rng.uniform(0.5, 1.5)
    period = rng.uniform(6.0, 10.0)
    t = np.arange(TRACK_STEPS) * DT
    speeds = base + amp * np.sin(2 * np.pi * t / period)
    gap = rng.uniform(22.0, 30.0)
    agents = [_vehicle(1, straight_track(_back_extrapolate(ego_x + gap, speeds), lane_y(1), speeds))]
    return _make(name, "car_following", lanes, agents, [], 1, ego_x, ego_v, 0, 1, {"lv_speed": float(base)})


def yielding(rng, name):
    lanes = straight_lanes(1)
    ego_x, ego_v = 60.0, rng.uniform(8.0, 10.0)
    cross_x = ego_x + rng.uniform(35.0, 45.0)
    ped_v = rng.uniform(1.0, 1.4)
    y_now = -LANE_WIDTH / 2 - rng.uniform(2.0, 3.0)
    y0 = y_now - ped_v * DT * HISTORY
    ys = y0 + ped_v * DT * np.arange(TRACK_STEPS)
    poses = np.stack([np.full(TRACK_STEPS, cross_x), ys, np.full(TRACK_STEPS, np.pi / 2),
                      np.full(TRACK_STEPS, ped_v)], axis=1)
    agents = [AgentTrack(1, "pedestrian", 0.6, 0.6, poses)]
    return _make(name, "yielding", lanes, agents, [], 1, ego_x, ego_v, 0, 1, {"crossing_x": float(cross_x)})


GENERATORS = {
    "slow_lv": slow_lv,
    "blocked_adjacent": blocked_adjacent,
    "red_light": red_light,
    "car_following": car_following,
    "yielding": yielding,
}


def generate_suite(seed: int = 0, per_template: int = 4) -> list[Scenario]:
    """``per_template`` draws of each template from one seeded generator, in template order."""
    rng = np.random.default_rng(seed)
    out = []
    for template in TEMPLATES:
        for i in range(per_template):
            out.append(GENERATORS[template](rng, f"{template}_{i:02d}"))
    return out


def write_suite(out_dir, seed: int = 0, per_template: int = 4) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for sc in generate_suite(seed, per_template):
        path = out_dir / f"{sc.name}.json"
        save_scenario(sc, path)
        paths.append(path)
    return paths


def bundled_suite() -> list[Scenario]:
    """The 20-scenario suite shipped with the package (seed 0, four draws per template)."""
    return load_suite(BUNDLED_SUITE)


def load_suite(directory) -> list[Scenario]:
    """All scenario files of a directory in name order; run manifests are skipped."""
    paths = sorted(p for p in Path(directory).glob("*.json") if not p.name.endswith("manifest.json"))
    return [load_scenario(p) for p in paths]


def template_draws(template: str, n: int, seed: int = 0) -> list[Scenario]:
    rng = np.random.default_rng(seed)
    return [GENERATORS[template](rng, f"{template}_{i:02d}") for i in range(n)]
