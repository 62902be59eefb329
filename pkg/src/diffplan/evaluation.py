"""Open-loop and closed-loop (log-replay) evaluation and the metric suite."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from diffplan.decision import compliance_check
from diffplan.initializer import default_params
from diffplan.planner import Planner
from diffplan.solver import SolverError
from diffplan.vehicle import VehicleParams, clamp_controls, step as vehicle_step
from diffplan.world import Scenario, nearest_lane, target_lane

EPISODE_SCHEMA = "episode-v1"
METRICS_SCHEMA = "metrics-v1"
TERMINATIONS = ("completed", "collision", "off_drivable", "solver_failure")
DEFAULT_EPISODE_STEPS = 150
SAFETY_CAP = 100.0
ERROR_STEPS = (10, 30, 50)
OLC_MIN_STEPS = 10


# -- geometry ----------------------------------------------------------------

def box_corners(x, y, heading, length, width) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def rectangles_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quadrilaterals given as (4, 2) corners."""
    for poly in (a, b):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = a @ axis, b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def collision_check(ego_pose, ego_dims, agents) -> bool:
    """True iff the ego box overlaps any agent box; ``agents`` holds ``(pose, length, width)``."""
    ego_box = box_corners(ego_pose[0], ego_pose[1], ego_pose[2], *ego_dims)
    for pose, length, width in agents:
        if rectangles_overlap(ego_box, box_corners(pose[0], pose[1], pose[2], length, width)):
            return True
    return False


def safety_index(ego, agents, lanes, lane_id: int | None = None) -> float:
    """Distance to the most relevant agent divided by ``max(v, 0.1)``.

    Most relevant: nearest agent ahead inside the ego lane corridor, else
    the nearest agent overall.  Without agents the index is capped at 100 s.
    """
    if not agents:
        return SAFETY_CAP
    ego = np.asarray(ego, dtype=float)
    by_id = {ln.id: ln for ln in lanes}
    lane = by_id[lane_id if lane_id is not None else nearest_lane(ego[:2], lanes)]
    s_ego = lane.project(ego[:2]).s
    dists = [float(np.hypot(p[0] - ego[0], p[1] - ego[1])) for p, _, _ in agents]
    ahead = []
    for (pose, _, _), dist in zip(agents, dists):
        fp = lane.project(np.asarray(pose[:2]))
        if fp.s > s_ego and abs(fp.d) < lane.width / 2:
            ahead.append(dist)
    dist = min(ahead) if ahead else min(dists)
    return dist / max(float(ego[3]), 0.1)


def off_route(point, lanes) -> bool:
    """Center farther than half a lane width outside every lane."""
    point = np.asarray(point, dtype=float)
    return all(abs(ln.project(point).d) > ln.width for ln in lanes)


def lateral_acceleration(v, delta, wheelbase: float):
    return np.asarray(v) ** 2 * np.tan(np.asarray(delta)) / wheelbase


# -- open loop -----------------------------------------------------------------

def _agents_at(scenario: Scenario, step: int):
    return [(pose, a.length, a.width) for a, pose in scenario.agents_at(step)]


def planning_errors(states, ground_truth) -> dict:
    """Distance between planned and recorded ego positions at 1 s, 3 s and 5 s."""
    out = {}
    for k in ERROR_STEPS:
        if k < len(states) and k < len(ground_truth):
            out[f"planning_error_{k // 10}s"] = float(np.hypot(*(states[k, :2] - ground_truth[k, :2])))
    return out


def open_loop_eval(scenario: Scenario, planner: Planner) -> dict:
    """One solve at the current step, compared with the recorded ego."""
    record = {"scenario": scenario.name, "solver_failure": False}
    try:
        outcome = planner.plan(scenario)
    except SolverError as exc:
        record.update(solver_failure=True, error=str(exc))
        return record
    res = outcome.result
    states = res.trajectory.states
    params = default_params(scenario)
    errors = planning_errors(states, scenario.ego_ground_truth)
    H = scenario.current_step
    collided = any(collision_check(states[k, :3], (params.length, params.width), _agents_at(scenario, H + k))
                   for k in range(1, len(states)))
    u = res.variables.u
    record.update(
        maneuver=int(res.maneuver), converged=bool(res.converged), iterations=int(res.iterations_used),
        initial_cost=res.initial_cost, final_cost=res.final_cost,
        compliant=compliance_check(res.variables.b).compliant, collision=bool(collided),
        off_route=bool(any(off_route(p, scenario.lanes) for p in states[:, :2])),
        avg_acc=float(np.mean(np.abs(u[:, 0]))),
        avg_lat_acc=float(np.mean(np.abs(lateral_acceleration(states[:-1, 3], u[:, 1], params.wheelbase)))),
        **errors,
    )
    return record


def aggregate_open_loop(records) -> dict:
    records = list(records)
    if not records:
        raise ValueError("no open-loop records")
    ok = [r for r in records if not r["solver_failure"]]
    out = {"n_scenarios": len(records), "solver_failures": len(records) - len(ok)}
    for key in ("planning_error_1s", "planning_error_3s", "planning_error_5s", "avg_acc", "avg_lat_acc"):
        vals = [r[key] for r in ok if key in r]
        out[key] = float(np.mean(vals)) if vals else None
    for key, name in (("collision", "collision_rate"), ("off_route", "off_route_rate"),
                      ("converged", "convergence_rate"), ("compliant", "compliance_rate")):
        out[name] = 100.0 * sum(bool(r.get(key)) for r in ok) / len(records)
    return out


# -- closed loop -----------------------------------------------------------------

@dataclass
class EpisodeLog:
    scenario: str
    initial_lane: int
    ego_dims: tuple
    wheelbase: float
    dt: float
    steps: list = field(default_factory=list)  # dicts with ego, control, maneuver, ...
    final_ego: list | None = None
    termination: str = "completed"
    planner: dict = field(default_factory=dict)
    initial_plan_errors: dict = field(default_factory=dict)  # first plan vs recorded ego

    @property
    def length(self) -> int:
        return len(self.steps)

    def states(self) -> np.ndarray:
        rows = [s["ego"] for s in self.steps] + ([self.final_ego] if self.final_ego is not None else [])
        return np.array(rows, dtype=float).reshape(-1, 4)

    def controls(self) -> np.ndarray:
        return np.array([s["control"] for s in self.steps], dtype=float).reshape(-1, 2)

    def to_jsonl(self) -> str:
        header = {"type": "header", "schema": EPISODE_SCHEMA, "scenario": self.scenario,
                  "initial_lane": self.initial_lane, "ego_dims": list(self.ego_dims), "wheelbase": self.wheelbase,
                  "dt": self.dt, "planner": self.planner,
                  "initial_plan_errors": self.initial_plan_errors}
        lines = [json.dumps(header, sort_keys=True)]
        for s in self.steps:
            lines.append(json.dumps({"type": "step", **s}, sort_keys=True))
        lines.append(json.dumps({"type": "end", "termination": self.termination, "final_ego": self.final_ego,
                                 "length": self.length}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_jsonl(cls, text: str) -> "EpisodeLog":
        lines = [json.loads(ln) for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].get("type") != "header" or lines[0].get("schema") != EPISODE_SCHEMA:
            raise ValueError("not an episode-v1 log")
        h = lines[0]
        log = cls(h["scenario"], h["initial_lane"], tuple(h["ego_dims"]), h["wheelbase"], h["dt"],
                  planner=h.get("planner", {}), initial_plan_errors=h.get("initial_plan_errors", {}))
        for entry in lines[1:]:
            kind = entry.pop("type")
            if kind == "step":
                log.steps.append(entry)
            elif kind == "end":
                log.termination = entry["termination"]
                log.final_ego = entry["final_ego"]
        if log.termination not in TERMINATIONS:
            raise ValueError(f"unknown termination {log.termination!r}")
        return log

    @classmethod
    def load(cls, path) -> "EpisodeLog":
        return cls.from_jsonl(Path(path).read_text(encoding="utf-8"))


def verify_log_dynamics(log: EpisodeLog) -> bool:
    """Every consecutive pair of logged ego states satisfies the step model exactly."""
    params = VehicleParams(length=log.ego_dims[0], width=log.ego_dims[1], wheelbase=log.wheelbase, dt=log.dt)
    states, controls = log.states(), log.controls()
    return all(np.array_equal(vehicle_step(states[k], controls[k], params), states[k + 1])
               for k in range(min(len(controls), len(states) - 1)))


def closed_loop_run(scenario: Scenario, planner: Planner, steps: int = DEFAULT_EPISODE_STEPS) -> EpisodeLog:
    """Replan every step, apply the first control, replay agents, check termination."""
    params = default_params(scenario)
    log = EpisodeLog(scenario.name, scenario.ego_lane_id, (params.length, params.width), params.wheelbase, params.dt,
                     planner=planner.describe())
    x = scenario.ego_start.copy()
    H = scenario.current_step
    sigma = scenario.ego_lane_id
    warm = None
    for k in range(steps):
        t = H + k
        if k > 0:
            sigma = nearest_lane(x[:2], scenario.lanes)
        try:
            outcome = planner.plan(scenario, step=t, ego_state=x, sigma=sigma, warm=warm)
        except SolverError as exc:
            log.termination = "solver_failure"
            log.final_ego = x.tolist()
            log.planner["failure"] = str(exc)
            return log
        res = outcome.result
        if k == 0:
            log.initial_plan_errors = planning_errors(res.trajectory.states, scenario.ego_ground_truth)
        u = clamp_controls(res.variables.u[0], params)
        log.steps.append({
            "step": k, "ego": x.tolist(), "control": u.tolist(), "maneuver": int(res.maneuver),
            "lane": int(sigma), "target_lane": target_lane(sigma, int(res.maneuver), scenario.lanes),
            "converged": bool(res.converged), "iterations": int(res.iterations_used),
            "cost": res.final_cost, "compliant": compliance_check(res.variables.b).compliant,
            "agents": {str(a.id): pose.tolist() for a, pose in scenario.agents_at(t)},
            "signals": {str(s.lane_id): ("red" if s.is_red(t) else "green") for s in scenario.signals},
        })
        warm = (res.variables.u, sigma, int(res.maneuver))
        x = vehicle_step(x, u, params)
        if collision_check(x[:3], (params.length, params.width), _agents_at(scenario, t + 1)):
            log.termination = "collision"
            break
        if off_route(x[:2], scenario.lanes):
            log.termination = "off_drivable"
            break
    log.final_ego = x.tolist()
    return log


# -- metrics -----------------------------------------------------------------------

@dataclass
class Metrics:
    n_episodes: int
    collision_rate: float
    safety_index: float
    progress: float
    avg_speed: float
    avg_acc: float
    avg_lat_acc: float
    off_route_rate: float
    olc_rate: float
    completion_rate: float
    convergence_rate: float
    compliance_rate: float
    planning_error_1s: float | None = None
    planning_error_3s: float | None = None
    planning_error_5s: float | None = None

    def to_dict(self) -> dict:
        return {"schema": METRICS_SCHEMA, **asdict(self)}

    def to_csv(self, label: str = "suite") -> str:
        d = asdict(self)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["suite"] + list(d))
        writer.writerow([label] + ["" if v is None else v for v in d.values()])
        return buf.getvalue()


def progress(log: EpisodeLog, scenario: Scenario) -> float:
    """Arc-length displacement along the initial lane."""
    lane = scenario.lane(log.initial_lane)
    states = log.states()
    return float(lane.project(states[-1, :2]).s - lane.project(states[0, :2]).s)


def sustained_lane_change(maneuvers, targets, min_steps: int = OLC_MIN_STEPS) -> bool:
    """A non-zero maneuver whose targeted lane is then held for ``min_steps`` steps.

    The maneuver is relative to the current lane, which switches halfway
    through a lane change, so the run is tracked on the targeted lane.
    """
    goal, run = None, 0
    for m, tgt in zip(maneuvers, targets):
        if goal is not None and tgt == goal:
            run += 1
        elif m != 0:
            goal, run = tgt, 1
        else:
            goal, run = None, 0
        if run >= min_steps:
            return True
    return False


def episode_summary(log: EpisodeLog, scenario: Scenario) -> dict:
    states, controls = log.states(), log.controls()
    n = len(controls)
    lanes = scenario.lanes
    si = [safety_index(s["ego"], [(np.array(p), a.length, a.width) for a in scenario.agents
                                  for aid, p in s["agents"].items() if int(aid) == a.id], lanes, s["lane"])
          for s in log.steps]
    return {
        "scenario": log.scenario,
        "termination": log.termination,
        "length": n,
        "progress": progress(log, scenario),
        "avg_speed": float(np.mean(states[:, 3])),
        "avg_acc": float(np.mean(np.abs(controls[:, 0]))) if n else 0.0,
        "avg_lat_acc": float(np.mean(np.abs(lateral_acceleration(states[:n, 3], controls[:, 1], log.wheelbase))))
        if n else 0.0,
        "safety_index": float(np.mean(si)) if si else SAFETY_CAP,
        "off_route": bool(any(off_route(p, lanes) for p in states[:, :2])),
        "olc": sustained_lane_change([s["maneuver"] for s in log.steps], [s["target_lane"] for s in log.steps]),
        "solves": n,
        "converged": sum(bool(s["converged"]) for s in log.steps),
        "compliant": sum(bool(s["compliant"]) for s in log.steps),
        "feasible": verify_log_dynamics(log),
    }


def aggregate_metrics(logs, scenarios) -> Metrics:
    """Suite metrics; convergence and compliance are pooled over all planning solves."""
    logs = list(logs)
    if not logs:
        raise ValueError("aggregate_metrics needs at least one episode")
    by_name = {sc.name: sc for sc in scenarios}
    rows = [episode_summary(log, by_name[log.scenario]) for log in logs]
    n = len(rows)
    solves = sum(r["solves"] for r in rows)
    pct = lambda c: 100.0 * c / n  # noqa: E731
    return Metrics(
        n_episodes=n,
        collision_rate=pct(sum(r["termination"] == "collision" for r in rows)),
        safety_index=float(np.mean([r["safety_index"] for r in rows])),
        progress=float(np.mean([r["progress"] for r in rows])),
        avg_speed=float(np.mean([r["avg_speed"] for r in rows])),
        avg_acc=float(np.mean([r["avg_acc"] for r in rows])),
        avg_lat_acc=float(np.mean([r["avg_lat_acc"] for r in rows])),
        off_route_rate=pct(sum(r["off_route"] for r in rows)),
        olc_rate=pct(sum(r["olc"] for r in rows)),
        completion_rate=pct(sum(r["termination"] == "completed" for r in rows)),
        convergence_rate=100.0 * sum(r["converged"] for r in rows) / solves if solves else 0.0,
        compliance_rate=100.0 * sum(r["compliant"] for r in rows) / solves if solves else 0.0,
        **{key: _mean_or_none([log.initial_plan_errors.get(key) for log in logs])
           for key in ("planning_error_1s", "planning_error_3s", "planning_error_5s")},
    )


def _mean_or_none(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None
