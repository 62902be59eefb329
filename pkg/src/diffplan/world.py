"""Scenario data model, lane geometry and LV/NV queries.

Lane ids grow from left (1) to right; maneuver ``alpha`` in {-1, 0, 1}
moves from lane ``sigma`` to its left neighbour, itself, or its right
neighbour.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

SCENARIO_SCHEMA = "scenario-v1"
AGENT_KINDS = ("vehicle", "pedestrian", "cyclist")
LV_LOOKAHEAD = 100.0
NV_LOOKBEHIND = 100.0


class ScenarioError(ValueError):
    """Base class for scenario load failures."""


class ScenarioParseError(ScenarioError):
    """The document is not well-formed ``scenario-v1`` JSON."""


class ScenarioValidationError(ScenarioError):
    """The document parses but violates a scenario invariant."""


class FrenetPose(NamedTuple):
    s: float
    d: float
    lane_id: int


@dataclass(frozen=True, eq=False)
class Lane:
    id: int
    centerline: np.ndarray
    width: float = 3.5
    speed_limit: float = 15.0
    left_neighbor: int | None = None
    right_neighbor: int | None = None
    _s: np.ndarray = field(init=False, repr=False)
    _tangent: np.ndarray = field(init=False, repr=False)
    _seg_len: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.array(self.centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ScenarioValidationError(f"lane {self.id}: centerline needs at least 2 points of shape (2,)")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0.0):
            raise ScenarioValidationError(f"lane {self.id}: consecutive centerline points must be distinct")
        if not self.width > 0 or not self.speed_limit > 0:
            raise ScenarioValidationError(f"lane {self.id}: width and speed_limit must be positive")
        pts.setflags(write=False)
        object.__setattr__(self, "centerline", pts)
        object.__setattr__(self, "_seg_len", seg_len)
        object.__setattr__(self, "_tangent", seg / seg_len[:, None])
        object.__setattr__(self, "_s", np.concatenate([[0.0], np.cumsum(seg_len)]))

    @property
    def length(self) -> float:
        return float(self._s[-1])

    def project(self, point) -> FrenetPose:
        s, d = self.project_points(np.asarray(point, dtype=float)[None, :])
        return FrenetPose(float(s[0]), float(d[0]), self.id)

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Clamped Frenet projection of ``(k, 2)`` points; ``d`` > 0 is left of travel."""
        seg, t, dist = self._closest(points)
        s = self._s[seg] + t * self._seg_len[seg]
        tang = self._tangent[seg]
        rel = points - self.centerline[seg]
        cross = tang[:, 0] * rel[:, 1] - tang[:, 1] * rel[:, 0]
        sign = np.where(cross >= 0.0, 1.0, -1.0)
        return s, sign * dist

    def frenet_frame(self, points: np.ndarray):
        """Closest segment anchor, start arc length and unit tangent for each point.

        With these held fixed, ``s = s0 + (p - a) . t`` and ``d = t x (p - a)``
        are affine in ``p`` and extend linearly past the lane ends.
        """
        seg, _, _ = self._closest(points)
        return self.centerline[seg], self._s[seg], self._tangent[seg]

    def _closest(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        a = self.centerline[:-1]
        # segment choice from expanded squared distances (cheap, cancellation-prone) ...
        proj = points @ self._tangent.T - np.sum(a * self._tangent, axis=1)
        rel2 = np.sum(points ** 2, axis=1)[:, None] - 2.0 * points @ a.T + np.sum(a ** 2, axis=1)[None, :]
        along = np.clip(proj, 0.0, self._seg_len)
        seg = np.argmin(rel2 - 2.0 * along * proj + along ** 2, axis=1)
        # ... then the exact foot point on the chosen segment
        rel = points - a[seg]
        tang = self._tangent[seg]
        t = np.clip(np.sum(rel * tang, axis=1) / self._seg_len[seg], 0.0, 1.0)
        off = rel - (t * self._seg_len[seg])[:, None] * tang
        return seg, t, np.hypot(off[:, 0], off[:, 1])

    def point_at(self, s: float | np.ndarray, d: float | np.ndarray = 0.0):
        """Cartesian point and heading at arc length ``s``; extrapolates past the ends."""
        s = np.asarray(s, dtype=float)
        seg = np.clip(np.searchsorted(self._s, s, side="right") - 1, 0, len(self._seg_len) - 1)
        tang = self._tangent[seg]
        base = self.centerline[seg] + (s - self._s[seg])[..., None] * tang
        normal = np.stack([-tang[..., 1], tang[..., 0]], axis=-1)
        xy = base + np.asarray(d, dtype=float)[..., None] * normal
        heading = np.arctan2(tang[..., 1], tang[..., 0])
        return xy, heading


class AgentSnapshot(NamedTuple):
    agent_id: int
    kind: str
    x: float
    y: float
    heading: float
    speed: float
    length: float
    width: float
    s_gap: float


@dataclass(frozen=True, eq=False)
class AgentTrack:
    id: int
    kind: str
    length: float
    width: float
    poses: np.ndarray
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise ScenarioValidationError(f"agent {self.id}: unknown kind {self.kind!r}")
        if not self.length > 0 or not self.width > 0:
            raise ScenarioValidationError(f"agent {self.id}: length and width must be positive")
        poses = np.array(self.poses, dtype=float).reshape(-1, 4)
        poses.setflags(write=False)
        object.__setattr__(self, "poses", poses)

    def pose_at(self, step: int) -> np.ndarray | None:
        if 0 <= step < len(self.poses):
            return self.poses[step]
        return None


@dataclass(frozen=True, eq=False)
class TrafficSignal:
    lane_id: int
    stop_line_s: float
    states: tuple[str, ...]

    def is_red(self, step: int) -> bool:
        if not self.states:
            return False
        return self.states[min(max(step, 0), len(self.states) - 1)] == "red"


@dataclass(frozen=True, eq=False)
class Scenario:
    """A multi-lane scene.

    Agent poses are indexed by absolute step; ``history_steps`` is the index
    of the current time (when ``ego_start`` holds).  ``ego_ground_truth[k]``
    is the recorded ego state ``k`` steps after the current time.
    """

    lanes: tuple[Lane, ...]
    agents: tuple[AgentTrack, ...]
    signals: tuple[TrafficSignal, ...]
    ego_start: np.ndarray
    ego_lane_id: int
    ego_ground_truth: np.ndarray
    dt: float = 0.1
    history_steps: int = 20
    horizon_steps: int = 50
    ego_length: float = 4.8
    ego_width: float = 1.9
    name: str = "scenario"
    meta: dict = field(default_factory=dict)
    crosswalks: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "ego_start", np.array(self.ego_start, dtype=float).reshape(4))
        object.__setattr__(self, "ego_ground_truth", np.array(self.ego_ground_truth, dtype=float).reshape(-1, 4))
        ids = [lane.id for lane in self.lanes]
        if len(set(ids)) != len(ids):
            raise ScenarioValidationError("duplicate lane ids")
        known = set(ids)
        by_id = {lane.id: lane for lane in self.lanes}
        for lane in self.lanes:
            for attr, back in (("left_neighbor", "right_neighbor"), ("right_neighbor", "left_neighbor")):
                ref = getattr(lane, attr)
                if ref is None:
                    continue
                if ref not in known:
                    raise ScenarioValidationError(f"lane {lane.id}: {attr} references unknown lane {ref}")
                if getattr(by_id[ref], back) != lane.id:
                    raise ScenarioValidationError(f"lane {lane.id}: {attr} {ref} is not reciprocated")
        if self.ego_lane_id not in known:
            raise ScenarioValidationError(f"ego lane {self.ego_lane_id} does not exist")
        for sig in self.signals:
            if sig.lane_id not in known:
                raise ScenarioValidationError(f"signal references unknown lane {sig.lane_id}")
            if not 0.0 <= sig.stop_line_s <= by_id[sig.lane_id].length:
                raise ScenarioValidationError(f"signal on lane {sig.lane_id}: stop line outside the lane")
            bad = set(sig.states) - {"red", "green"}
            if bad:
                raise ScenarioValidationError(f"signal on lane {sig.lane_id}: unknown states {sorted(bad)}")
        ego_lane = by_id[self.ego_lane_id]
        if abs(ego_lane.project(self.ego_start[:2]).d) > ego_lane.width / 2:
            raise ScenarioValidationError("ego start lies outside its lane")
        if not self.dt > 0:
            raise ScenarioValidationError("dt must be positive")
        for agent in self.agents:
            if agent.timestamps is not None:
                gaps = np.diff(np.asarray(agent.timestamps, dtype=float))
                if len(gaps) and not np.allclose(gaps, self.dt, rtol=0, atol=1e-6):
                    raise ScenarioValidationError(f"agent {agent.id}: poses are not sampled every {self.dt} s")
        object.__setattr__(self, "_lanes_by_id", by_id)

    def lane(self, lane_id: int) -> Lane:
        return self._lanes_by_id[lane_id]

    @property
    def current_step(self) -> int:
        return self.history_steps

    def agents_at(self, step: int) -> list[tuple[AgentTrack, np.ndarray]]:
        out = []
        for agent in self.agents:
            pose = agent.pose_at(step)
            if pose is not None:
                out.append((agent, pose))
        return out


def project_to_frenet(point, lane: Lane) -> FrenetPose:
    return lane.project(point)


def nearest_lane(point, lanes) -> int:
    """Lane minimizing ``|d|``; ties go to the smaller id."""
    if not lanes:
        raise ValueError("nearest_lane needs at least one lane")
    point = np.asarray(point, dtype=float)
    best = None
    for lane in sorted(lanes, key=lambda ln: ln.id):
        d = abs(lane.project(point).d)
        if best is None or d < best[0]:
            best = (d, lane.id)
    return best[1]


def target_lane(sigma: int, alpha: int, lanes) -> int | None:
    by_id = lanes if isinstance(lanes, dict) else {ln.id: ln for ln in lanes}
    lane = by_id[sigma]
    if alpha == 0:
        return sigma
    if alpha == -1:
        return lane.left_neighbor
    if alpha == 1:
        return lane.right_neighbor
    raise ValueError(f"maneuver must be -1, 0 or 1, got {alpha}")


def _snapshots_on_lane(scenario: Scenario, lane: Lane, ego_xy, step: int, poses=None):
    """Vehicle snapshots inside ``lane`` (|d| < width/2) with their s-gap to the ego."""
    s_ego = lane.project(ego_xy).s
    out = []
    entries = poses if poses is not None else [(a, a.pose_at(step)) for a in scenario.agents]
    for agent, pose in entries:
        if pose is None or agent.kind != "vehicle":
            continue
        fp = lane.project(pose[:2])
        if abs(fp.d) >= lane.width / 2:
            continue
        out.append(AgentSnapshot(agent.id, agent.kind, *map(float, pose), agent.length, agent.width, fp.s - s_ego))
    return out


def identify_lv(scenario: Scenario, lane_id: int, ego_state, step: int, poses=None) -> AgentSnapshot | None:
    """Nearest vehicle ahead of the ego on ``lane_id`` within the look-ahead window."""
    lane = scenario.lane(lane_id)
    ahead = [a for a in _snapshots_on_lane(scenario, lane, np.asarray(ego_state)[:2], step, poses)
             if 0.0 < a.s_gap <= LV_LOOKAHEAD]
    return min(ahead, key=lambda a: (a.s_gap, a.agent_id), default=None)


def identify_nv(scenario: Scenario, lane_id: int, ego_state, step: int, poses=None) -> AgentSnapshot | None:
    """Nearest vehicle behind (s-gap <= 0) the ego on ``lane_id`` within the look-behind window."""
    lane = scenario.lane(lane_id)
    behind = [a for a in _snapshots_on_lane(scenario, lane, np.asarray(ego_state)[:2], step, poses)
              if -NV_LOOKBEHIND <= a.s_gap <= 0.0]
    return min(behind, key=lambda a: (-a.s_gap, a.agent_id), default=None)


# -- serialization ---------------------------------------------------------

def _require(obj, key, path):
    if not isinstance(obj, dict) or key not in obj:
        raise ScenarioParseError(f"missing field {path}.{key}")
    return obj[key]


def _floats(value, path, shape_tail=None):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioParseError(f"field {path}: expected numbers ({exc})") from None
    if shape_tail is not None and (arr.ndim != len(shape_tail) + 1 or arr.shape[1:] != shape_tail):
        raise ScenarioParseError(f"field {path}: expected rows of length {shape_tail[0]}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ScenarioParseError(f"field {path}: non-finite value")
    return arr


def scenario_from_dict(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioParseError("scenario document must be a JSON object")
    schema = doc.get("schema", SCENARIO_SCHEMA)
    if schema != SCENARIO_SCHEMA:
        raise ScenarioParseError(f"unsupported schema {schema!r}")
    meta = _require(doc, "meta", "$")
    lanes = []
    for i, ld in enumerate(_require(doc, "lanes", "$")):
        p = f"$.lanes[{i}]"
        lanes.append(Lane(
            id=int(_require(ld, "id", p)),
            centerline=_floats(_require(ld, "centerline", p), p + ".centerline", (2,)),
            width=float(ld.get("width", 3.5)),
            speed_limit=float(ld.get("speed_limit", 15.0)),
            left_neighbor=ld.get("left_neighbor"),
            right_neighbor=ld.get("right_neighbor"),
        ))
    agents = []
    for i, ad_ in enumerate(_require(doc, "agents", "$")):
        p = f"$.agents[{i}]"
        ts = ad_.get("timestamps")
        agents.append(AgentTrack(
            id=int(_require(ad_, "id", p)),
            kind=str(ad_.get("kind", "vehicle")),
            length=float(ad_.get("length", 4.8)),
            width=float(ad_.get("width", 1.9)),
            poses=_floats(_require(ad_, "poses", p), p + ".poses", (4,)),
            timestamps=None if ts is None else _floats(ts, p + ".timestamps"),
        ))
    signals = []
    for i, sd in enumerate(_require(doc, "signals", "$")):
        p = f"$.signals[{i}]"
        signals.append(TrafficSignal(
            lane_id=int(_require(sd, "lane_id", p)),
            stop_line_s=float(_require(sd, "stop_line_s", p)),
            states=tuple(str(s) for s in _require(sd, "states", p)),
        ))
    ego = _require(doc, "ego", "$")
    extra_meta = {k: v for k, v in meta.items() if k not in ("dt", "history_steps", "horizon_steps", "name")}
    return Scenario(
        lanes=tuple(lanes),
        agents=tuple(agents),
        signals=tuple(signals),
        ego_start=_floats(_require(ego, "start", "$.ego"), "$.ego.start"),
        ego_lane_id=int(_require(ego, "lane_id", "$.ego")),
        ego_ground_truth=_floats(ego.get("ground_truth", [ego["start"]]), "$.ego.ground_truth", (4,)),
        ego_length=float(ego.get("length", 4.8)),
        ego_width=float(ego.get("width", 1.9)),
        dt=float(_require(meta, "dt", "$.meta")),
        history_steps=int(_require(meta, "history_steps", "$.meta")),
        horizon_steps=int(_require(meta, "horizon_steps", "$.meta")),
        name=str(meta.get("name", "scenario")),
        meta=extra_meta,
        crosswalks=tuple(doc.get("crosswalks", ())),
    )


def scenario_to_dict(scenario: Scenario) -> dict:
    def nn(v):
        return None if v is None else int(v)

    doc = {
        "schema": SCENARIO_SCHEMA,
        "meta": {"dt": scenario.dt, "history_steps": scenario.history_steps,
                 "horizon_steps": scenario.horizon_steps, "name": scenario.name, **scenario.meta},
        "lanes": [{"id": ln.id, "centerline": ln.centerline.tolist(), "width": ln.width,
                   "speed_limit": ln.speed_limit, "left_neighbor": nn(ln.left_neighbor),
                   "right_neighbor": nn(ln.right_neighbor)} for ln in scenario.lanes],
        "agents": [],
        "signals": [{"lane_id": s.lane_id, "stop_line_s": s.stop_line_s, "states": list(s.states)}
                    for s in scenario.signals],
        "ego": {"start": scenario.ego_start.tolist(), "lane_id": scenario.ego_lane_id,
                "length": scenario.ego_length, "width": scenario.ego_width,
                "ground_truth": scenario.ego_ground_truth.tolist()},
    }
    for a in scenario.agents:
        entry = {"id": a.id, "kind": a.kind, "length": a.length, "width": a.width, "poses": a.poses.tolist()}
        if a.timestamps is not None:
            entry["timestamps"] = np.asarray(a.timestamps).tolist()
        doc["agents"].append(entry)
    if scenario.crosswalks:
        doc["crosswalks"] = list(scenario.crosswalks)
    return doc


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def load_scenario(source) -> Scenario:
    """Load from a path, a JSON string, or an already-parsed dict."""
    if isinstance(source, dict):
        return scenario_from_dict(source)
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        try:
            text = Path(source).read_text(encoding="utf-8")
        except OSError as exc:
            raise ScenarioParseError(f"cannot read {source}: {exc}") from None
    else:
        text = source
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return scenario_from_dict(doc)


def save_scenario(scenario: Scenario, path=None) -> str:
    text = canonical_json(scenario_to_dict(scenario))
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(a, dtype=float), 2 * math.pi)
