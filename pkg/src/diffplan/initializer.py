"""Candidate futures that seed the solver: agent predictions, ego controls, decision priors.

Three producers share one output type:

* ``heuristic``: one future per available maneuver, ego controls from a
  proportional lane-tracking rule, decision prior from a softmax over the
  coarse cost of each future;
* ``constant-velocity``: the same agent predictions with zero ego controls
  and a uniform decision prior (the ablation baseline);
* ``toy``: a small affine-plus-tanh map from scene features to decision
  logits, constant control offsets and future scores, trained by
  :mod:`diffplan.training`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from diffplan import ad
from diffplan.decision import ALPHAS, init_decisions, normalize_probabilities, one_hot
from diffplan.residuals import CostWeights, PlanContext, build_context, total_cost
from diffplan.vehicle import VehicleParams, rollout_states
from diffplan.world import (LV_LOOKAHEAD, Scenario, identify_lv, identify_nv, nearest_lane, target_lane,
                            wrap_angle)

N_FEATURES = 14
N_OUTPUTS = 8  # 3 decision logits, 2 control offsets, 3 future scores
OUTPUT_GAIN = np.array([5.0, 5.0, 5.0, 2.0, 0.1, 5.0, 5.0, 5.0])
MISSING_GAP = 100.0
GAP_SCALE = 50.0
SPEED_SCALE = 15.0
ON_LANE_HEADING = np.pi / 4


@dataclass
class Future:
    alpha: int
    u0: object  # (T, 2) ego controls, may be a dual
    ego: object  # (T, 4) ego states reached by u0
    agents: np.ndarray  # (N, T, 4)
    score: object
    d: object  # (3,) decision probabilities shared by all futures


@dataclass
class Initialization:
    ctx: PlanContext
    futures: list
    scores: object  # (K,)
    d: object  # (3,)
    u_init: object  # (T, 2)
    b_init: object  # (T, 3)
    chosen: int  # index of the future whose controls seed the plan
    features: np.ndarray | None = None


# -- agent prediction ------------------------------------------------------

def constant_velocity_predict(scenario: Scenario, step: int, T: int, agent_ids=None):
    """Constant-speed predictions ``(ids, (N, T, 4))`` for agents present at ``step``.

    Agents inside a lane and roughly aligned with it advance along the lane
    at constant arc speed, keeping their lateral offset; others move straight
    along their heading.
    """
    present = [(a, a.pose_at(step)) for a in scenario.agents]
    present = [(a, p) for a, p in present if p is not None and (agent_ids is None or a.id in agent_ids)]
    ids = tuple(a.id for a, _ in present)
    preds = np.zeros((len(present), T, 4))
    k = np.arange(1, T + 1)
    for n, (agent, pose) in enumerate(present):
        x, y, th, v = pose
        lane = scenario.lane(nearest_lane(pose[:2], scenario.lanes))
        fp = lane.project(pose[:2])
        _, lane_heading = lane.point_at(fp.s)
        aligned = abs(wrap_angle(th - float(lane_heading))) < ON_LANE_HEADING
        if abs(fp.d) <= lane.width / 2 and aligned:
            s = fp.s + v * scenario.dt * k
            xy, heading = lane.point_at(s, fp.d)
            preds[n, :, :2] = xy
            preds[n, :, 2] = heading
        else:
            preds[n, :, 0] = x + v * np.cos(th) * scenario.dt * k
            preds[n, :, 1] = y + v * np.sin(th) * scenario.dt * k
            preds[n, :, 2] = th
        preds[n, :, 3] = v
    return ids, preds


# -- ego heuristic -----------------------------------------------------------

def _lane_speed_target(lane, s_ego, v, k, scenario, step, agent_s, agent_v, params):
    """Target speed on ``lane``: speed limit, capped for a leader and a red stop line."""
    target = lane.speed_limit
    if agent_s is not None:
        gap = agent_s - s_ego - params.length - 2.0 - 1.0 * v
        target = min(target, max(agent_v + 0.5 * gap, 0.0))
    for sig in scenario.signals:
        if sig.lane_id == lane.id and s_ego < sig.stop_line_s and sig.is_red(step + k):
            room = max(sig.stop_line_s - 1.0 - s_ego, 0.0)
            target = min(target, np.sqrt(2.0 * 2.5 * room))
    return target


def lane_tracking_controls(scenario: Scenario, step: int, ego, lane_id: int, T: int, params: VehicleParams,
                           agent_ids=(), predictions=None):
    """Pure-pursuit steering toward ``lane_id`` with a proportional speed rule."""
    lane = scenario.lane(lane_id)
    x = np.array(ego, dtype=float)
    u = np.zeros((T, 2))
    leader = None
    if predictions is not None and len(agent_ids):
        current = [(a, a.pose_at(step)) for a in scenario.agents if a.id in agent_ids]
        lv = identify_lv(scenario, lane_id, x, step, poses=current)
        if lv is not None:
            leader = list(agent_ids).index(lv.agent_id)
            leader_now = np.array([lv.x, lv.y, lv.heading, lv.speed])
    for k in range(T):
        fp = lane.project(x[:2])
        lookahead = max(6.0, 1.2 * x[3])
        target, _ = lane.point_at(fp.s + lookahead)
        eta = wrap_angle(np.arctan2(target[1] - x[1], target[0] - x[0]) - x[2])
        dist = max(np.hypot(target[0] - x[0], target[1] - x[1]), 1e-3)
        delta = np.arctan(2.0 * params.wheelbase * np.sin(eta) / dist)
        if leader is not None:
            prev = predictions[leader, k - 1] if k > 0 else leader_now
            agent_s, agent_v = lane.project(prev[:2]).s, prev[3]
        else:
            agent_s = agent_v = None
        v_des = _lane_speed_target(lane, fp.s, x[3], k + 1, scenario, step, agent_s, agent_v, params)
        a = np.clip(1.0 * (v_des - x[3]), -4.0, 2.0)
        u[k] = (a, np.clip(delta, -0.5, 0.5))
        x = _step_np(x, u[k], params)
    return u


def _step_np(x, u, params):
    px, py, th, v = x
    dt = params.dt
    return np.array([px + v * np.cos(th) * dt, py + v * np.sin(th) * dt,
                     th + v / params.wheelbase * np.tan(u[1]) * dt, v + u[0] * dt])


def softmax(z, mask=None):
    """Masked softmax; works on duals."""
    zv = np.asarray(ad.value(z), dtype=float)
    if mask is None:
        mask = np.ones(zv.shape, dtype=bool)
    shift = np.max(np.where(mask, zv, -np.inf))
    e = ad.exp(z - shift) * mask.astype(float)
    return e / e.sum()


def decision_prior(costs, mask, temperature: float | None = None) -> np.ndarray:
    """Softmax of negative coarse costs over the available maneuvers."""
    costs = np.asarray(costs, dtype=float)
    avail = costs[mask]
    if temperature is None:
        temperature = 1.0
    logits = np.where(mask, -(costs - np.min(avail)) / temperature, -np.inf)
    e = np.where(mask, np.exp(logits), 0.0)
    return e / e.sum()


def _choose(scores, d, alphas) -> int:
    """Future with the highest score; ties go to the highest decision prior, then keep/right/left."""
    order = {0: 0, 1: 1, -1: 2}
    keys = [(float(ad.value(scores)[k]), float(ad.value(d)[ALPHAS.index(a)]), -order[a]) for k, a in enumerate(alphas)]
    return max(range(len(alphas)), key=lambda k: keys[k])


def carried_maneuver(scenario: Scenario, prev_sigma: int, prev_alpha: int, sigma: int) -> int | None:
    """Maneuver relative to ``sigma`` that aims at the lane the previous plan targeted."""
    lanes = {ln.id: ln for ln in scenario.lanes}
    goal = target_lane(prev_sigma, prev_alpha, lanes)
    if goal is None:
        return None
    for alpha in ALPHAS:
        if target_lane(sigma, alpha, lanes) == goal:
            return alpha
    return None


def shifted_controls(u_prev, T: int) -> np.ndarray:
    """Previous plan advanced by one step, last control repeated, resized to ``T``."""
    u_prev = np.asarray(u_prev, dtype=float)
    u = np.concatenate([u_prev[1:], u_prev[-1:]], axis=0)
    if len(u) < T:
        u = np.concatenate([u, np.repeat(u[-1:], T - len(u), axis=0)], axis=0)
    return u[:T]


def _warm_candidate(scenario, warm, sigma, T):
    """``(alpha, controls)`` from a previous solve ``(u, sigma, maneuver)``, or None."""
    if warm is None:
        return None
    u_prev, prev_sigma, prev_alpha = warm
    alpha = carried_maneuver(scenario, prev_sigma, prev_alpha, sigma)
    return None if alpha is None else (alpha, shifted_controls(u_prev, T))


def _futures_common(scenario, step, ego, sigma, T, params):
    ids, preds = constant_velocity_predict(scenario, step, T)
    ctx = build_context(scenario, preds, ids, step=step, ego_state=ego, sigma=sigma, params=params, horizon=T)
    return ids, preds, ctx


def heuristic_init(scenario: Scenario, w: CostWeights, *, step: int | None = None, ego_state=None,
                   sigma: int | None = None, params: VehicleParams | None = None, horizon: int | None = None,
                   temperature: float | None = None, warm=None) -> Initialization:
    """One future per available maneuver; ``warm`` is a previous ``(u, sigma, maneuver)``.

    With ``warm`` the previous plan, shifted by one step, replaces the
    lane-tracking controls of the maneuver it was heading for whenever its
    coarse cost is lower.
    """
    step = scenario.current_step if step is None else step
    T = horizon or scenario.horizon_steps
    ego = np.asarray(scenario.ego_start if ego_state is None else ego_state, dtype=float)
    params = params or default_params(scenario)
    ids, preds, ctx = _futures_common(scenario, step, ego, sigma, T, params)
    alphas = [a for a, m in zip(ALPHAS, ctx.mask) if m]
    lanes = {ln.id: ln for ln in scenario.lanes}
    controls = {a: lane_tracking_controls(scenario, step, ego, target_lane(ctx.sigma, a, lanes), T, params, ids, preds)
                for a in alphas}
    costs = np.full(3, np.inf)
    for a in alphas:
        costs[ALPHAS.index(a)] = total_cost(controls[a], one_hot(a, T), ctx, w)
    carried = _warm_candidate(scenario, warm, ctx.sigma, T)
    if carried is not None and carried[0] in alphas:
        a, u_warm = carried
        c_warm = total_cost(u_warm, one_hot(a, T), ctx, w)
        if c_warm < costs[ALPHAS.index(a)]:
            controls[a], costs[ALPHAS.index(a)] = u_warm, c_warm
    d = decision_prior(costs, ctx.mask, temperature)
    scores = np.full(len(alphas), 1.0 / len(alphas))
    futures = [Future(a, controls[a], rollout_states(ego, controls[a], params)[1:], preds, scores[i], d)
               for i, a in enumerate(alphas)]
    chosen = _choose(scores, d, alphas)
    return Initialization(ctx, futures, scores, d, controls[alphas[chosen]], init_decisions(d, ctx.mask, T).b, chosen)


def constant_velocity_init(scenario: Scenario, w: CostWeights | None = None, *, step: int | None = None,
                           ego_state=None, sigma: int | None = None, params: VehicleParams | None = None,
                           horizon: int | None = None, warm=None) -> Initialization:
    """Zero ego controls and a uniform decision prior; ``warm`` is ignored."""
    step = scenario.current_step if step is None else step
    T = horizon or scenario.horizon_steps
    ego = np.asarray(scenario.ego_start if ego_state is None else ego_state, dtype=float)
    params = params or default_params(scenario)
    ids, preds, ctx = _futures_common(scenario, step, ego, sigma, T, params)
    alphas = [a for a, m in zip(ALPHAS, ctx.mask) if m]
    d = normalize_probabilities(np.ones(3), ctx.mask)
    scores = np.full(len(alphas), 1.0 / len(alphas))
    u0 = np.zeros((T, 2))
    ego_traj = rollout_states(ego, u0, params)[1:]
    futures = [Future(a, u0, ego_traj, preds, scores[i], d) for i, a in enumerate(alphas)]
    return Initialization(ctx, futures, scores, d, u0, init_decisions(d, ctx.mask, T).b, _choose(scores, d, alphas))


def default_params(scenario: Scenario) -> VehicleParams:
    return VehicleParams(length=scenario.ego_length, width=scenario.ego_width, dt=scenario.dt)


# -- toy learned initializer -------------------------------------------------

def scene_features(scenario: Scenario, step: int, ego, sigma: int) -> np.ndarray:
    """Fixed 14-entry layout.

    ``[v_ego, lv_gap(-1,0,+1), lv_speed(-1,0,+1), nv_gap(-1,+1), nv_speed(-1,+1),
    speed_limit(-1,0,+1)]``; gaps are divided by 50 m and speeds by 15 m/s.  A
    missing vehicle reads as a 100 m gap at the lane's speed limit; an absent
    lane reads as zero gap and zero limit.
    """
    lanes = {ln.id: ln for ln in scenario.lanes}
    ego = np.asarray(ego, dtype=float)
    lv_gap, lv_v, nv_gap, nv_v, limit = [], [], [], [], []
    for alpha in ALPHAS:
        lid = target_lane(sigma, alpha, lanes)
        if lid is None:
            lv_gap.append(0.0)
            lv_v.append(0.0)
            limit.append(0.0)
            if alpha != 0:
                nv_gap.append(0.0)
                nv_v.append(0.0)
            continue
        lim = lanes[lid].speed_limit
        limit.append(lim)
        lv = identify_lv(scenario, lid, ego, step)
        lv_gap.append(min(lv.s_gap, LV_LOOKAHEAD) if lv else MISSING_GAP)
        lv_v.append(lv.speed if lv else lim)
        if alpha != 0:
            nv = identify_nv(scenario, lid, ego, step)
            nv_gap.append(-nv.s_gap if nv else MISSING_GAP)
            nv_v.append(nv.speed if nv else lim)
    gaps = np.array(lv_gap + nv_gap) / GAP_SCALE
    speeds = np.array([ego[3]] + lv_v + nv_v + limit) / SPEED_SCALE
    return np.concatenate([[speeds[0]], gaps[:3], speeds[1:4], gaps[3:], speeds[4:6], speeds[6:]])


class ToyInitializer:
    """``y = gain * tanh(W x + c)`` with ``phi = [W.ravel(), c]``."""

    n_params = N_OUTPUTS * (N_FEATURES + 1)

    def __init__(self, phi=None):
        self.phi = np.zeros(self.n_params) if phi is None else np.array(phi, dtype=float).reshape(self.n_params)
        if not np.all(np.isfinite(self.phi)):
            raise ValueError("toy initializer parameters must be finite")

    @staticmethod
    def unpack(phi):
        W = phi[:N_OUTPUTS * N_FEATURES].reshape(N_OUTPUTS, N_FEATURES)
        return W, phi[N_OUTPUTS * N_FEATURES:]

    def forward(self, x, jacobian: bool = False):
        x = np.asarray(x, dtype=float).reshape(N_FEATURES)
        W, c = self.unpack(self.phi)
        z = W @ x + c
        y = OUTPUT_GAIN * np.tanh(z)
        if not jacobian:
            return y
        dz = OUTPUT_GAIN * (1.0 - np.tanh(z) ** 2)
        J = np.zeros((N_OUTPUTS, self.n_params))
        for o in range(N_OUTPUTS):
            J[o, o * N_FEATURES:(o + 1) * N_FEATURES] = dz[o] * x
            J[o, N_OUTPUTS * N_FEATURES + o] = dz[o]
        return y, J

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"schema": "toy-init-v1", "phi": self.phi.tolist()}) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ToyInitializer":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(doc["phi"])


def toy_init(scenario: Scenario, w: CostWeights, toy: ToyInitializer, *, step: int | None = None, ego_state=None,
             sigma: int | None = None, params: VehicleParams | None = None, horizon: int | None = None,
             outputs=None, warm=None) -> Initialization:
    """Futures from the toy map; pass dual ``outputs`` to carry derivatives w.r.t. the map outputs.

    ``warm`` replaces the lane-tracking base controls of the carried maneuver.
    """
    step = scenario.current_step if step is None else step
    T = horizon or scenario.horizon_steps
    ego = np.asarray(scenario.ego_start if ego_state is None else ego_state, dtype=float)
    params = params or default_params(scenario)
    ids, preds, ctx = _futures_common(scenario, step, ego, sigma, T, params)
    feats = scene_features(scenario, step, ego, ctx.sigma)
    y = toy.forward(feats) if outputs is None else outputs
    alphas = [a for a, m in zip(ALPHAS, ctx.mask) if m]
    lanes = {ln.id: ln for ln in scenario.lanes}
    d = softmax(y[0:3], ctx.mask)
    offset = ad.stack([y[3], y[4]])
    avail = np.array([ALPHAS.index(a) for a in alphas])
    scores = softmax(ad.stack([y[5 + i] for i in avail]))
    carried = _warm_candidate(scenario, warm, ctx.sigma, T)
    futures = []
    for i, a in enumerate(alphas):
        if carried is not None and carried[0] == a:
            base = carried[1]
        else:
            base = lane_tracking_controls(scenario, step, ego, target_lane(ctx.sigma, a, lanes), T, params, ids, preds)
        u0 = base + offset.reshape(1, 2) if ad.is_dual(offset) else base + offset[None, :]
        futures.append(Future(a, u0, rollout_states(ego, u0, params)[1:], preds, scores[i], d))
    chosen = _choose(scores, d, alphas)
    b0 = d.reshape(1, 3) * np.ones((T, 1)) if ad.is_dual(d) else init_decisions(d, ctx.mask, T).b
    return Initialization(ctx, futures, scores, d, futures[chosen].u0, b0, chosen, feats)


INITIALIZERS = ("heuristic", "constant-velocity", "toy")


def make_initializer(spec: str):
    """Resolve ``heuristic``, ``constant-velocity`` or ``toy:<params-file>`` to a callable."""
    if spec == "heuristic":
        return heuristic_init
    if spec in ("constant-velocity", "constant-velocity-only"):
        return constant_velocity_init
    if spec.startswith("toy"):
        _, _, path = spec.partition(":")
        toy = ToyInitializer() if not path else load_toy_params(path)

        def init(scenario, w, **kw):
            return toy_init(scenario, w, toy, **kw)
        return init
    raise ValueError(f"unknown initializer {spec!r}; expected one of heuristic, constant-velocity, toy:<file>")


def load_toy_params(path) -> ToyInitializer:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return ToyInitializer(doc["phi"])
