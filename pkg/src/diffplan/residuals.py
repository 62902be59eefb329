"""Squared-residual cost blocks and their Jacobians.

Plan variables are the controls ``u`` (T, 2) and relaxed decisions ``b``
(T, 3) with columns ordered alpha = -1, 0, +1.  Single shooting: the state
scored at plan step ``k`` is ``x(k+1)``, the state reached by ``u(k)``, and
agent predictions are indexed the same way.

Every block returns ``(r, Gs, Gu, Gb)``: residuals of shape (T, R) and their
partials with respect to the scored state (T, R, 4), the step control
(T, R, 2) and the step decisions (T, R, 3).  The assembler chains ``Gs``
through the rollout sensitivities.  All arithmetic goes through
:mod:`diffplan.ad`, so the assembled Jacobian can itself carry tangents.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from diffplan import ad
from diffplan.vehicle import VehicleParams, rollout_states, state_sensitivities, trajectory_jacobians
from diffplan.world import Lane, Scenario, identify_lv, identify_nv, nearest_lane, target_lane

ALPHAS = (-1, 0, 1)
WEIGHTS_SCHEMA = "weights-v1"
LEARNABLE = ("w_tr_x", "w_tr_y", "w_v_lon", "w_d_lon", "w_v_lat", "w_d_lat", "w_velo", "w_rc1", "w_rc2")
FIXED = ("w_safe", "w_stop", "w_bi", "w_eq")
BLOCKS = (
    ("tracking", 6),
    ("lv_safety", 6),
    ("nv_safety", 4),
    ("efficiency", 3),
    ("comfort", 2),
    ("collision", 1),
    ("traffic", 1),
    ("binary", 3),
    ("equality", 1),
)
ROWS_PER_STEP = sum(n for _, n in BLOCKS)
INTERACTIVE_S_WINDOW = (-10.0, 60.0)
B_FLOOR = 1e-6


@dataclass
class CostWeights:
    w_tr_x: float = 0.1
    w_tr_y: float = 0.3
    w_v_lon: float = 0.5
    w_d_lon: float = 10.0
    w_v_lat: float = 0.5
    w_d_lat: float = 10.0
    w_velo: float = 0.3
    w_rc1: float = 0.3
    w_rc2: float = 20.0
    w_safe: float = 100.0
    w_stop: float = 100.0
    w_bi: float = 10.0
    w_eq: float = 1000.0
    eps_num: float = 0.5
    collision_gap: float = 2.0
    collision_lateral_scale: float = 4.0
    equality_two_sided: bool = True

    def __post_init__(self):
        for name in LEARNABLE + FIXED:
            v = getattr(self, name)
            if not ad.is_dual(v) and not v >= 0:
                raise ValueError(f"{name} must be non-negative, got {v}")
        if not self.eps_num > 0:
            raise ValueError("eps_num must be positive")

    def learnable_vector(self) -> np.ndarray:
        return np.array([float(ad.value(getattr(self, n))) for n in LEARNABLE])

    def with_learnable(self, values) -> "CostWeights":
        """Copy with the learnable weights replaced (entries may be duals)."""
        return dataclasses.replace(self, **{n: values[i] for i, n in enumerate(LEARNABLE)})

    def to_dict(self) -> dict:
        doc = {"schema": WEIGHTS_SCHEMA}
        for f in dataclasses.fields(self):
            doc[f.name] = getattr(self, f.name)
        doc["learnable"] = list(LEARNABLE)
        doc["fixed"] = list(FIXED)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "CostWeights":
        if doc.get("schema", WEIGHTS_SCHEMA) != WEIGHTS_SCHEMA:
            raise ValueError(f"unsupported weights schema {doc.get('schema')!r}")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names - {"schema", "learnable", "fixed"}
        if unknown:
            raise ValueError(f"unknown weight keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in doc.items() if k in names})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CostWeights":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class SignalContext:
    lane: Lane
    stop_s: float
    red: np.ndarray  # (T,) bool, per plan step


@dataclass
class PlanContext:
    """Everything the residuals need besides the plan variables; fixed for one solve."""

    x0: np.ndarray
    T: int
    params: VehicleParams
    sigma: int
    mask: np.ndarray  # (3,) available maneuvers
    ref: np.ndarray  # (3, T, 2) reference points per maneuver
    speed_limit: np.ndarray  # (3,)
    frame: Lane  # ego lane, Frenet frame of the collision term
    agent_ids: tuple = ()
    agent_pos: object = None  # (N, T, 2) predicted positions, may be a dual
    agent_speed: np.ndarray = None  # (N, T)
    agent_length: np.ndarray = None  # (N,)
    interactive: np.ndarray = None  # (N,) bool
    lv_index: np.ndarray = field(default_factory=lambda: np.full(3, -1))
    nv_index: np.ndarray = field(default_factory=lambda: np.full(3, -1))
    signals: list = field(default_factory=list)

    def __post_init__(self):
        if self.agent_pos is None:
            self.agent_pos = np.zeros((0, self.T, 2))
            self.agent_speed = np.zeros((0, self.T))
            self.agent_length = np.zeros(0)
            self.interactive = np.zeros(0, dtype=bool)

    @property
    def n_agents(self) -> int:
        return len(self.agent_ids)

    @property
    def n_vars(self) -> int:
        return 5 * self.T

    def with_agent_positions(self, pos) -> "PlanContext":
        return dataclasses.replace(self, agent_pos=pos)


def build_context(scenario: Scenario, predictions: np.ndarray, agent_ids, *, step: int | None = None,
                  ego_state=None, sigma: int | None = None, params: VehicleParams | None = None,
                  horizon: int | None = None) -> PlanContext:
    """Assemble the plan context at ``step`` from world queries and agent predictions.

    ``predictions`` is (N, T, 4) with row ``k`` the predicted pose ``k + 1``
    steps ahead, ordered like ``agent_ids``.
    """
    step = scenario.current_step if step is None else step
    ego = np.asarray(scenario.ego_start if ego_state is None else ego_state, dtype=float)
    T = horizon or scenario.horizon_steps
    params = params or VehicleParams(length=scenario.ego_length, width=scenario.ego_width, dt=scenario.dt)
    if sigma is None:
        sigma = scenario.ego_lane_id if ego_state is None else nearest_lane(ego[:2], scenario.lanes)
    lanes = {ln.id: ln for ln in scenario.lanes}
    frame = lanes[sigma]
    mask = np.zeros(3, dtype=bool)
    ref = np.zeros((3, T, 2))
    limits = np.zeros(3)
    k = np.arange(1, T + 1)
    for i, alpha in enumerate(ALPHAS):
        lid = target_lane(sigma, alpha, lanes)
        if lid is None:
            continue
        lane = lanes[lid]
        mask[i] = True
        limits[i] = lane.speed_limit
        s0 = lane.project(ego[:2]).s
        s_ref = s0 + max(ego[3], 0.0) * params.dt * k
        for sig in scenario.signals:
            if sig.lane_id != lid or s0 >= sig.stop_line_s:
                continue
            red = np.array([sig.is_red(step + j) for j in k])
            s_ref = np.where(red, np.minimum(s_ref, max(sig.stop_line_s - 1.0, s0)), s_ref)
        ref[i] = lane.point_at(s_ref)[0]

    predictions = np.asarray(predictions, dtype=float).reshape(len(agent_ids), T, 4) if len(agent_ids) else None
    index = {aid: n for n, aid in enumerate(agent_ids)}
    tracks = {a.id: a for a in scenario.agents}
    current = [(tracks[aid], tracks[aid].pose_at(step)) for aid in agent_ids]
    lv_index = np.full(3, -1)
    nv_index = np.full(3, -1)
    for i, alpha in enumerate(ALPHAS):
        if not mask[i]:
            continue
        lid = target_lane(sigma, alpha, lanes)
        lv = identify_lv(scenario, lid, ego, step, poses=current)
        if lv is not None:
            lv_index[i] = index[lv.agent_id]
        if alpha != 0:
            nv = identify_nv(scenario, lid, ego, step, poses=current)
            if nv is not None:
                nv_index[i] = index[nv.agent_id]

    signals = []
    for sig in scenario.signals:
        if sig.lane_id not in [target_lane(sigma, a, lanes) for a, m in zip(ALPHAS, mask) if m]:
            continue
        lane = lanes[sig.lane_id]
        if lane.project(ego[:2]).s >= sig.stop_line_s:
            continue
        red = np.array([sig.is_red(step + j) for j in k])
        if red.any():
            signals.append(SignalContext(lane, sig.stop_line_s, red))

    if predictions is None:
        return PlanContext(x0=ego, T=T, params=params, sigma=sigma, mask=mask, ref=ref, speed_limit=limits,
                           frame=frame, lv_index=lv_index, nv_index=nv_index, signals=signals)

    s_ego = frame.project(ego[:2]).s
    interactive = np.zeros(len(agent_ids), dtype=bool)
    for n, (track, pose) in enumerate(current):
        pts = np.vstack([pose[:2], predictions[n, :, :2]])
        s, d = frame.project_points(pts)
        gap = s - s_ego
        inside = (gap >= INTERACTIVE_S_WINDOW[0]) & (gap <= INTERACTIVE_S_WINDOW[1]) & (np.abs(d) < 2 * frame.width)
        interactive[n] = bool(inside.any())
    return PlanContext(
        x0=ego, T=T, params=params, sigma=sigma, mask=mask, ref=ref, speed_limit=limits, frame=frame,
        agent_ids=tuple(agent_ids), agent_pos=predictions[:, :, :2].copy(), agent_speed=predictions[:, :, 3].copy(),
        agent_length=np.array([tracks[a].length for a in agent_ids]), interactive=interactive,
        lv_index=lv_index, nv_index=nv_index, signals=signals,
    )


# -- blocks ----------------------------------------------------------------

def decision_factor(b, mask):
    """``sqrt(clip(b, 0, 1))`` per maneuver and the slope used for it in the Jacobian.

    The slope is ``0.5 / sqrt(clip(b, 1e-6, 1))``: past either clip bound it
    keeps the one-sided value from inside instead of dropping to zero, so a
    maneuver sitting at zero never looks free to re-enter.
    """
    bv = ad.value(b)
    inside = (bv > 0.0) & (bv < 1.0) & mask
    g = ad.sqrt(ad.where(inside, b, np.clip(bv, 0.0, 1.0) * mask))
    slope = 0.5 / ad.sqrt(ad.clip(b, B_FLOOR, 1.0))
    gp = ad.where(np.broadcast_to(mask, bv.shape), slope, 0.0)
    return g, gp


def _diag_b(x, T, n_alpha_rows):
    """Embed per-maneuver partials (T, 3, c) into (T, 3*c, 3) with alpha on the diagonal."""
    c = n_alpha_rows
    eye = np.eye(3)[None, :, None, :]
    if not ad.is_dual(x):
        x = np.asarray(x)
    return (x.reshape(T, 3, c, 1) * eye).reshape(T, 3 * c, 3)


def _zeros(T, R, k):
    return np.zeros((T, R, k))


def _state_partials(T, comps):
    """Build a (T, R, 4) state-partial array from per-state-component (T, R) arrays (None = 0)."""
    R = None
    for c in comps:
        if c is not None:
            R = ad.value(c).shape[1]
    return ad.stack([np.zeros((T, R)) if c is None else c for c in comps], axis=-1)


def r_tracking(xs, u, b, ctx, w, g, gp):
    T = ctx.T
    sx, sy = ad.sqrt(w.w_tr_x), ad.sqrt(w.w_tr_y)
    ex = xs[:, 0].reshape(T, 1) - ctx.ref[:, :, 0].T
    ey = xs[:, 1].reshape(T, 1) - ctx.ref[:, :, 1].T
    r = ad.stack([sx * g * ex, sy * g * ey], axis=2).reshape(T, 6)
    zero = np.zeros((T, 3))
    Gs = ad.stack([
        ad.stack([sx * g, zero], axis=2).reshape(T, 6),
        ad.stack([zero, sy * g], axis=2).reshape(T, 6),
        np.zeros((T, 6)), np.zeros((T, 6)),
    ], axis=-1)
    Gb = _diag_b(ad.stack([sx * ex * gp, sy * ey * gp], axis=2), T, 2)
    return r, Gs, _zeros(T, 6, 2), Gb


def _gather_agents(ctx, index, present):
    """Per-maneuver predicted positions (T, 3, 2) and speeds (T, 3) of indexed agents."""
    T = ctx.T
    pos, spd = [], []
    for i in range(3):
        if present[i]:
            pos.append(ctx.agent_pos[index[i]])
            spd.append(ctx.agent_speed[index[i]])
        else:
            pos.append(np.zeros((T, 2)))
            spd.append(np.zeros(T))
    return ad.stack(pos, axis=1), np.stack(spd, axis=1)


def _interaction(xs, b, ctx, w_v, w_d, eps, index, slower_gate, g, gp, length):
    """Velocity-gap and inverse-distance residuals against one indexed vehicle per maneuver."""
    T = ctx.T
    present = (index >= 0) & ctx.mask
    p_o, v_o = _gather_agents(ctx, index, present)
    v = xs[:, 3].reshape(T, 1)
    dv = v_o - v
    dvv = ad.value(dv)
    gate = ((dvv < 0.0) if slower_gate else (dvv > 0.0)) & present[None, :]
    sv = ad.sqrt(w_v) * gate
    r_vel = sv * g * dv
    dx = xs[:, 0].reshape(T, 1) - p_o[:, :, 0]
    dy = xs[:, 1].reshape(T, 1) - p_o[:, :, 1]
    dist = ad.sqrt(ad.maximum(dx * dx + dy * dy, 1e-12))
    gap = dist - length
    q = gap * gap + eps * eps
    inv_sq = 1.0 / ad.sqrt(q)
    sd = ad.sqrt(w_d) * present
    r_dist = sd * g * inv_sq
    # d r_dist / d p = sd g * (-gap / q^1.5) * (p - p_o) / dist
    coef = sd * g * (-gap) * inv_sq / q / dist
    zero = np.zeros((T, 3))
    Gs = ad.stack([
        ad.stack([zero, coef * dx], axis=2),
        ad.stack([zero, coef * dy], axis=2),
        ad.stack([zero, zero], axis=2),
        ad.stack([-sv * g, zero], axis=2),
    ], axis=-1)  # (T, 3, 2, 4)
    r = ad.stack([r_vel, r_dist], axis=2)
    Gb = ad.stack([sv * dv * gp, sd * inv_sq * gp], axis=2)
    return r, Gs, Gb


def r_lv_safety(xs, u, b, ctx, w, g, gp):
    T = ctx.T
    r, Gs, Gb = _interaction(xs, b, ctx, w.w_v_lon, w.w_d_lon, w.eps_num, ctx.lv_index, True, g, gp,
                             ctx.params.length)
    return r.reshape(T, 6), Gs.reshape(T, 6, 4), _zeros(T, 6, 2), _diag_b(Gb, T, 2)


def r_nv_safety(xs, u, b, ctx, w, g, gp):
    T = ctx.T
    index = ctx.nv_index.copy()
    index[1] = -1
    r, Gs, Gb = _interaction(xs, b, ctx, w.w_v_lat, w.w_d_lat, w.eps_num, index, False, g, gp,
                             ctx.params.length)
    keep = [0, 2]
    Gb_full = _diag_b(Gb, T, 2).reshape(T, 3, 2, 3)
    return (r[:, keep].reshape(T, 4), Gs[:, keep].reshape(T, 4, 4), _zeros(T, 4, 2),
            Gb_full[:, keep].reshape(T, 4, 3))


def r_efficiency(xs, u, b, ctx, w, g, gp):
    T = ctx.T
    sw = ad.sqrt(w.w_velo)
    ev = xs[:, 3].reshape(T, 1) - ctx.speed_limit[None, :]
    r = sw * g * ev
    Gs = _state_partials(T, [None, None, None, sw * g])
    return r, Gs, _zeros(T, 3, 2), _diag_b((sw * ev * gp).reshape(T, 3, 1), T, 1)


def r_comfort(xs, u, b, ctx, w, g, gp):
    T = ctx.T
    s1, s2 = ad.sqrt(w.w_rc1), ad.sqrt(w.w_rc2)
    r = ad.stack([s1 * u[:, 0], s2 * u[:, 1]], axis=1)
    one = np.ones(T)
    Gu = ad.stack([ad.stack([s1 * one, 0.0 * one], axis=1), ad.stack([0.0 * one, s2 * one], axis=1)], axis=1)
    return r, _zeros(T, 2, 4), Gu, _zeros(T, 2, 3)


def _frenet_linear(lane: Lane, pts):
    """Affine Frenet coordinates of (k, 2) points (duals allowed) and their gradients."""
    anchor, s0, tang = lane.frenet_frame(np.asarray(ad.value(pts)))
    rx = pts[:, 0] - anchor[:, 0]
    ry = pts[:, 1] - anchor[:, 1]
    s = s0 + rx * tang[:, 0] + ry * tang[:, 1]
    d = tang[:, 0] * ry - tang[:, 1] * rx
    normal = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    return s, d, tang, normal


def r_collision(xs, u, b, ctx, w, g, gp):
    T = ctx.T
    act = np.flatnonzero(ctx.interactive)
    if len(act) == 0:
        return np.zeros((T, 1)), _zeros(T, 1, 4), _zeros(T, 1, 2), _zeros(T, 1, 3)
    lam = w.collision_lateral_scale
    s_e, d_e, tang, normal = _frenet_linear(ctx.frame, xs[:, :2])
    agents = ctx.agent_pos[act]  # (M, T, 2)
    M = len(act)
    flat = agents.reshape(M * T, 2)
    s_a, d_a, _, _ = _frenet_linear(ctx.frame, flat)
    s_a, d_a = s_a.reshape(M, T).T, d_a.reshape(M, T).T  # (T, M)
    ds = s_e.reshape(T, 1) - s_a
    dd = d_e.reshape(T, 1) - d_a
    dist = ad.sqrt(ds * ds + (lam * lam) * (dd * dd) + 1e-12)
    eps = ctx.params.length + ctx.agent_length[act] + w.collision_gap
    viol = eps[None, :] - dist
    rows = np.arange(T)
    j = np.argmax(ad.value(viol), axis=1)
    v_star = viol[rows, j]
    active = ad.value(v_star) > 0.0
    sw = ad.sqrt(w.w_safe)
    r = sw * ad.hinge(v_star)
    coef = ad.where(active, -sw / dist[rows, j], 0.0)
    ds_j, dd_j = ds[rows, j], dd[rows, j]
    grad_x = coef * (ds_j * tang[:, 0] + (lam * lam) * dd_j * normal[:, 0])
    grad_y = coef * (ds_j * tang[:, 1] + (lam * lam) * dd_j * normal[:, 1])
    Gs = _state_partials(T, [grad_x.reshape(T, 1), grad_y.reshape(T, 1), None, None])
    return r.reshape(T, 1), Gs, _zeros(T, 1, 2), _zeros(T, 1, 3)


def r_traffic(xs, u, b, ctx, w, g, gp):
    T = ctx.T
    if not ctx.signals:
        return np.zeros((T, 1)), _zeros(T, 1, 4), _zeros(T, 1, 2), _zeros(T, 1, 3)
    dt = ctx.params.dt
    viols, grads = [], []
    for sig in ctx.signals:
        s, _, tang, _ = _frenet_linear(sig.lane, xs[:, :2])
        viol = s + xs[:, 3] * dt - sig.stop_s
        viols.append(ad.where(sig.red, viol, -1.0))
        grads.append(tang)
    stacked = ad.stack(viols, axis=1)  # (T, S)
    rows = np.arange(T)
    j = np.argmax(ad.value(stacked), axis=1)
    v_star = stacked[rows, j]
    active = ad.value(v_star) > 0.0
    sw = ad.sqrt(w.w_stop)
    r = sw * ad.hinge(v_star)
    tang = np.stack(grads, axis=1)[rows, j]  # (T, 2)
    coef = ad.where(active, sw, 0.0) if ad.is_dual(sw) else np.where(active, sw, 0.0)
    Gs = _state_partials(T, [(coef * tang[:, 0]).reshape(T, 1), (coef * tang[:, 1]).reshape(T, 1), None,
                             (coef * dt).reshape(T, 1)])
    return r.reshape(T, 1), Gs, _zeros(T, 1, 2), _zeros(T, 1, 3)


def r_binary(xs, u, b, ctx, w, g, gp):
    T = ctx.T
    sw = ad.sqrt(w.w_bi)
    h = b * (b - 1.0)
    active = (ad.value(h) > 0.0) & ctx.mask[None, :]
    r = sw * ad.where(active, h, 0.0)
    Gb = _diag_b(ad.where(active, sw * (2.0 * b - 1.0), 0.0).reshape(T, 3, 1), T, 1)
    return r, _zeros(T, 3, 4), _zeros(T, 3, 2), Gb


def r_equality(xs, u, b, ctx, w, g, gp):
    T = ctx.T
    sw = ad.sqrt(w.w_eq)
    excess = (b * ctx.mask[None, :].astype(float)).sum(axis=1) - 1.0
    if w.equality_two_sided:
        active = np.ones(T, dtype=bool)
        r = sw * excess
    else:
        active = ad.value(excess) > 0.0
        r = sw * ad.hinge(excess)
    col = ad.where(active[:, None] & ctx.mask[None, :], sw * np.ones((T, 3)), 0.0) if ad.is_dual(sw) else \
        np.where(active[:, None] & ctx.mask[None, :], sw, 0.0)
    return r.reshape(T, 1), _zeros(T, 1, 4), _zeros(T, 1, 2), col.reshape(T, 1, 3)


BLOCK_FUNCS = {
    "tracking": r_tracking,
    "lv_safety": r_lv_safety,
    "nv_safety": r_nv_safety,
    "efficiency": r_efficiency,
    "comfort": r_comfort,
    "collision": r_collision,
    "traffic": r_traffic,
    "binary": r_binary,
    "equality": r_equality,
}


def block_slices() -> dict[str, slice]:
    out, start = {}, 0
    for name, n in BLOCKS:
        out[name] = slice(start, start + n)
        start += n
    return out


def evaluate_blocks(u, b, ctx: PlanContext, w: CostWeights, states=None):
    """Per-block ``(r, Gs, Gu, Gb)`` at the plan ``(u, b)``."""
    if states is None:
        states = rollout_states(ctx.x0, u, ctx.params)
    xs = states[1:]
    g, gp = decision_factor(b, ctx.mask[None, :])
    return {name: BLOCK_FUNCS[name](xs, u, b, ctx, w, g, gp) for name, _ in BLOCKS}, states


def _selector(T, c):
    E = np.zeros((T, c, c * T))
    for k in range(T):
        E[k, np.arange(c), c * k + np.arange(c)] = 1.0
    return E


def assemble(u, b, ctx: PlanContext, w: CostWeights, jacobian: bool = True):
    """Stacked residual vector (ordered step-major) and, optionally, its Jacobian.

    Jacobian columns are ``[u.ravel(), b.ravel()]``; rows are ``ROWS_PER_STEP``
    per plan step in :data:`BLOCKS` order.
    """
    T = ctx.T
    blocks, states = evaluate_blocks(u, b, ctx, w)
    parts = [blocks[name] for name, _ in BLOCKS]
    r = ad.concatenate([p[0] for p in parts], axis=1).reshape(T * ROWS_PER_STEP)
    if not jacobian:
        return r
    Gs = ad.concatenate([p[1] for p in parts], axis=1)
    Gu = ad.concatenate([p[2] for p in parts], axis=1)
    Gb = ad.concatenate([p[3] for p in parts], axis=1)
    A, B = trajectory_jacobians(states[:-1], u, ctx.params)
    S = state_sensitivities(A, B)[1:]
    if not any(ad.is_dual(x) for x in (Gs, Gu, Gb, S)):
        # block placement: step k's control and decision columns only touch its own rows
        idx = np.arange(T)
        Ju = np.matmul(Gs, S)
        Ju.reshape(T, ROWS_PER_STEP, T, 2)[idx, :, idx, :] += Gu
        Jb = np.zeros((T, ROWS_PER_STEP, T, 3))
        Jb[idx, :, idx, :] = Gb
        return r, np.concatenate([Ju.reshape(T * ROWS_PER_STEP, 2 * T), Jb.reshape(T * ROWS_PER_STEP, 3 * T)], axis=1)
    Ju = ad.einsum("trs,tsj->trj", Gs, S) + ad.einsum("trc,tcj->trj", Gu, _selector(T, 2))
    Jb = ad.einsum("trc,tcj->trj", Gb, _selector(T, 3))
    J = ad.concatenate([Ju.reshape(T * ROWS_PER_STEP, 2 * T), Jb.reshape(T * ROWS_PER_STEP, 3 * T)], axis=1)
    return r, J


def total_cost(u, b, ctx, w) -> float:
    r = assemble(u, b, ctx, w, jacobian=False)
    return float(np.dot(r, r))


def block_costs(u, b, ctx, w) -> dict[str, float]:
    blocks, _ = evaluate_blocks(u, b, ctx, w)
    return {name: float(np.sum(np.square(ad.value(blocks[name][0])))) for name, _ in BLOCKS}


def nonfinite_blocks(u, b, ctx, w) -> list[str]:
    blocks, _ = evaluate_blocks(u, b, ctx, w)
    return [name for name, _ in BLOCKS if not np.all(np.isfinite(ad.value(blocks[name][0])))]
