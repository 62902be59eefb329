"""Outer-loop learning at toy scale: losses, gradients through the solver, Adam updates.

Learnable parameters are the log of the learnable cost weights and the toy
initializer parameters ``phi``.  Gradients are forward-mode: one dual
direction per log-weight and per toy output, the latter chained to ``phi``
through the exact Jacobian of the toy map.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from diffplan import ad
from diffplan.initializer import N_OUTPUTS, ToyInitializer, default_params, scene_features, toy_init
from diffplan.residuals import FIXED, LEARNABLE, CostWeights, assemble
from diffplan.solver import PlanVariables, SolverConfig, solve, unrolled_solution, _unpack
from diffplan.vehicle import rollout_states
from diffplan.world import Scenario

log = logging.getLogger(__name__)

TRAIN_SCHEMA = "train-v1"
LOSS_COLUMNS = ("epoch", "step", "phase", "total", "prediction", "score", "decision", "planning", "imitation")
PARTS = ("prediction", "score", "decision", "planning", "imitation")
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Loss weights keyed by role; the planning term takes the small default."""

    prediction: float = 0.5
    score: float = 1.0
    decision: float = 1.0
    imitation: float = 1.0
    planning: float = 0.1

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"loss weight {name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 2e-4
    batch_size: int = 32
    epochs: int = 20
    pretrain_epochs: int = 3
    huber_delta: float = 1.0
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or self.huber_delta <= 0 or self.batch_size < 1 or self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("training config values must be positive")


# -- losses --------------------------------------------------------------------

def _abs(x):
    return x * np.sign(ad.value(x))


def smooth_l1(x, delta: float = 1.0):
    """Summed element-wise Huber loss with transition ``delta``."""
    ax = _abs(x)
    quad = 0.5 * x * x / delta
    lin = ax - 0.5 * delta
    return ad.where(np.abs(ad.value(x)) <= delta, quad, lin).sum()


def select_best_future(futures, gt_ego, gt_agents, agent_valid) -> int:
    """Future with the smallest sum of per-vehicle trajectory distances to the ground truth."""
    errors = []
    for f in futures:
        ego = np.asarray(ad.value(f.ego))[:, :2]
        e = np.sum(np.hypot(*(ego - gt_ego).T))
        if gt_agents.size:
            diff = np.where(agent_valid[..., None], f.agents[..., :2] - gt_agents, 0.0)
            e += np.sum(np.hypot(diff[..., 0], diff[..., 1]))
        errors.append(e)
    return int(np.argmin(errors))


def prediction_loss(future, gt_ego, gt_agents, agent_valid, delta: float = 1.0):
    loss = smooth_l1(future.ego[:, :2] - gt_ego, delta)
    if gt_agents.size:
        diff = np.where(agent_valid[..., None], future.agents[..., :2] - gt_agents, 0.0)
        loss = loss + smooth_l1(diff, delta)
    return loss


def _neg_log(p):
    if float(ad.value(p)) < PROB_FLOOR:
        return -np.log(PROB_FLOOR) + 0.0 * p
    return -ad.log(p)


def score_loss(scores, k_hat: int):
    return _neg_log(scores[k_hat])


def decision_loss(d, alpha_star: int):
    return _neg_log(d[alpha_star + 1])


def planning_loss(u, b, ctx, w):
    """Total squared residual at the solution."""
    r = assemble(u, b, ctx, w, jacobian=False)
    return (r * r).sum()


def imitation_loss(states, gt_ego, delta: float = 1.0):
    """Huber loss between planned and recorded ego positions (steps 1..T)."""
    return smooth_l1(states[1:, :2] - gt_ego, delta)


def total_loss(parts: dict, lam: LossWeights = LossWeights()):
    return sum(getattr(lam, name) * parts[name] for name in PARTS)


def pretrain_loss(parts: dict, lam: LossWeights = LossWeights()):
    return lam.prediction * parts["prediction"] + lam.score * parts["score"]


# -- ground truth ----------------------------------------------------------------

def ground_truth(scenario: Scenario, ctx, step: int | None = None):
    """Recorded ego positions and agent positions over the horizon, with validity mask."""
    step = scenario.current_step if step is None else step
    offset = step - scenario.current_step
    T = ctx.T
    gt = scenario.ego_ground_truth
    if len(gt) < offset + T + 1:
        raise ValueError(f"scenario {scenario.name!r} has too short a recorded ego for horizon {T}")
    gt_ego = gt[offset + 1:offset + T + 1, :2]
    tracks = {a.id: a for a in scenario.agents}
    gt_agents = np.zeros((ctx.n_agents, T, 2))
    valid = np.zeros((ctx.n_agents, T), dtype=bool)
    for n, aid in enumerate(ctx.agent_ids):
        for k in range(T):
            pose = tracks[aid].pose_at(step + k + 1)
            if pose is not None:
                gt_agents[n, k] = pose[:2]
                valid[n, k] = True
    return gt_ego, gt_agents, valid


# -- state and gradient --------------------------------------------------------------

@dataclass
class TrainState:
    weights: CostWeights
    phi: np.ndarray
    m: np.ndarray = None
    v: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        self.phi = np.array(self.phi, dtype=float).reshape(ToyInitializer.n_params)
        n = len(LEARNABLE) + self.phi.size
        self.m = np.zeros(n) if self.m is None else np.asarray(self.m, dtype=float)
        self.v = np.zeros(n) if self.v is None else np.asarray(self.v, dtype=float)

    @classmethod
    def initial(cls, weights: CostWeights | None = None, phi=None) -> "TrainState":
        return cls(weights or CostWeights(), np.zeros(ToyInitializer.n_params) if phi is None else phi)

    @property
    def toy(self) -> ToyInitializer:
        return ToyInitializer(self.phi)

    def params(self) -> np.ndarray:
        return np.concatenate([np.log(self.weights.learnable_vector()), self.phi])

    def with_params(self, theta) -> "TrainState":
        k = len(LEARNABLE)
        return TrainState(self.weights.with_learnable(np.exp(theta[:k])), theta[k:], self.m.copy(), self.v.copy(),
                          self.step)

    def to_dict(self) -> dict:
        return {"schema": TRAIN_SCHEMA, "weights": self.weights.to_dict(), "phi": self.phi.tolist(),
                "m": self.m.tolist(), "v": self.v.tolist(), "step": self.step}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainState":
        if doc.get("schema") != TRAIN_SCHEMA:
            raise ValueError(f"expected schema {TRAIN_SCHEMA!r}, got {doc.get('schema')!r}")
        return cls(CostWeights.from_dict(doc["weights"]), doc["phi"], doc["m"], doc["v"], int(doc["step"]))

    @classmethod
    def load(cls, path) -> "TrainState":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class ScenarioLoss(dict):
    """Loss parts of one scenario plus, when requested, gradients."""


def scenario_loss(scenario: Scenario, state: TrainState, solver: SolverConfig, lam: LossWeights = LossWeights(),
                  delta: float = 1.0, gradient: bool = True, pretrain: bool = False) -> ScenarioLoss:
    """Run initializer, solver and losses on one scenario.

    Returns the loss parts, the weighted loss and, with ``gradient``, its
    gradient with respect to the log learnable weights and ``phi``.
    """
    T = scenario.horizon_steps
    params = default_params(scenario)
    toy = state.toy
    init_plain = toy_init(scenario, state.weights, toy, params=params, horizon=T)
    feats = init_plain.features
    y, J_toy = toy.forward(feats, jacobian=True)
    n_w = len(LEARNABLE)
    P = n_w + N_OUTPUTS
    if gradient:
        y_in = ad.Dual(y, np.eye(N_OUTPUTS, P, k=n_w))
        wvec = state.weights.learnable_vector()
        # d w_i / d log w_i = w_i
        wd = ad.Dual(wvec, np.eye(n_w, P) * wvec[:, None])
        w_in = state.weights.with_learnable([wd[i] for i in range(n_w)])
    else:
        y_in, w_in = y, state.weights
    init = toy_init(scenario, w_in, toy, params=params, horizon=T, outputs=y_in)
    ctx = init.ctx
    gt_ego, gt_agents, valid = ground_truth(scenario, ctx)
    k_hat = select_best_future(init.futures, gt_ego, gt_agents, valid)
    parts = {
        "prediction": prediction_loss(init.futures[k_hat], gt_ego, gt_agents, valid, delta),
        "score": score_loss(init.scores, k_hat),
    }
    if pretrain:
        loss = pretrain_loss(parts, lam)
        alpha_star = None
    else:
        plain = solve(ctx, PlanVariables(ad.value(init.u_init), ad.value(init.b_init)), state.weights, solver)
        alpha_star = plain.maneuver
        theta = unrolled_solution(ctx, PlanVariables(init.u_init, init.b_init), w_in, solver, plain.iterations_used)
        u, b = _unpack(theta, T)
        b = b * ctx.mask[None, :].astype(float)
        parts["decision"] = decision_loss(init.d, alpha_star)
        parts["planning"] = planning_loss(u, b, ctx, w_in)
        parts["imitation"] = imitation_loss(rollout_states(ctx.x0, u, params), gt_ego, delta)
        loss = total_loss(parts, lam)
    out = ScenarioLoss(
        scenario=scenario.name, loss=float(ad.value(loss)), k_hat=k_hat, maneuver=alpha_star,
        parts={k: float(ad.value(v)) for k, v in parts.items()},
    )
    if gradient:
        tan = loss.tan if ad.is_dual(loss) else np.zeros(P)
        out["grad_log_weights"] = tan[:n_w].copy()
        out["grad_phi"] = tan[n_w:] @ J_toy
    return out


def batch_gradient(scenarios, state: TrainState, solver: SolverConfig, lam: LossWeights, delta: float,
                   pretrain: bool = False):
    """Mean loss and gradient over the batch in fixed scenario order; non-finite scenarios are reported."""
    n_w = len(LEARNABLE)
    grad = np.zeros(n_w + state.phi.size)
    losses, bad, reports = [], [], []
    for sc in scenarios:
        rep = scenario_loss(sc, state, solver, lam, delta, gradient=True, pretrain=pretrain)
        g = np.concatenate([rep["grad_log_weights"], rep["grad_phi"]])
        if not (np.isfinite(rep["loss"]) and np.all(np.isfinite(g))):
            bad.append(sc.name)
            continue
        grad += g
        losses.append(rep["loss"])
        reports.append(rep)
    n = len(losses)
    if n:
        grad /= n
    if pretrain:
        grad[:n_w] = 0.0
    return (float(np.mean(losses)) if n else float("nan")), grad, reports, bad


def adam_update(state: TrainState, grad: np.ndarray, config: TrainingConfig) -> TrainState:
    m = config.adam_b1 * state.m + (1 - config.adam_b1) * grad
    v = config.adam_b2 * state.v + (1 - config.adam_b2) * grad ** 2
    t = state.step + 1
    m_hat = m / (1 - config.adam_b1 ** t)
    v_hat = v / (1 - config.adam_b2 ** t)
    step = config.lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    new = state.with_params(state.params() - step)
    # parameters that did not move keep their stored values exactly (exp(log w) may round)
    k = len(LEARNABLE)
    old_w = state.weights.learnable_vector()
    new.weights = state.weights.with_learnable(np.where(step[:k] == 0.0, old_w, new.weights.learnable_vector()))
    new.phi = np.where(step[k:] == 0.0, state.phi, new.phi)
    new.m, new.v, new.step = m, v, t
    return new


@dataclass
class StepReport:
    loss: float
    parts: dict
    skipped: list = field(default_factory=list)
    updated: bool = True


def train_step(scenarios, state: TrainState, config: TrainingConfig = TrainingConfig(),
               solver: SolverConfig | None = None, lam: LossWeights = LossWeights(),
               pretrain: bool = False) -> tuple[TrainState, StepReport]:
    """One Adam update on the batch mean loss; a non-finite gradient skips the update."""
    solver = solver or SolverConfig.for_mode("training")
    loss, grad, reports, bad = batch_gradient(scenarios, state, solver, lam, config.huber_delta, pretrain)
    keys = PARTS if not pretrain else ("prediction", "score")
    parts = {k: float(np.mean([r["parts"][k] for r in reports])) if reports else float("nan") for k in keys}
    if bad:
        log.warning("non-finite loss or gradient in %s; update skipped", ", ".join(bad))
        return state, StepReport(loss, parts, bad, updated=False)
    return adam_update(state, grad, config), StepReport(loss, parts)


def mean_loss(scenarios, state: TrainState, solver: SolverConfig | None = None, lam: LossWeights = LossWeights(),
              delta: float = 1.0) -> float:
    solver = solver or SolverConfig.for_mode("training")
    return float(np.mean([scenario_loss(sc, state, solver, lam, delta, gradient=False)["loss"] for sc in scenarios]))


def fixed_weights(w: CostWeights) -> tuple:
    return tuple(getattr(w, name) for name in FIXED)


def train(scenarios, state: TrainState, config: TrainingConfig = TrainingConfig(), solver: SolverConfig | None = None,
          lam: LossWeights = LossWeights(), loss_csv=None, checkpoint=None, rng_seed: int = 0) -> TrainState:
    """Pretraining epochs on prediction and score, then joint epochs.

    The loss CSV gets one row per step tagged with its epoch; the checkpoint
    is rewritten after every epoch.

    Batches are drawn in a seeded shuffled order.  A non-finite loss aborts
    training and keeps the last good checkpoint on disk.
    """
    scenarios = list(scenarios)
    rng = np.random.default_rng(rng_seed)
    rows = []
    writer_file = open(loss_csv, "w", newline="", encoding="utf-8") if loss_csv else None
    writer = csv.writer(writer_file) if writer_file else None
    if writer:
        writer.writerow(LOSS_COLUMNS)
    try:
        phases = [("pretrain", True)] * config.pretrain_epochs + [("train", False)] * config.epochs
        for epoch, (phase, pre) in enumerate(phases):
            order = rng.permutation(len(scenarios))
            losses = []
            for start in range(0, len(order), config.batch_size):
                batch = [scenarios[i] for i in order[start:start + config.batch_size]]
                state, rep = train_step(batch, state, config, solver, lam, pretrain=pre)
                if not np.isfinite(rep.loss):
                    raise FloatingPointError(f"non-finite loss in epoch {epoch} ({', '.join(rep.skipped)})")
                losses.append(rep.loss)
                row = [epoch, state.step, phase, rep.loss] + [rep.parts.get(k, "") for k in PARTS]
                rows.append(row)
                if writer:
                    writer.writerow(row)
                    writer_file.flush()
            if checkpoint:
                state.save(checkpoint)
            log.info("epoch %d (%s): mean loss %.4f", epoch, phase, float(np.mean(losses)))
    finally:
        if writer_file:
            writer_file.close()
    return state


def scenario_features(scenario: Scenario) -> np.ndarray:
    return scene_features(scenario, scenario.current_step, scenario.ego_start, scenario.ego_lane_id)
