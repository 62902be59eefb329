"""Kinematic bicycle model: discrete step, rollout and analytic Jacobians."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from diffplan import ad


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.8
    length: float = 4.8
    width: float = 1.9
    dt: float = 0.1
    a_max: float = 5.0
    delta_max: float = 0.6

    def __post_init__(self):
        for name in ("wheelbase", "length", "width", "dt", "a_max", "delta_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"VehicleParams.{name} must be positive")


class EgoState(NamedTuple):
    px: float
    py: float
    theta: float
    v: float


class ControlInput(NamedTuple):
    a: float
    delta: float


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, 4)
    controls: np.ndarray  # (T, 2)

    def __post_init__(self):
        if len(self.states) != len(self.controls) + 1:
            raise ValueError("a trajectory has one more state than controls")


def clamp_controls(u, params: VehicleParams):
    u = np.asarray(u, dtype=float)
    return np.stack([np.clip(u[..., 0], -params.a_max, params.a_max),
                     np.clip(u[..., 1], -params.delta_max, params.delta_max)], axis=-1)


def _clip(x: float, bound: float) -> float:
    # comparisons are False for NaN, so NaN passes through like np.clip
    return -bound if x < -bound else bound if x > bound else x


def _advance(px, py, th, v, a, delta, params: VehicleParams):
    """Scalar core shared by :func:`step` and :func:`rollout` so both agree bit for bit."""
    a, delta = _clip(a, params.a_max), _clip(delta, params.delta_max)
    dt = params.dt
    return (px + v * math.cos(th) * dt,
            py + v * math.sin(th) * dt,
            th + v / params.wheelbase * math.tan(delta) * dt,
            v + a * dt)


def step(x, u, params: VehicleParams) -> np.ndarray:
    """One step of the discrete bicycle model with clamped controls."""
    px, py, th, v = (float(c) for c in np.asarray(x, dtype=float).reshape(4))
    a, delta = (float(c) for c in np.asarray(u, dtype=float).reshape(2))
    return np.array(_advance(px, py, th, v, a, delta, params))


def _control_active(u, params: VehicleParams):
    """Per-component interior mask; the clamp has zero derivative on and past its bound."""
    u = ad.value(u)
    return np.abs(u[..., 0]) < params.a_max, np.abs(u[..., 1]) < params.delta_max


def step_jacobians(x, u, params: VehicleParams) -> tuple[np.ndarray, np.ndarray]:
    """Analytic ``(d x'/d x, d x'/d u)`` of :func:`step`, shapes (4, 4) and (4, 2)."""
    A, B = trajectory_jacobians(np.asarray(x, dtype=float)[None], np.asarray(u, dtype=float)[None], params)
    return A[0], B[0]


def rollout(x0, controls, params: VehicleParams) -> Trajectory:
    controls = np.asarray(controls, dtype=float).reshape(-1, 2)
    states = np.empty((len(controls) + 1, 4))
    states[0] = x0
    cur = tuple(float(c) for c in states[0])
    for k, (a, delta) in enumerate(controls.tolist()):
        cur = _advance(*cur, a, delta, params)
        states[k + 1] = cur
    return Trajectory(states, controls)


def rollout_states(x0, controls, params: VehicleParams):
    """Rollout that also accepts duals; returns the ``(T+1, 4)`` state array."""
    if not ad.is_dual(controls) and not ad.is_dual(x0):
        return rollout(x0, controls, params).states
    a = ad.clip(controls[:, 0], -params.a_max, params.a_max)
    delta = ad.clip(controls[:, 1], -params.delta_max, params.delta_max)
    steer = ad.tan(delta) * (params.dt / params.wheelbase)
    px, py, th, v = x0[0], x0[1], x0[2], x0[3]
    rows = [ad.stack([px, py, th, v])]
    for k in range(len(controls)):
        px, py, th, v = (px + v * ad.cos(th) * params.dt,
                         py + v * ad.sin(th) * params.dt,
                         th + v * steer[k],
                         v + a[k] * params.dt)
        rows.append(ad.stack([px, py, th, v]))
    return ad.stack(rows)


def trajectory_jacobians(states, controls, params: VehicleParams):
    """Step Jacobians along a trajectory: ``A`` (T, 4, 4) and ``B`` (T, 4, 2).

    ``states[k]`` and ``controls[k]`` are the linearization points of step
    ``k``.  Works on duals so that the Jacobians themselves can be
    differentiated.
    """
    dt, L = params.dt, params.wheelbase
    act_a, act_d = _control_active(controls, params)
    delta = ad.clip(controls[:, 1], -params.delta_max, params.delta_max)
    th, v = states[:, 2], states[:, 3]
    c, s = ad.cos(th), ad.sin(th)
    tdelta = ad.tan(delta)
    sec2 = 1.0 / ad.cos(delta) ** 2
    n = len(ad.value(th))
    zero = np.zeros(n)
    one = np.ones(n)
    A = ad.stack([
        ad.stack([one, zero, -v * s * dt, c * dt], axis=1),
        ad.stack([zero, one, v * c * dt, s * dt], axis=1),
        ad.stack([zero, zero, one, tdelta * (dt / L)], axis=1),
        ad.stack([zero, zero, zero, one], axis=1),
    ], axis=1)
    ddelta = ad.where(act_d, v * sec2 * (dt / L), 0.0)
    B = ad.stack([
        ad.stack([zero, zero], axis=1),
        ad.stack([zero, zero], axis=1),
        ad.stack([zero, ddelta], axis=1),
        ad.stack([np.where(act_a, dt, 0.0), zero], axis=1),
    ], axis=1)
    return A, B


def state_sensitivities(A, B):
    """``S[k] = d x_k / d u`` for k = 0..T, shape (T+1, 4, 2T), by forward recursion."""
    T = len(ad.value(A))
    eye_cols = np.eye(2 * T)
    S = [np.zeros((4, 2 * T))]
    for k in range(T):
        S.append(ad.matmul(A[k], S[-1]) + ad.matmul(B[k], eye_cols[2 * k:2 * k + 2]))
    return ad.stack(S)


def verify_trajectory(states, controls, params: VehicleParams) -> bool:
    """Exact step-recurrence check, as used on logged trajectories."""
    states = np.asarray(states, dtype=float)
    return all(np.array_equal(step(states[k], controls[k], params), states[k + 1]) for k in range(len(controls)))
