from __future__ import annotations

import numpy as np
import pytest

from diffplan.suite import bundled_suite, lane_y, straight_lanes
from diffplan.world import AgentTrack, Scenario

# acceptance results collected during the session: number -> (passed, detail)
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def suite():
    return bundled_suite()


@pytest.fixture(scope="session")
def suite_by_name(suite):
    return {sc.name: sc for sc in suite}


def vehicle_track(aid, x, lane_id, v, n=260, kind="vehicle", length=4.8, width=1.9, y=None):
    """Constant-speed track along +x that sits at ``x`` at step 20."""
    y = lane_y(lane_id) if y is None else y
    xs = x + v * 0.1 * (np.arange(n) - 20)
    poses = np.stack([xs, np.full(n, y), np.zeros(n), np.full(n, v)], axis=1)
    return AgentTrack(aid, kind, length, width, poses)


def make_scenario(n_lanes=2, agents=(), signals=(), ego_lane=1, ego_x=60.0, ego_v=10.0, horizon=50,
                  speed_limit=15.0, name="test"):
    """Straight-road scenario with a constant-speed recorded ego."""
    lanes = straight_lanes(n_lanes, speed_limit)
    ego = np.array([ego_x, lane_y(ego_lane), 0.0, ego_v])
    k = np.arange(200)
    gt = np.stack([ego_x + ego_v * 0.1 * k, np.full(200, ego[1]), np.zeros(200), np.full(200, ego_v)], axis=1)
    return Scenario(lanes=lanes, agents=tuple(agents), signals=tuple(signals), ego_start=ego, ego_lane_id=ego_lane,
                    ego_ground_truth=gt, horizon_steps=horizon, name=name)
