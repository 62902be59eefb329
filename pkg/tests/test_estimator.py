import dataclasses
import json

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import make_scenario
from diffplan import DiffPlanner
from diffplan.estimator import check_scenarios, check_weights
from diffplan.residuals import FIXED, CostWeights
from diffplan.suite import BUNDLED_SUITE
from diffplan.world import save_scenario


def test_get_set_params_and_clone():
    est = DiffPlanner(horizon=10, n_steps=3)
    params = est.get_params()
    assert params["horizon"] == 10 and params["n_steps"] == 3 and params["initializer"] == "heuristic"
    est.set_params(learning_rate=1e-3)
    assert est.learning_rate == 1e-3
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est


def test_check_scenarios_accepts_paths_dicts_and_objects(tmp_path):
    sc = make_scenario(name="empty")
    path = tmp_path / "s.json"
    save_scenario(sc, path)
    doc = json.loads(path.read_text())
    out = check_scenarios([sc, str(path), path, doc])
    assert [s.name for s in out] == ["empty"] * 4
    assert len(check_scenarios(path)) == 1
    with pytest.raises(ValueError):
        check_scenarios([])
    with pytest.raises(TypeError):
        check_scenarios([42])
    with pytest.raises(TypeError):
        check_scenarios(3.5)


def test_check_weights(tmp_path):
    assert check_weights(None) == CostWeights()
    w = dataclasses.replace(CostWeights(), w_safe=2.0)
    assert check_weights(w) is w
    assert check_weights(w.to_dict()) == w
    w.save(tmp_path / "w.json")
    assert check_weights(tmp_path / "w.json") == w
    with pytest.raises(TypeError):
        check_weights(1.0)


def test_predict_requires_fit():
    with pytest.raises(NotFittedError):
        DiffPlanner().predict(make_scenario())


def test_invalid_hyperparameters_rejected():
    with pytest.raises(ValueError):
        DiffPlanner(initializer="oracle", n_steps=0).fit(make_scenario())
    with pytest.raises(ValueError):
        DiffPlanner(n_steps=-1).fit(make_scenario())


def test_fit_predict_on_short_batch():
    batch = [dataclasses.replace(s, horizon_steps=10)
             for s in check_scenarios([BUNDLED_SUITE / "slow_lv_00.json", BUNDLED_SUITE / "car_following_00.json"])]
    est = DiffPlanner(n_steps=2, learning_rate=1e-2, horizon=10).fit(batch)
    assert est.n_iter_ == 2 and len(est.loss_curve_) == 2 and est.n_scenarios_seen_ == 2
    assert all(getattr(est.weights_, n) == getattr(CostWeights(), n) for n in FIXED)
    pred = est.predict(batch)
    assert pred.shape == (2,) and set(pred) <= {-1, 0, 1}
    trajs = est.predict_trajectory(batch[0])
    assert trajs[0].shape == (11, 4)
    assert np.isfinite(est.score(batch))
    toy = clone(est).set_params(initializer="toy").fit(batch)
    assert toy.predict(batch).shape == (2,)


def test_zero_steps_keeps_initial_weights():
    est = DiffPlanner(n_steps=0, horizon=10).fit(make_scenario(n_lanes=2, ego_v=15.0, speed_limit=15.0))
    assert est.weights_ == CostWeights() and est.loss_curve_ == []
    assert est.predict(make_scenario(n_lanes=2, ego_v=15.0, speed_limit=15.0))[0] == 0
