import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dreamfore.metrics import MetricsReport, actor_mr, aggregate, agent_ade, min_ade, min_fde, scenario_metrics
from oracles import brute_metrics


def random_fixture(rng):
    a, k, t = rng.integers(1, 6), rng.integers(1, 7), rng.integers(1, 31)
    gt = rng.normal(scale=10, size=(a, t, 2))
    preds = gt[:, None] + rng.normal(scale=rng.uniform(0.1, 4), size=(a, k, t, 2))
    return preds, gt


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        preds, gt = random_fixture(rng)
        ade, fde, mr = brute_metrics(preds, gt)
        assert min_ade(preds, gt) == pytest.approx(ade, abs=1e-9)
        assert min_fde(preds, gt) == pytest.approx(fde, abs=1e-9)
        assert actor_mr(preds, gt) == pytest.approx(mr, abs=1e-9)


def rigid(x, theta, shift):
    c, s = np.cos(theta), np.sin(theta)
    r = np.array([[c, -s], [s, c]])
    return x @ r.T + shift


@given(st.integers(0, 2**31 - 1))
def test_rigid_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    preds, gt = random_fixture(rng)
    theta, shift = rng.uniform(-np.pi, np.pi), rng.normal(scale=100, size=2)
    for fn in (min_ade, min_fde, actor_mr):
        assert fn(rigid(preds, theta, shift), rigid(gt, theta, shift)) == pytest.approx(fn(preds, gt), abs=1e-9)


def test_perfect_predictions_score_zero():
    gt = np.random.default_rng(1).normal(size=(3, 10, 2))
    preds = np.repeat(gt[:, None], 4, axis=1)
    assert min_ade(preds, gt) == 0 and min_fde(preds, gt) == 0 and actor_mr(preds, gt) == 0


def test_miss_threshold_is_strict():
    gt = np.zeros((1, 2, 2))
    at = np.zeros((1, 1, 2, 2))
    at[0, 0, -1, 0] = 2.0
    assert actor_mr(at, gt) == 0.0
    at[0, 0, -1, 0] = 2.0 + 1e-9
    assert actor_mr(at, gt) == 1.0


def test_best_of_k_picks_min_per_agent():
    gt = np.zeros((1, 3, 2))
    preds = np.stack([np.full((3, 2), 5.0), np.full((3, 2), 1.0)])[None]
    assert agent_ade(preds, gt)[0] == pytest.approx(np.sqrt(2))


def test_three_dimensional_preds_treated_as_single_mode():
    gt = np.zeros((2, 4, 2))
    assert min_ade(gt + 1.0, gt) == pytest.approx(np.sqrt(2))


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        min_ade(np.zeros((2, 1, 5, 2)), np.zeros((2, 4, 2)))
    with pytest.raises(ValueError):
        min_ade(np.zeros((3, 1, 4, 2)), np.zeros((2, 4, 2)))
    with pytest.raises(ValueError):
        min_ade(np.zeros((2, 0, 4, 2)), np.zeros((2, 4, 2)))


@given(st.integers(0, 2**31 - 1))
def test_ranges(seed):
    preds, gt = random_fixture(np.random.default_rng(seed))
    assert min_ade(preds, gt) >= 0 and min_fde(preds, gt) >= 0
    assert 0.0 <= actor_mr(preds, gt) <= 1.0


def test_aggregate_is_scenario_mean_and_serialises():
    rows = [scenario_metrics("a", np.ones((1, 2, 2)), np.zeros((1, 2, 2))),
            scenario_metrics("b", np.zeros((3, 2, 2)), np.zeros((3, 2, 2)))]
    rep = aggregate(rows, k=1, aborted=[{"scenario": "c", "step": 4}])
    assert rep.min_ade == pytest.approx(np.sqrt(2) / 2)
    assert rep.n_scenarios == 2
    doc = json.loads(rep.to_json())
    assert doc["aborted"] == [{"scenario": "c", "step": 4}]
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("scenario,n_agents,minADE_1")
    assert lines[1].startswith("ALL,4,")
    assert len(lines) == 4
    with pytest.raises(ValueError):
        aggregate([])
    assert isinstance(rep, MetricsReport)
