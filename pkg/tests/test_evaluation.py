import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from dreamfore import autodiff as ad
from dreamfore import evaluation, training
from dreamfore.evaluation import evaluate, rollout_record
from dreamfore.metrics import min_ade
from dreamfore.model import init_model
from dreamfore.svg import DREAM_COLOR, TRUTH_COLOR, overlay
from dreamfore.training import dream_rollout, prepare
from conftest import tiny_config


@pytest.fixture(scope="module")
def model():
    from dreamfore.synthetic import generate_synthetic
    cfg = tiny_config()
    samples = prepare(generate_synthetic(0, 4), cfg)
    return cfg, samples, init_model(cfg, 60, np.random.default_rng(0))


def test_report_matches_direct_metric(model):
    cfg, samples, params = model
    rep = evaluate(params=params, cfg=cfg, samples=samples)
    with ad.no_record():
        r = dream_rollout(samples, params, cfg)
    T = cfg.H * cfg.substeps
    per = []
    for i, s in enumerate(samples):
        m = s.eval_mask
        per.append(min_ade(r.positions()[i][m][:, None], s.gt_states[m, 1:T + 1, :2]))
    assert rep.min_ade == pytest.approx(np.mean(per), rel=1e-12)
    assert rep.n_scenarios == len(samples) and rep.aborted == []


def test_batch_size_does_not_change_metrics(model):
    cfg, samples, params = model
    a = evaluate(params=params, cfg=cfg, samples=samples, batch_size=1)
    b = evaluate(params=params, cfg=cfg, samples=samples, batch_size=4)
    assert a.min_ade == pytest.approx(b.min_ade, rel=1e-9)


def test_best_of_k_never_worse(model):
    cfg, samples, params = model
    one = evaluate(params=params, cfg=cfg, samples=samples, k=1)
    three = evaluate(params=params, cfg=cfg, samples=samples, k=3)
    assert three.min_ade <= one.min_ade + 1e-12 and three.min_fde <= one.min_fde + 1e-12


def test_aborts_are_listed(model, monkeypatch):
    cfg, samples, params = model
    bad = samples[1].id

    def poisoned(batch, params_, cfg_, H=None, rank=0):
        if any(s.id == bad for s in batch):
            raise training.RolloutAborted(2, [s.id for s in batch], "injected")
        return dream_rollout(batch, params_, cfg_, H, rank)

    monkeypatch.setattr(evaluation, "dream_rollout", poisoned)
    rep = evaluate(params=params, cfg=cfg, samples=samples)
    assert rep.aborted == [{"scenario": bad, "step": 2}] and rep.n_scenarios == len(samples) - 1


def test_dump_and_overlay(model, tmp_path):
    cfg, samples, params = model
    evaluate(params=params, cfg=cfg, samples=samples[:2], dump_dir=tmp_path)
    rec = json.loads((tmp_path / f"{samples[0].id}.json").read_text())
    assert len(rec["states"]) == cfg.H + 1 and len(rec["plans"]) == cfg.H
    assert len(rec["agents"]) == len(rec["ground_truth"]) == int(samples[0].slot_mask.sum())
    root = ET.fromstring(overlay(rec))
    groups = {g.get("id"): g for g in root.iter("{http://www.w3.org/2000/svg}g")}
    assert set(groups) == {"map", "ground_truth", "dream", "plan"}
    assert len(groups["dream"]) == len(rec["agents"]) and len(groups["ground_truth"]) == len(rec["agents"])
    assert groups["dream"][0].get("stroke") == DREAM_COLOR and groups["ground_truth"][0].get("stroke") == TRUTH_COLOR
    assert groups["dream"][0].get("stroke-dasharray")


def test_overlay_handles_empty_record():
    rec = {"scenario": "x", "dt": 0.1, "H": 1, "states": [], "ground_truth": [], "plans": [], "lanes": []}
    ET.fromstring(overlay(rec))


def test_record_is_json_serialisable(model):
    cfg, samples, params = model
    with ad.no_record():
        r = dream_rollout(samples[:1], params, cfg, H=2)
    json.dumps(rollout_record(samples[0], r, 0))
