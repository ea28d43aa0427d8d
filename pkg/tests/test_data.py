import json
import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dreamfore.data import ScenarioLoadError, load, save, scenario_to_record, segment
from dreamfore.kinematics import commands_from_track
from dreamfore.scene import ScenarioError
from dreamfore.synthetic import ARCHETYPES, generate_synthetic
from fixtures import simple_scenario


def records_equal(a, b):
    return json.dumps(scenario_to_record(a), sort_keys=True) == json.dumps(scenario_to_record(b), sort_keys=True)


def test_round_trip_is_exact(tmp_path, corpus):
    path = tmp_path / "c.jsonl"
    save(corpus, path)
    loaded = load(path)
    assert len(loaded) == len(corpus)
    for a, b in zip(corpus, loaded):
        assert records_equal(a, b)
        for ta, tb in zip(a.tracks, b.tracks):
            np.testing.assert_array_equal(ta.states, tb.states)
    save(loaded, tmp_path / "d.jsonl")
    assert (tmp_path / "c.jsonl").read_bytes() == (tmp_path / "d.jsonl").read_bytes()


def test_empty_file_warns(tmp_path, caplog):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with caplog.at_level(logging.WARNING):
        assert load(path) == []
    assert "no scenarios" in caplog.text


def _record(**changes):
    rec = scenario_to_record(simple_scenario(2))
    rec.update(changes)
    return rec


def test_one_point_polyline_rejected_with_line_number(tmp_path):
    bad = _record()
    bad["polylines"][0]["points"] = [[0.0, 0.0]]
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(_record()) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(ScenarioLoadError) as err:
        load(path)
    assert len(err.value.diagnostics) == 1 and ":2:" in err.value.diagnostics[0]
    assert len(load(path, strict=False)) == 1


def test_speed_unit_sanity(tmp_path):
    bad = _record()
    bad["tracks"][1]["speed"] = [150.0] * len(bad["tracks"][1]["speed"])
    path = tmp_path / "fast.jsonl"
    path.write_text(json.dumps(bad) + "\n")
    with pytest.raises(ScenarioLoadError, match="unit sanity"):
        load(path)


@pytest.mark.parametrize("mutate", [
    lambda r: r.update(schema_version=2),
    lambda r: r.pop("ego_id"),
    lambda r: r["tracks"][0]["valid"].pop(),
    lambda r: r.update(ego_id="ghost"),
])
def test_schema_violations_rejected(tmp_path, mutate):
    rec = _record()
    mutate(rec)
    path = tmp_path / "x.jsonl"
    path.write_text(json.dumps(rec) + "\n{not json\n")
    with pytest.raises(ScenarioLoadError) as err:
        load(path)
    assert len(err.value.diagnostics) == 2


def test_segment_counts():
    sc = simple_scenario(2, steps=110, obs=40, hor=60)
    assert len(segment(sc, 40, 60, 10)) == 2
    assert len(segment(sc, 40, 60, 500)) == 1
    assert segment(sc, 60, 60, 10) == []
    with pytest.raises(ValueError):
        segment(sc, 40, 60, 0)


def test_segment_drops_windows_with_invalid_ego():
    sc = simple_scenario(2, steps=130)
    sc.tracks[0].valid[5] = False
    segs = segment(sc, 40, 60, 10)
    assert [s.id for s in segs] == ["fixture-s10", "fixture-s20", "fixture-s30"]


@given(st.integers(0, 50), st.integers(1, 40))
def test_segments_always_valid(extra, stride):
    sc = generate_synthetic(3, 1, extra_steps=extra)[0]
    for seg in segment(sc, 20, 30, stride):
        seg.validate()
        assert seg.num_steps == 50


def test_generator_deterministic_and_ids_disjoint():
    a, b = generate_synthetic(5, 8), generate_synthetic(5, 8)
    assert all(records_equal(x, y) for x, y in zip(a, b))
    c = generate_synthetic(6, 8)
    assert not {s.id for s in a} & {s.id for s in c}
    assert [s.id.rsplit("-", 1)[1] for s in a[:4]] == list(ARCHETYPES)


def test_straight_archetype_heading_constant():
    for sc in generate_synthetic(11, 6, mix=["straight"]):
        h = sc.ego_track.states[sc.t_obs:, 2]
        assert np.var(h) < 1e-6


def test_yield_archetype_stops_near_crosswalk():
    for sc in generate_synthetic(12, 5, mix=["pedestrian_yield"]):
        cw = [p for p in sc.polylines if p.kind == "crosswalk"][0].points.mean(0)
        st = sc.ego_track.states
        near = np.linalg.norm(st[:, :2] - cw, axis=1) < 15.0
        assert near.any() and st[near, 3].min() < 0.5


def test_generated_commands_are_bounded_and_exact():
    for sc in generate_synthetic(13, 8):
        for tr in sc.tracks:
            cmd = commands_from_track(tr.states, sc.dt)[1:]
            assert np.all(np.abs(cmd[:, 0]) <= 10.0) and np.all(np.abs(cmd[:, 1]) <= 1.5)


def test_bad_mix_rejected():
    with pytest.raises(ValueError):
        generate_synthetic(0, 2, mix=["flying"])
    with pytest.raises(ValueError):
        generate_synthetic(0, 0)
    weighted = generate_synthetic(0, 6, mix={"straight": 1.0, "protected_left": 0.0})
    assert all(s.id.endswith("straight") for s in weighted)


def test_load_rejects_bad_scenario_object():
    with pytest.raises(ScenarioError):
        from dreamfore.data import record_to_scenario
        record_to_scenario([1, 2])
