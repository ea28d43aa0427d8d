"""Scenario JSONL ingestion, export and segmentation of long recordings.

One JSON object per line::

    {"schema_version": 1, "id": str, "sample_rate": float, "ego_id": str,
     "observation_len": int, "horizon_len": int,
     "polylines": [{"id": str, "kind": "lane"|"boundary"|"crosswalk",
                    "points": [[x, y], ...]}],
     "tracks": [{"agent_id": str,
                 "object_class": "vehicle"|"pedestrian"|"cyclist"|"other",
                 "x": [...], "y": [...], "heading": [...], "speed": [...],
                 "valid": [bool, ...]}]}

Units are meters, seconds and radians; every track has one entry per step.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .scene import AgentTrack, MapPolyline, Scenario, ScenarioError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MAX_SPEED = 100.0

# Field mapping for external datasets; no parser ships with the package.
ARGOVERSE2_FIELD_MAP = {
    "scenario_id": "id",
    "focal_track_id / AV": "ego_id",
    "track_id": "tracks[].agent_id",
    "object_type (vehicle|bus -> vehicle, pedestrian, cyclist|motorcyclist -> cyclist, else other)": "tracks[].object_class",
    "position_x, position_y": "tracks[].x, tracks[].y",
    "heading": "tracks[].heading",
    "hypot(velocity_x, velocity_y)": "tracks[].speed",
    "lane_segments[].centerline": "polylines[kind=lane]",
    "lane_segments[].left/right_lane_boundary": "polylines[kind=boundary]",
    "pedestrian_crossings[].edge1/edge2": "polylines[kind=crosswalk]",
}
IND_FIELD_MAP = {
    "recordingId + window start": "id",
    "trackId": "tracks[].agent_id",
    "class (car|truck_bus -> vehicle, pedestrian, bicycle -> cyclist)": "tracks[].object_class",
    "xCenter, yCenter": "tracks[].x, tracks[].y",
    "heading (degrees -> radians, wrapped)": "tracks[].heading",
    "hypot(xVelocity, yVelocity)": "tracks[].speed",
    "lanelet2 centerlines": "polylines[kind=lane]",
}


class ScenarioLoadError(ValueError):
    def __init__(self, diagnostics: list[str]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(diagnostics))


def scenario_to_record(sc: Scenario) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "id": sc.id,
        "sample_rate": float(sc.sample_rate),
        "ego_id": sc.ego_id,
        "observation_len": int(sc.observation_len),
        "horizon_len": int(sc.horizon_len),
        "polylines": [
            {"id": pl.id, "kind": pl.kind, "points": pl.points.tolist()} for pl in sc.polylines
        ],
        "tracks": [
            {
                "agent_id": tr.agent_id,
                "object_class": tr.object_class,
                "x": tr.states[:, 0].tolist(),
                "y": tr.states[:, 1].tolist(),
                "heading": tr.states[:, 2].tolist(),
                "speed": tr.states[:, 3].tolist(),
                "valid": tr.valid.tolist(),
            }
            for tr in sc.tracks
        ],
    }


def record_to_scenario(rec: dict) -> Scenario:
    if not isinstance(rec, dict):
        raise ScenarioError("record is not an object")
    version = rec.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema_version {version!r}")
    try:
        polylines = [MapPolyline(str(p["id"]), p["kind"], np.asarray(p["points"], dtype=np.float64))
                     for p in rec["polylines"]]
        tracks = []
        for t in rec["tracks"]:
            cols = [np.asarray(t[k], dtype=np.float64) for k in ("x", "y", "heading", "speed")]
            if len({len(c) for c in cols} | {len(t["valid"])}) != 1:
                raise ScenarioError(f"track {t.get('agent_id')}: column lengths differ")
            tracks.append(AgentTrack(str(t["agent_id"]), t["object_class"], np.stack(cols, axis=1),
                                     np.asarray(t["valid"], dtype=bool)))
        sc = Scenario(
            id=str(rec["id"]),
            sample_rate=float(rec["sample_rate"]),
            polylines=polylines,
            tracks=tracks,
            ego_id=str(rec["ego_id"]),
            observation_len=int(rec["observation_len"]),
            horizon_len=int(rec["horizon_len"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"malformed record: {exc!r}") from exc
    validate_scenario(sc)
    return sc


def validate_scenario(sc: Scenario) -> None:
    sc.validate()
    for tr in sc.tracks:
        fast = tr.states[tr.valid, 3] > MAX_SPEED
        if fast.any():
            raise ScenarioError(f"track {tr.agent_id}: speed above {MAX_SPEED} m/s (unit sanity)")


def load(path, strict: bool = True) -> list[Scenario]:
    """Read and validate a scenario JSONL file.

    Malformed records raise :class:`ScenarioLoadError` (one diagnostic per bad
    line) when ``strict``; otherwise they are logged and skipped.
    """
    path = Path(path)
    out, diagnostics = [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(record_to_scenario(json.loads(line)))
            except (json.JSONDecodeError, ScenarioError) as exc:
                diagnostics.append(f"{path}:{lineno}: {exc}")
    if diagnostics:
        if strict:
            raise ScenarioLoadError(diagnostics)
        for d in diagnostics:
            log.warning("rejected record %s", d)
    if not out and not diagnostics:
        log.warning("%s contains no scenarios", path)
    return out


def save(scenarios, path) -> None:
    with Path(path).open("w") as fh:
        for sc in scenarios:
            fh.write(json.dumps(scenario_to_record(sc)))
            fh.write("\n")


def segment(scenario: Scenario, obs_len: int, horizon_len: int, stride: int) -> list[Scenario]:
    """Cut sliding windows of ``obs_len + horizon_len`` steps.

    Windows where the ego is not valid throughout are dropped, as are tracks
    with no valid step inside a window.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    window = obs_len + horizon_len
    n = scenario.num_steps
    if n < window:
        log.warning("scenario %s: %d steps shorter than window %d", scenario.id, n, window)
        return []
    out = []
    for start in range(0, n - window + 1, stride):
        sl = slice(start, start + window)
        if not scenario.ego_track.valid[sl].all():
            continue
        tracks = [
            AgentTrack(tr.agent_id, tr.object_class, tr.states[sl].copy(), tr.valid[sl].copy())
            for tr in scenario.tracks
            if tr.valid[sl].any()
        ]
        seg = Scenario(
            id=f"{scenario.id}-s{start}",
            sample_rate=scenario.sample_rate,
            polylines=[MapPolyline(p.id, p.kind, p.points.copy()) for p in scenario.polylines],
            tracks=tracks,
            ego_id=scenario.ego_id,
            observation_len=obs_len,
            horizon_len=horizon_len,
        )
        seg.validate()
        out.append(seg)
    return out
