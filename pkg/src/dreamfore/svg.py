"""Dependency-free SVG overlay of map polylines, dreamed and logged trajectories."""

from __future__ import annotations

import xml.etree.ElementTree as ET

import numpy as np

DREAM_COLOR = "#d62728"
TRUTH_COLOR = "#1f77b4"
LANE_COLOR = "#bbbbbb"
PLAN_COLOR = "#2ca02c"


def _path(parent, pts, to_px, **attrs):
    pts = [to_px(p) for p in pts]
    if len(pts) < 2:
        return None
    d = "M{:.2f} {:.2f}".format(*pts[0]) + "".join("L{:.2f} {:.2f}".format(*p) for p in pts[1:])
    return ET.SubElement(parent, "path", d=d, fill="none", **attrs)


def overlay(record: dict, size: int = 600, margin: float = 10.0) -> str:
    """SVG text for one rollout record (see ``evaluation.rollout_record``).

    Ground truth is solid blue, the dream dashed red, the step-0 ego plan green.
    """
    lanes = [np.asarray(l) for l in record.get("lanes", []) if len(l) >= 2]
    truth = [np.asarray(t) for t in record["ground_truth"]]
    states = np.asarray(record["states"])
    dream = [states[:, j, :2] for j in range(states.shape[1])] if states.size else []
    plans = [np.asarray(record["plans"][0])[:, :2]] if record.get("plans") else []

    everything = [p for p in truth + dream + plans if len(p)]
    allpts = np.concatenate(everything, axis=0) if everything else np.zeros((1, 2))
    lo = allpts.min(0) - margin
    hi = allpts.max(0) + margin
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1.0))
    s = size / span

    def to_px(p):
        # y up in the scene, y down in SVG
        return ((p[0] - lo[0]) * s, size - (p[1] - lo[1]) * s)

    root = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=f"{size}px", height=f"{size}px",
                      viewBox=f"0 0 {size} {size}")
    ET.SubElement(root, "title").text = f"{record['scenario']} dt={record['dt']} H={record['H']}"
    g = ET.SubElement(root, "g", id="map")
    for lane in lanes:
        _path(g, lane, to_px, stroke=LANE_COLOR, **{"stroke-width": "1"})
    g = ET.SubElement(root, "g", id="ground_truth")
    for t in truth:
        _path(g, t, to_px, stroke=TRUTH_COLOR, **{"stroke-width": "2"})
    g = ET.SubElement(root, "g", id="dream")
    for t in dream:
        _path(g, t, to_px, stroke=DREAM_COLOR, **{"stroke-width": "2", "stroke-dasharray": "4 3"})
    g = ET.SubElement(root, "g", id="plan")
    for t in plans:
        _path(g, t, to_px, stroke=PLAN_COLOR, **{"stroke-width": "1.5"})
    return ET.tostring(root, encoding="unicode")


def write_overlay(record: dict, path, size: int = 600) -> None:
    with open(path, "w") as fh:
        fh.write(overlay(record, size))
