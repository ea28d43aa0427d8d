"""Dream-rollout evaluation against logged futures."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .autodiff import Params, no_record
from .config import TrainConfig
from .metrics import MetricsReport, aggregate, scenario_metrics
from .model import Sample
from .training import DreamRollout, RolloutAborted, dream_rollout, prepare

log = logging.getLogger(__name__)


def _rollouts(samples: list[Sample], params: Params, cfg: TrainConfig, H: int, rank: int):
    """Batched rollout, falling back to one scenario at a time on abort."""
    try:
        r = dream_rollout(samples, params, cfg, H, rank=rank)
        return [(s, r, i) for i, s in enumerate(samples)], []
    except RolloutAborted:
        out, aborted = [], []
        for s in samples:
            try:
                out.append((s, dream_rollout([s], params, cfg, H, rank=rank), 0))
            except RolloutAborted as exc:
                log.warning("rollout aborted: %s at step %d", s.id, exc.step)
                aborted.append({"scenario": s.id, "step": exc.step})
        return out, aborted


def predictions(rollout: DreamRollout, i: int) -> np.ndarray:
    """Native-rate ``(n_max, T, 2)`` positions of scene ``i``."""
    return rollout.positions()[i]


def evaluate(scenarios=None, params: Params | None = None, cfg: TrainConfig | None = None, H: int | None = None,
             k: int = 1, samples: list[Sample] | None = None, batch_size: int | None = None,
             dump_dir=None) -> MetricsReport:
    """Roll the world model out for ``H`` dream steps and score every agent observed over the horizon.

    Best-of-``k`` uses the ``k`` highest-scored plans at step 0. Aborted
    scenarios are excluded from the averages and listed on the report.
    """
    cfg = cfg or TrainConfig()
    if params is None:
        raise ValueError("evaluate: params required")
    samples = samples if samples is not None else prepare(list(scenarios), cfg)
    H = cfg.H if H is None else H
    if H < 1:
        raise ValueError("H must be >= 1")
    T = H * cfg.substeps
    bs = batch_size or cfg.batch_size
    preds: dict[str, list[np.ndarray]] = {s.id: [] for s in samples}
    aborted: dict[str, int] = {}
    dumps: dict[str, dict] = {}
    with no_record():
        for rank in range(k):
            for i in range(0, len(samples), bs):
                done, ab = _rollouts(samples[i:i + bs], params, cfg, H, rank)
                for a in ab:
                    aborted.setdefault(a["scenario"], a["step"])
                for s, r, j in done:
                    preds[s.id].append(predictions(r, j))
                    if rank == 0 and dump_dir is not None:
                        dumps[s.id] = rollout_record(s, r, j)
    per = []
    for s in samples:
        if s.id in aborted or not preds[s.id]:
            continue
        m = s.eval_mask
        if not m.any():
            continue
        p = np.stack(preds[s.id], axis=1)[m]
        gt = s.gt_states[m, 1:T + 1, :2]
        per.append(scenario_metrics(s.id, p, gt))
    ab_list = [{"scenario": sid, "step": st} for sid, st in aborted.items()]
    if dump_dir is not None:
        d = Path(dump_dir)
        d.mkdir(parents=True, exist_ok=True)
        for sid, rec in dumps.items():
            (d / f"{sid}.json").write_text(json.dumps(rec))
    if not per:
        raise RuntimeError(f"every rollout aborted ({len(ab_list)} scenarios)")
    return aggregate(per, k=k, aborted=ab_list)


def rollout_record(sample: Sample, rollout: DreamRollout, i: int) -> dict:
    """JSON-friendly view of one dreamed scene: per-step agent states and the ego plans."""
    slots = [j for j, ok in enumerate(sample.slot_mask) if ok]
    states = [np.stack([st.x.data[i], st.y.data[i], st.heading.data[i], st.speed.data[i]], -1) for st in rollout.states]
    return {
        "scenario": sample.id,
        "dt": rollout.dt,
        "H": rollout.H,
        "agents": [sample.agent_ids[j] for j in slots],
        "states": [[s[j].tolist() for j in slots] for s in states],
        "commands": [[[float(c.accel.data[i, j]), float(c.turn_rate.data[i, j])] for j in slots] for c in rollout.commands],
        "plans": [p.data[i].tolist() for p in rollout.plans],
        "target": rollout.target.data[i, 0].tolist(),
        "ground_truth": sample.gt_states[slots, :, :2].tolist(),
        "lanes": [lane.tolist() for lane in sample.frames[0].lanes],
    }
