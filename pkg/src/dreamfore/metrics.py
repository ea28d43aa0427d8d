"""Displacement and miss-rate metrics for K-mode trajectory forecasts.

Predictions are ``(A, K, T, 2)`` arrays against ``(A, T, 2)`` ground truth.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

MISS_THRESHOLD = 2.0


def _check(preds, gt) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if preds.ndim == 3:
        preds = preds[:, None]
    if preds.ndim != 4 or gt.ndim != 3 or preds.shape[-1] < 2:
        raise ValueError(f"expected preds (A, K, T, 2) and gt (A, T, 2), got {preds.shape} and {gt.shape}")
    if preds.shape[0] != gt.shape[0] or preds.shape[2] != gt.shape[1]:
        raise ValueError(f"length mismatch: preds {preds.shape} vs gt {gt.shape}")
    if preds.shape[1] < 1:
        raise ValueError("need K >= 1 predictions per agent")
    return preds[..., :2], gt[..., :2]


def agent_ade(preds, gt) -> np.ndarray:
    """Best-of-K mean displacement per agent."""
    p, g = _check(preds, gt)
    return np.linalg.norm(p - g[:, None], axis=-1).mean(-1).min(-1)


def agent_fde(preds, gt) -> np.ndarray:
    p, g = _check(preds, gt)
    return np.linalg.norm(p[:, :, -1] - g[:, None, -1], axis=-1).min(-1)


def min_ade(preds, gt) -> float:
    return float(agent_ade(preds, gt).mean())


def min_fde(preds, gt) -> float:
    return float(agent_fde(preds, gt).mean())


def actor_mr(preds, gt, threshold: float = MISS_THRESHOLD) -> float:
    """Fraction of agents whose best-of-K final error exceeds ``threshold``."""
    return float((agent_fde(preds, gt) > threshold).mean())


@dataclass
class MetricsReport:
    k: int
    min_ade: float
    min_fde: float
    actor_mr: float
    n_scenarios: int
    per_scenario: list = field(default_factory=list)
    aborted: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """Aggregate row first, then one row per scenario."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "n_agents", f"minADE_{self.k}", f"minFDE_{self.k}", f"actorMR_{self.k}"])
        w.writerow(["ALL", sum(r["n_agents"] for r in self.per_scenario), repr(self.min_ade), repr(self.min_fde), repr(self.actor_mr)])
        for r in self.per_scenario:
            w.writerow([r["scenario"], r["n_agents"], repr(r["min_ade"]), repr(r["min_fde"]), repr(r["actor_mr"])])
        return buf.getvalue()


def aggregate(per_scenario: list[dict], k: int = 1, aborted=None) -> MetricsReport:
    """Scenario-level mean of per-scenario metrics."""
    if not per_scenario:
        raise ValueError("no scenarios to aggregate")
    mean = lambda key: float(np.mean([r[key] for r in per_scenario]))  # noqa: E731
    return MetricsReport(k, mean("min_ade"), mean("min_fde"), mean("actor_mr"), len(per_scenario),
                         list(per_scenario), list(aborted or []))


def scenario_metrics(scenario_id: str, preds, gt) -> dict:
    return {
        "scenario": scenario_id,
        "n_agents": int(np.asarray(gt).shape[0]),
        "min_ade": min_ade(preds, gt),
        "min_fde": min_fde(preds, gt),
        "actor_mr": actor_mr(preds, gt),
    }
