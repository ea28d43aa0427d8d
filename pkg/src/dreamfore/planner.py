"""Target-driven ego planning: anchors, target distribution, trajectories, scoring."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Params, Tensor
from .config import ModelConfig
from .scene import LatentScene, VectorSet, resample_polyline

log = logging.getLogger(__name__)

INVALID_LOGIT = -1e4


@dataclass
class TargetCandidates:
    anchors: np.ndarray
    valid: np.ndarray
    fallback: bool = False


@dataclass
class TargetDistribution:
    logits: Tensor
    probs: Tensor
    offsets: Tensor
    valid: np.ndarray


def traj_channel_scale(cfg: ModelConfig) -> np.ndarray:
    """Per-channel output scale for ``[x, y, accel, turn]``."""
    return np.array([cfg.coord_scale, cfg.coord_scale, 1.0, 0.25])


def generate_candidates(x: VectorSet, n: int, horizon_s: float, cfg: ModelConfig) -> TargetCandidates:
    """Anchors sampled along ego-frame lane centerlines within reach.

    Reach is ``speed * horizon + margin``; anchors are deduplicated on a 1 m
    grid and evenly thinned or padded to ``n``. Padding rows are invalid.
    Without any lane in reach a radial fan ahead of the ego is used.
    """
    if n < 1:
        raise ValueError("need at least one anchor")
    speed = float(x.agent_states[0, 3])
    ego_xy = x.agent_states[0, :2]
    reach = speed * horizon_s + cfg.anchor_margin
    pts, seen = [], set()
    for lane in x.lanes:
        for p in resample_polyline(lane, cfg.anchor_spacing):
            if np.linalg.norm(p - ego_xy) > reach:
                continue
            key = (int(np.floor(p[0])), int(np.floor(p[1])))
            if key in seen:
                continue
            seen.add(key)
            pts.append(p)
    fallback = not pts
    if fallback:
        log.warning("no lane centerline within %.1f m; using a radial anchor fan", reach)
        heading = float(x.agent_states[0, 2])
        radii = np.linspace(reach / 4, reach, 4)
        angles = heading + np.linspace(-np.pi / 2, np.pi / 2, max(1, int(np.ceil(n / 4))))
        pts = [ego_xy + r * np.array([np.cos(a), np.sin(a)]) for a in angles for r in radii]
    pts = np.asarray(pts)
    if len(pts) > n:
        pts = pts[np.round(np.linspace(0, len(pts) - 1, n)).astype(int)]
    valid = np.zeros(n, dtype=bool)
    valid[: len(pts)] = True
    if len(pts) < n:
        pts = np.concatenate([pts, np.repeat(pts[-1:], n - len(pts), axis=0)])
    return TargetCandidates(pts, valid, fallback)


def _add_pair(params: Params, name: str, ctx_dim: int, item_dim: int, hidden: int, rng) -> None:
    ad.add_linear(params, f"{name}.ctx", ctx_dim, hidden, rng)
    params[f"{name}.item"] = Tensor(ad.glorot(rng, item_dim, hidden), requires_grad=True, name=f"{name}.item")


def _pair_hidden(params: Params, name: str, ctx: Tensor, items: Tensor) -> Tensor:
    """First layer of an MLP on ``concat(ctx, item)`` for every item."""
    b, n, f = items.shape
    hc = ad.apply_linear(params, f"{name}.ctx", ctx)
    hi = ad.matmul(items.reshape(b * n, f), params[f"{name}.item"])
    return ad.relu(ad.expand(hc, n, axis=1).reshape(b * n, hc.shape[1]) + hi)


def init_planner(params: Params, cfg: ModelConfig, plan_steps: int, rng) -> None:
    c = cfg.n_max * cfg.d_model
    _add_pair(params, "plan.u.l1", c, 2, cfg.target_hidden, rng)
    ad.add_linear(params, "plan.u.out", cfg.target_hidden, 1, rng)
    _add_pair(params, "plan.v.l1", c, 2, cfg.target_hidden, rng)
    ad.add_linear(params, "plan.v.out", cfg.target_hidden, 2, rng, gain=0.1)
    _add_pair(params, "plan.traj.l1", c, 2, cfg.traj_hidden, rng)
    ad.add_linear(params, "plan.traj.l2", cfg.traj_hidden, cfg.traj_hidden, rng)
    ad.add_linear(params, "plan.traj.out", cfg.traj_hidden, plan_steps * 4, rng)
    _add_pair(params, "plan.g.l1", c, plan_steps * 4, cfg.score_hidden, rng)
    ad.add_linear(params, "plan.g.out", cfg.score_hidden, 1, rng)


def plan_steps_of(params: Params) -> int:
    return params["plan.traj.out.b"].shape[0] // 4


def _ctx(z: LatentScene) -> Tensor:
    return z.flat()


def score_targets(z: LatentScene, anchors: np.ndarray, valid: np.ndarray, params: Params,
                  cfg: ModelConfig) -> TargetDistribution:
    """Softmax over ``u(anchor | z)`` plus per-anchor offset means from ``v``."""
    ctx = _ctx(z)
    b = ctx.shape[0]
    anchors = np.asarray(anchors, dtype=np.float64).reshape(b, -1, 2)
    valid = np.asarray(valid, dtype=bool).reshape(b, -1)
    n = anchors.shape[1]
    items = Tensor(anchors / cfg.coord_scale)
    hu = _pair_hidden(params, "plan.u.l1", ctx, items)
    logits = ad.apply_linear(params, "plan.u.out", hu).reshape(b, n)
    logits = ad.where(valid, logits, Tensor(np.full((b, n), INVALID_LOGIT)))
    hv = _pair_hidden(params, "plan.v.l1", ctx, items)
    offsets = ad.apply_linear(params, "plan.v.out", hv).reshape(b, n, 2)
    return TargetDistribution(logits, ad.softmax(logits, axis=-1), offsets, valid)


def target_log_density(dist: TargetDistribution, offsets: np.ndarray) -> np.ndarray:
    """Log of the joint anchor/offset density with unit-variance Gaussians."""
    lg = dist.logits.data - dist.logits.data.max(-1, keepdims=True)
    logp = lg - np.log(np.exp(lg).sum(-1, keepdims=True))
    diff = np.asarray(offsets) - dist.offsets.data
    return logp - 0.5 * (diff**2).sum(-1) - np.log(2 * np.pi)


def top_targets(dist: TargetDistribution, anchors: np.ndarray, m: int) -> tuple[np.ndarray, Tensor]:
    """Indices of the ``m`` most probable valid anchors and their offset targets."""
    p = dist.probs.data
    b, n = p.shape
    idx = np.zeros((b, m), dtype=np.int64)
    for i in range(b):
        order = [j for j in np.argsort(-p[i], kind="stable") if dist.valid[i, j]]
        order = (order * (m // max(len(order), 1) + 1))[:m] if order else [0] * m
        idx[i] = order
    flat = (idx + np.arange(b)[:, None] * n).reshape(-1)
    anc = Tensor(np.asarray(anchors).reshape(b * n, 2)[flat])
    off = ad.gather_rows(dist.offsets.reshape(b * n, 2), flat)
    return idx, (anc + off).reshape(b, m, 2)


def generate_trajectories(z: LatentScene, targets: Tensor, params: Params, cfg: ModelConfig) -> Tensor:
    """MLP from ``(flatten(z), target)`` to ``(B, M, T, 4)`` states ``[x, y, a, w]``."""
    ctx = _ctx(z)
    b = ctx.shape[0]
    if targets.ndim != 3 or targets.shape[0] != b or targets.shape[2] != 2:
        raise ad.ShapeError(f"generate_trajectories: targets shape {targets.shape}")
    m = targets.shape[1]
    steps = plan_steps_of(params)
    h = _pair_hidden(params, "plan.traj.l1", ctx, targets * (1.0 / cfg.coord_scale))
    h = ad.relu(ad.apply_linear(params, "plan.traj.l2", h))
    out = ad.apply_linear(params, "plan.traj.out", h).reshape(b, m, steps, 4)
    sc = np.broadcast_to(traj_channel_scale(cfg), (b, m, steps, 4))
    return out * Tensor(sc)


def score_trajectories(z: LatentScene, trajs: Tensor, params: Params, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Max-entropy scores: softmax over ``g(trajectory, z)`` within each set."""
    ctx = _ctx(z)
    b, m, steps, c = trajs.shape
    if steps != plan_steps_of(params) or c != 4:
        raise ad.ShapeError(f"score_trajectories: trajectory shape {trajs.shape}")
    sc = np.broadcast_to(1.0 / traj_channel_scale(cfg), trajs.shape)
    items = (trajs * Tensor(sc)).reshape(b, m, steps * 4)
    h = _pair_hidden(params, "plan.g.l1", ctx, items)
    logits = ad.apply_linear(params, "plan.g.out", h).reshape(b, m)
    return logits, ad.softmax(logits, axis=-1)


def ground_truth_scores(trajs: np.ndarray, gt_xy: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    """``softmax(-alpha * max_t ||s_t - gt_t||)`` over each trajectory set."""
    d = np.linalg.norm(np.asarray(trajs)[..., :2] - np.asarray(gt_xy)[:, None, :, :2], axis=-1).max(-1)
    e = -alpha * d
    e = np.exp(e - e.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def huber(x: Tensor) -> Tensor:
    """Elementwise smooth-L1 (unit knee), summed."""
    ax = ad.abs_(x)
    return ad.where(ax.data < 1.0, ad.square(x) * 0.5, ax - 0.5).sum()


def nearest_anchor(anchors: np.ndarray, valid: np.ndarray, point: np.ndarray) -> int:
    d = np.linalg.norm(np.asarray(anchors) - np.asarray(point)[None, :2], axis=1)
    d = np.where(valid, d, np.inf)
    return int(np.argmin(d))


def target_loss(dist: TargetDistribution, anchors: np.ndarray, gt_end: np.ndarray) -> Tensor:
    """Cross-entropy on the anchor nearest the true endpoint + Huber on its offset."""
    b, n = dist.logits.shape
    anchors = np.asarray(anchors).reshape(b, n, 2)
    idx = np.array([nearest_anchor(anchors[i], dist.valid[i], gt_end[i]) for i in range(b)])
    flat = idx + np.arange(b) * n
    logp = ad.log_softmax(dist.logits, axis=-1).reshape(b * n)
    ce = -ad.index(logp, flat).sum()
    off = ad.gather_rows(dist.offsets.reshape(b * n, 2), flat)
    off_target = Tensor(np.asarray(gt_end)[:, :2] - anchors[np.arange(b), idx])
    return (ce + huber(off - off_target)) * (1.0 / b)


def score_loss(logits: Tensor, gt_scores: np.ndarray) -> Tensor:
    b = logits.shape[0]
    return -(ad.log_softmax(logits, axis=-1) * Tensor(gt_scores)).sum() * (1.0 / b)
