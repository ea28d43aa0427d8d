"""Open-loop imitation, dreamed closed-loop rollouts with BPTT, and the fit loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Params, Tape, Tensor
from .config import TrainConfig
from .kinematics import KinematicCommand, KinematicState, decode_kinematics, reconstruct_scene
from .model import Sample, init_model, prepare_sample
from .planner import (
    generate_trajectories,
    ground_truth_scores,
    huber,
    score_loss,
    score_targets,
    score_trajectories,
    target_loss,
    top_targets,
)
from .rssm import initial_state, make_action, predict_transition, recurrent_step, rssm_loss
from .scene import LatentScene, Scenario, encode_many

log = logging.getLogger(__name__)

LOSS_KEYS = ("rssm", "target", "traj", "score", "kin", "dream")


class RolloutAborted(RuntimeError):
    def __init__(self, step: int, scenario_ids: list[str], cause: str = ""):
        self.step = step
        self.scenario_ids = scenario_ids
        super().__init__(f"rollout aborted at step {step} for {scenario_ids}: {cause}")


class TrainingFailed(RuntimeError):
    pass


class AgentMismatchError(ValueError):
    pass


@dataclass
class DreamRollout:
    """Imagined latents, recurrent states, reconstructed agents and re-plans.

    ``states[k]`` / ``commands[k]`` hold ``(B, n_max)`` tensors for dream step
    ``k = 0..H``; ``substates`` holds every native-rate state after step 0.
    """

    latents: list[LatentScene]
    hidden: list[Tensor]
    states: list[KinematicState]
    commands: list[KinematicCommand]
    substates: list[KinematicState]
    plans: list[Tensor]
    target: Tensor
    mask: np.ndarray
    agent_ids: list[list[str]]
    scenario_ids: list[str]
    dt: float
    H: int

    def positions(self) -> np.ndarray:
        """Native-rate predicted positions ``(B, n_max, H * substeps, 2)``."""
        xs = np.stack([s.x.data for s in self.substates], axis=-1)
        ys = np.stack([s.y.data for s in self.substates], axis=-1)
        return np.stack([xs, ys], axis=-1)


def _batch_latent(samples: list[Sample], k: int, params: Params, cfg: TrainConfig) -> LatentScene:
    return encode_many([s.frames[k] for s in samples], params, cfg.model)


def _frame_latents(samples: list[Sample], K: int, params: Params, cfg: TrainConfig) -> list[LatentScene]:
    """Encode frames ``0..K`` of every sample in one pass, split per frame index."""
    b = len(samples)
    z = encode_many([s.frames[k] for k in range(K + 1) for s in samples], params, cfg.model)
    return [LatentScene(z.embeddings[k * b:(k + 1) * b], z.mask[k * b:(k + 1) * b], z.agent_ids[k * b:(k + 1) * b])
            for k in range(K + 1)]


def _sum(items: list[Tensor]) -> Tensor:
    total = items[0]
    for t in items[1:]:
        total = total + t
    return total


def dream_rollout(samples: list[Sample], params: Params, cfg: TrainConfig, H: int | None = None,
                  rank: int = 0) -> DreamRollout:
    """Plan once, then alternate transition, reconstruction and re-planning for ``H`` steps.

    The target chosen at step 0 stays fixed; each step re-generates the ego
    trajectory from the imagined latent and feeds its first state back as the
    next action. ``rank`` picks the ``rank``-th best scored trajectory at
    step 0 (used for best-of-K evaluation). Non-finite values abort the
    rollout with the step index.
    """
    mc = cfg.model
    H = cfg.H if H is None else H
    if H < 1:
        raise ValueError("H must be >= 1")
    for s in samples:
        if H * cfg.substeps > s.scenario.horizon_len:
            raise ValueError(f"H={H} at dt={cfg.dt} exceeds horizon of {s.id}")
    b = len(samples)
    ids = [s.id for s in samples]
    step = 0
    try:
        z = _batch_latent(samples, 0, params, cfg)
        anchors = np.stack([s.candidates.anchors for s in samples])
        valid = np.stack([s.candidates.valid for s in samples])
        dist = score_targets(z, anchors, valid, params, mc)
        _, targets = top_targets(dist, anchors, mc.m_targets)
        trajs = generate_trajectories(z, targets, params, mc)
        _, scores = score_trajectories(z, trajs, params, mc)
        m, steps = trajs.shape[1], trajs.shape[2]
        best = np.argsort(-scores.data, axis=1, kind="stable")[:, rank % m] + np.arange(b) * m
        target = ad.gather_rows(targets.reshape(b * m, 2), best).reshape(b, 1, 2)
        plan = ad.gather_rows(trajs.reshape(b * m, steps * 4), best).reshape(b, steps, 4)
        mask = z.mask
        state = KinematicState.constant(np.stack([s.init_states for s in samples]))
        cmd = decode_kinematics(z, params, mc)
        h = initial_state(b, mc)
        out = DreamRollout([z], [h], [state], [cmd], [], [plan], target, mask,
                           [s.agent_ids for s in samples], ids, cfg.dt, H)
        for step in range(1, H + 1):
            if cfg.action_source == "planner":
                act = make_action(plan[:, 0, :], mc)
            else:
                act = make_action(ad.concat([state.x[:, 0:1], state.y[:, 0:1], cmd.accel[:, 0:1], cmd.turn_rate[:, 0:1]], axis=1), mc)
            h = recurrent_step(h, z, act, params, mc)
            z = predict_transition(h, mask, params, mc, agent_ids=out.agent_ids)
            subs, cmd = reconstruct_scene(state, z, params, mc, cfg.dt)
            state = subs[-1]
            out.latents.append(z)
            out.hidden.append(h)
            out.states.append(state)
            out.commands.append(cmd)
            out.substates.extend(subs)
            if step < H:
                plan = generate_trajectories(z, target, params, mc).reshape(b, steps, 4)
                out.plans.append(plan)
    except ad.NonFiniteError as exc:
        raise RolloutAborted(step, ids, str(exc)) from exc
    return out


def smooth_l1(d: Tensor) -> Tensor:
    """Per-vector smooth-L1 over the last axis: ``0.5 * ||d||_2^2`` if ``||d||_1 < 1`` else ``||d||_1 - 0.5``."""
    l1 = ad.abs_(d).sum(axis=-1)
    return ad.where(l1.data < 1.0, ad.square(d).sum(axis=-1) * 0.5, l1 - 0.5)


def dream_loss(rollout: DreamRollout, samples: list[Sample]) -> Tensor:
    """Smooth-L1 on ``[x, y, a, w]`` per agent and step, summed over steps, averaged over agents."""
    for ids, s in zip(rollout.agent_ids, samples):
        if list(ids) != list(s.agent_ids):
            raise AgentMismatchError(f"rollout agents {ids} do not match scenario {s.id} agents {s.agent_ids}")
    H, sub = rollout.H, samples[0].substeps
    steps = np.arange(H + 1)
    gt = np.stack([s.gt_states[:, steps * sub] for s in samples])
    gc = np.stack([s.gt_cmd[:, : H + 1] for s in samples])
    pred = ad.stack([
        ad.stack([st.x for st in rollout.states], axis=2),
        ad.stack([st.y for st in rollout.states], axis=2),
        ad.stack([c.accel for c in rollout.commands], axis=2),
        ad.stack([c.turn_rate for c in rollout.commands], axis=2),
    ], axis=-1)
    target = np.concatenate([gt[..., :2], gc], axis=-1)
    per = smooth_l1(pred - Tensor(target))
    emask = np.stack([s.eval_mask for s in samples])
    m = np.repeat(emask[:, :, None].astype(float), H + 1, axis=2)
    n_agents = max(int(emask.sum()), 1)
    return (per * Tensor(m)).sum() * (1.0 / n_agents)


def open_loop_losses(samples: list[Sample], params: Params, cfg: TrainConfig) -> dict[str, Tensor]:
    """Planner imitation, teacher-forced RSSM and kinematic reconstruction losses."""
    mc = cfg.model
    b = len(samples)
    K = min(len(s.frames) for s in samples) - 1
    zs = _frame_latents(samples, K, params, cfg)
    z0 = zs[0]
    anchors = np.stack([s.candidates.anchors for s in samples])
    valid = np.stack([s.candidates.valid for s in samples])
    plan_gt = np.stack([s.plan_gt for s in samples])
    gt_end = np.stack([s.gt_end for s in samples])

    dist = score_targets(z0, anchors, valid, params, mc)
    losses = {"target": target_loss(dist, anchors, gt_end)}
    teacher = generate_trajectories(z0, Tensor(gt_end[:, None, :]), params, mc)
    steps = teacher.shape[2]
    losses["traj"] = huber(teacher.reshape(b, steps, 4) - Tensor(plan_gt)) * (1.0 / (b * steps))
    _, targets = top_targets(dist, anchors, mc.m_targets)
    trajs = ad.detach(generate_trajectories(z0, targets, params, mc))
    logits, _ = score_trajectories(z0, trajs, params, mc)
    losses["score"] = score_loss(logits, ground_truth_scores(trajs.data, plan_gt[..., :2], cfg.score_temperature))

    if K > 0:
        h = initial_state(b, mc)
        items = []
        for k in range(K):
            h = recurrent_step(h, zs[k], make_action(Tensor(plan_gt[:, k, :]), mc), params, mc)
            z_hat = predict_transition(h, zs[k].mask, params, mc)
            items.append(rssm_loss(zs[k + 1], z_hat, cfg.detach_target))
        losses["rssm"] = _sum(items) * (1.0 / K)
    else:
        losses["rssm"] = Tensor(0.0)

    kin, count = [], 0
    for k in range(K + 1):
        cmd = decode_kinematics(zs[k], params, mc)
        ok = np.stack([s.gt_cmd_valid[:, k] for s in samples]) & zs[k].mask
        gt = np.stack([s.gt_cmd[:, k] for s in samples])
        d = ad.stack([cmd.accel, cmd.turn_rate], axis=-1) - Tensor(gt)
        kin.append(huber(d * Tensor(np.repeat(ok[..., None].astype(float), 2, axis=-1))))
        count += int(ok.sum())
    losses["kin"] = _sum(kin) * (1.0 / max(count, 1))
    return losses


def _weighted_total(losses: dict[str, Tensor], cfg: TrainConfig) -> Tensor:
    items = [losses[k] * float(getattr(cfg.weights, k)) for k in LOSS_KEYS if k in losses]
    return _sum(items)


def _optimise(total: Tensor, tape: Tape, params: Params, opt: Adam, cfg: TrainConfig) -> float:
    params.zero_grad()
    if total._node is not None:
        ad.backward(total, tape)
    norm = ad.clip_grad_norm(params.values(), cfg.grad_clip)
    opt.step()
    return norm


def open_loop_step(samples: list[Sample], params: Params, opt: Adam, cfg: TrainConfig) -> dict[str, float]:
    with Tape() as tape:
        losses = open_loop_losses(samples, params, cfg)
        total = _weighted_total(losses, cfg)
    out = {k: v.item() for k, v in losses.items()}
    out["total"] = total.item()
    active = any(getattr(cfg.weights, k) != 0 for k in losses)
    out["grad_norm"] = _optimise(total, tape, params, opt, cfg) if active else 0.0
    return out


def closed_loop_step(samples: list[Sample], params: Params, opt: Adam, cfg: TrainConfig) -> dict:
    """Dream with gradients through every step and re-plan, then one clipped Adam step.

    Samples whose rollout aborts are skipped and reported.
    """
    aborted = []
    with Tape() as tape:
        try:
            rollout = dream_rollout(samples, params, cfg)
            kept = samples
        except RolloutAborted:
            kept, rollouts = [], []
            for s in samples:
                try:
                    rollouts.append(dream_rollout([s], params, cfg))
                    kept.append(s)
                except RolloutAborted as exc:
                    aborted.append((s.id, exc.step))
            rollout = None
        if not kept:
            return {"dream": float("nan"), "aborted": aborted, "grad_norm": 0.0}
        if rollout is not None:
            loss = dream_loss(rollout, kept)
        else:
            loss = _sum([dream_loss(r, [s]) for r, s in zip(rollouts, kept)]) * (1.0 / len(kept))
        total = loss * float(cfg.weights.dream)
    out = {"dream": loss.item(), "aborted": aborted}
    out["grad_norm"] = _optimise(total, tape, params, opt, cfg) if cfg.weights.dream != 0 else 0.0
    return out


@dataclass
class FitResult:
    params: Params
    history: list[dict] = field(default_factory=list)
    aborted: list = field(default_factory=list)
    optimizer: Adam | None = None


LOG_FIELDS = ("epoch", "total", "rssm", "target", "traj", "score", "kin", "dream", "aborted", "wall_time")


def prepare(scenarios: list[Scenario], cfg: TrainConfig) -> list[Sample]:
    for sc in scenarios:
        cfg.check_horizon(sc.horizon_len)
    return [prepare_sample(sc, cfg) for sc in scenarios]


def fit(scenarios: list[Scenario], cfg: TrainConfig, log_path=None, params: Params | None = None,
        samples: list[Sample] | None = None, callback=None) -> FitResult:
    """Train for ``cfg.epochs`` epochs; closed-loop dreaming starts after ``warmup_epochs``.

    Each batch takes one open-loop step and, after warm-up, one closed-loop
    step. More than ``max_abort_fraction`` aborted rollouts in an epoch fails
    the run.
    """
    if not scenarios:
        raise ValueError("no training scenarios")
    root = np.random.default_rng(cfg.seed)
    init_rng, order_rng = root.spawn(2)
    horizon = scenarios[0].horizon_len
    if params is None:
        params = init_model(cfg, horizon, init_rng)
    samples = samples if samples is not None else prepare(scenarios, cfg)
    opt = Adam(params, lr=cfg.lr)
    result = FitResult(params, optimizer=opt)
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
    t_start = time.perf_counter()
    try:
        for epoch in range(1, cfg.epochs + 1):
            opt.lr = cfg.lr_at(epoch)
            order = order_rng.permutation(len(samples))
            rows, dreams, aborted = [], [], []
            for i in range(0, len(order), cfg.batch_size):
                batch = [samples[j] for j in order[i:i + cfg.batch_size]]
                rows.append(open_loop_step(batch, params, opt, cfg))
                if epoch > cfg.warmup_epochs:
                    cl = closed_loop_step(batch, params, opt, cfg)
                    aborted.extend(cl["aborted"])
                    if np.isfinite(cl["dream"]):
                        dreams.append(cl["dream"])
            rec = {"epoch": epoch}
            for k in ("total", "rssm", "target", "traj", "score", "kin"):
                rec[k] = float(np.mean([r[k] for r in rows]))
            rec["dream"] = float(np.mean(dreams)) if dreams else float("nan")
            rec["aborted"] = len(aborted)
            rec["wall_time"] = time.perf_counter() - t_start
            result.history.append(rec)
            result.aborted.extend((epoch, sid, step) for sid, step in aborted)
            if writer is not None:
                writer.writerow(rec)
                fh.flush()
            log.info("epoch %d %s", epoch, {k: round(v, 4) if isinstance(v, float) else v for k, v in rec.items()})
            if callback is not None:
                callback(rec)
            if len(aborted) > cfg.max_abort_fraction * len(samples):
                raise TrainingFailed(f"epoch {epoch}: {len(aborted)} of {len(samples)} rollouts aborted")
    finally:
        if fh is not None:
            fh.close()
    return result


def write_history(history: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for rec in history:
            w.writerow(rec)
