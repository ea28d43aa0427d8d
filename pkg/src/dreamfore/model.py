"""Parameter initialisation and per-scenario training/evaluation tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Params
from .config import TrainConfig
from .kinematics import commands_from_track, init_kinematic_head
from .planner import TargetCandidates, generate_candidates, init_planner
from .rssm import init_rssm
from .scene import Scenario, VectorSet, agent_slot_order, init_encoder, states_to_frame, vectorize


def init_model(cfg: TrainConfig, horizon_len: int, rng: np.random.Generator | None = None) -> Params:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    params = Params()
    mc = cfg.model
    init_encoder(params, mc, rng)
    init_rssm(params, mc, rng)
    init_kinematic_head(params, mc, rng)
    init_planner(params, mc, cfg.plan_steps(horizon_len), rng)
    return params


@dataclass
class Sample:
    """Everything about one scenario that does not depend on parameters.

    Arrays are expressed in the ego frame at the last observed step and padded
    to ``n_max`` agent slots. ``gt_cmd[:, k]`` is the command held over the
    dream step ending at ``k`` (``k = 0`` ends at the last observation).
    """

    scenario: Scenario
    frames: list[VectorSet]
    candidates: TargetCandidates
    init_states: np.ndarray
    slot_mask: np.ndarray
    eval_mask: np.ndarray
    gt_states: np.ndarray
    gt_valid: np.ndarray
    gt_cmd: np.ndarray
    gt_cmd_valid: np.ndarray
    plan_gt: np.ndarray
    gt_end: np.ndarray
    substeps: int

    @property
    def agent_ids(self) -> list[str]:
        return self.frames[0].agent_ids

    @property
    def id(self) -> str:
        return self.scenario.id


def prepare_sample(scenario: Scenario, cfg: TrainConfig, n_frames: int | None = None) -> Sample:
    mc = cfg.model
    sub = cfg.substeps
    t0 = scenario.t_obs
    hor = scenario.horizon_len
    n_dream = hor // sub
    n_frames = cfg.teacher_steps + 1 if n_frames is None else n_frames
    n_frames = max(1, min(n_frames, n_dream + 1))
    order = agent_slot_order(scenario, t0)
    if len(order) > mc.n_max:
        raise ValueError(f"scenario {scenario.id}: {len(order)} agents exceed n_max={mc.n_max}")
    frames = [vectorize(scenario, t0 + k * sub, mc, frame_step=t0, agent_order=order) for k in range(n_frames)]
    frame = frames[0].frame
    n = mc.n_max

    gt_states = np.zeros((n, hor + 1, 4))
    gt_valid = np.zeros((n, hor + 1), dtype=bool)
    gt_cmd = np.zeros((n, n_dream + 1, 2))
    gt_cmd_valid = np.zeros((n, n_dream + 1), dtype=bool)
    lo = t0 - sub
    for slot, aid in enumerate(order):
        tr = scenario.track(aid)
        gt_states[slot] = states_to_frame(tr.states[t0:t0 + hor + 1], frame)
        gt_valid[slot] = tr.valid[t0:t0 + hor + 1]
        span = tr.states[lo:t0 + hor + 1]
        ok = tr.valid[lo:t0 + hor + 1]
        cmd = commands_from_track(span, scenario.dt, stride=sub)
        rows = sub + np.arange(n_dream + 1) * sub
        gt_cmd[slot] = np.nan_to_num(cmd[rows])
        gt_cmd_valid[slot] = ok[rows] & ok[rows - sub] & np.isfinite(cmd[rows]).all(1)
    slot_mask = np.zeros(n, dtype=bool)
    slot_mask[: len(order)] = frames[0].agent_valid
    eval_mask = slot_mask & gt_valid.all(1)

    steps = cfg.plan_steps(hor)
    plan_gt = np.zeros((steps, 4))
    plan_gt[:, :2] = gt_states[0, sub * np.arange(1, steps + 1), :2]
    plan_gt[:, 2:] = gt_cmd[0, 1:steps + 1]
    init_states = np.zeros((n, 4))
    init_states[: len(order)] = frames[0].agent_states
    candidates = generate_candidates(frames[0], mc.n_anchors, hor * mc.sample_dt, mc)
    return Sample(scenario, frames, candidates, init_states, slot_mask, eval_mask, gt_states, gt_valid,
                  gt_cmd, gt_cmd_valid, plan_gt, plan_gt[-1, :2].copy(), sub)
