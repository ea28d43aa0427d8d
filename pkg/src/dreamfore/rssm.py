"""Deterministic recurrent state-space model: GRU recurrence + transition MLP."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Params, Tensor
from .config import ModelConfig
from .scene import LatentScene

ACTION_DIM = 4


class DegenerateLatentError(ValueError):
    pass


def init_rssm(params: Params, cfg: ModelConfig, rng: np.random.Generator) -> None:
    n_in = cfg.n_max * cfg.d_model + ACTION_DIM
    hd, ph = cfg.h_dim, cfg.predictor_hidden
    ad.add_linear(params, "rssm.gru.x", n_in, 3 * hd, rng)
    ad.add_linear(params, "rssm.gru.h", hd, 3 * hd, rng)
    ad.add_linear(params, "rssm.pred.l1", hd, ph, rng)
    ad.add_linear(params, "rssm.pred.l2", ph, ph, rng)
    ad.add_linear(params, "rssm.pred.out", ph, cfg.n_max * cfg.d_model, rng)


def initial_state(batch: int, cfg: ModelConfig) -> Tensor:
    return Tensor(np.zeros((batch, cfg.h_dim)))


def action_scale(cfg: ModelConfig) -> np.ndarray:
    return np.array([1.0 / cfg.coord_scale, 1.0 / cfg.coord_scale, 1.0 / cfg.accel_bound, 1.0 / cfg.turn_bound])


def make_action(state: Tensor, cfg: ModelConfig) -> Tensor:
    """Clamp a ``(B, 4)`` planned state ``[x, y, accel, turn]`` into an ego action."""
    xy = state[:, 0:2]
    acc = ad.clip(state[:, 2:3], -cfg.accel_bound, cfg.accel_bound)
    turn = ad.clip(state[:, 3:4], -cfg.turn_bound, cfg.turn_bound)
    return ad.concat([xy, acc, turn], axis=1)


def recurrent_step(h: Tensor, z: LatentScene, a: Tensor, params: Params, cfg: ModelConfig) -> Tensor:
    """Single GRU cell over ``concat(flatten(z), a)``."""
    zf = z.flat()
    b = zf.shape[0]
    hd = cfg.h_dim
    if h.shape != (b, hd):
        raise ad.ShapeError(f"recurrent_step: hidden shape {h.shape}, expected {(b, hd)}")
    if a.shape != (b, ACTION_DIM):
        raise ad.ShapeError(f"recurrent_step: action shape {a.shape}, expected {(b, ACTION_DIM)}")
    a_n = a * Tensor(np.tile(action_scale(cfg), (b, 1)))
    x = ad.concat([zf, a_n], axis=1)
    gx = ad.apply_linear(params, "rssm.gru.x", x)
    gh = ad.apply_linear(params, "rssm.gru.h", h)
    r = ad.sigmoid(gx[:, :hd] + gh[:, :hd])
    u = ad.sigmoid(gx[:, hd:2 * hd] + gh[:, hd:2 * hd])
    n = ad.tanh(gx[:, 2 * hd:] + r * gh[:, 2 * hd:])
    return n + u * (h - n)


def predict_transition(h: Tensor, mask: np.ndarray, params: Params, cfg: ModelConfig, agent_ids=None) -> LatentScene:
    """Skip-connected MLP from the recurrent state to the next latent."""
    b = h.shape[0]
    mask = np.asarray(mask, dtype=bool).reshape(b, cfg.n_max)
    a1 = ad.relu(ad.apply_linear(params, "rssm.pred.l1", h))
    a2 = ad.relu(ad.apply_linear(params, "rssm.pred.l2", a1))
    out = ad.apply_linear(params, "rssm.pred.out", a2 + a1)
    m = np.repeat(mask[:, :, None].astype(float), cfg.d_model, axis=2)
    emb = out.reshape(b, cfg.n_max, cfg.d_model) * Tensor(m)
    return LatentScene(embeddings=emb, mask=mask.copy(), agent_ids=agent_ids)


def _one_loss(z: Tensor, z_hat: Tensor) -> Tensor:
    nz, nh = ad.l2_norm(z), ad.l2_norm(z_hat)
    if nz.item() == 0.0 and nh.item() == 0.0:
        raise DegenerateLatentError("rssm_loss: both latents have zero norm")
    d = ad.dot(z, z_hat)
    return 1.0 - d / ad.scalar_max(nz, nh)


def rssm_loss(z: LatentScene, z_hat: LatentScene, detach_target: bool = True) -> Tensor:
    """``1 - z.z_hat / max(|z|, |z_hat|)`` averaged over the batch.

    With ``detach_target`` the representation side is a constant, so only the
    transition path is pulled toward the encoder.
    """
    zf = z.flat()
    hf = z_hat.flat()
    if zf.shape != hf.shape:
        raise ad.ShapeError(f"rssm_loss: shape mismatch {zf.shape} vs {hf.shape}")
    if detach_target:
        zf = ad.detach(zf)
    losses = [_one_loss(zf[i], hf[i]) for i in range(zf.shape[0])]
    total = losses[0]
    for item in losses[1:]:
        total = total + item
    return total * (1.0 / len(losses))
