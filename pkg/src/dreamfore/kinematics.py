"""Kinematic head and the forward-Euler bicycle-model integrator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Params, Tensor
from .config import ModelConfig
from .scene import LatentScene


@dataclass
class KinematicState:
    """Pose and speed; fields are floats, numpy arrays or tensors of one shape."""

    x: object
    y: object
    heading: object
    speed: object

    def as_array(self) -> np.ndarray:
        return np.stack([_np(self.x), _np(self.y), _np(self.heading), _np(self.speed)], axis=-1)

    @classmethod
    def from_array(cls, arr) -> "KinematicState":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr[..., 0], arr[..., 1], arr[..., 2], arr[..., 3])

    @classmethod
    def constant(cls, arr) -> "KinematicState":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(*(Tensor(arr[..., i]) for i in range(4)))


@dataclass
class KinematicCommand:
    accel: object
    turn_rate: object
    mask: np.ndarray | None = None


def _np(v):
    return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)


def integrate(s: KinematicState, c: KinematicCommand, dt: float, speed_clamp: bool = True) -> KinematicState:
    """One forward-Euler step: speed and heading first, then position.

    v' = max(0, v + a dt); psi' = wrap(psi + w dt);
    x' = x + v' cos(psi') dt; y' = y + v' sin(psi') dt.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if isinstance(s.x, Tensor):
        v = s.speed + c.accel * dt
        if speed_clamp:
            v = ad.relu(v)
        psi = ad.wrap_angle(s.heading + c.turn_rate * dt)
        x = s.x + v * ad.cos(psi) * dt
        y = s.y + v * ad.sin(psi) * dt
        return KinematicState(x, y, psi, v)
    vals = [np.asarray(u, dtype=np.float64) for u in (s.x, s.y, s.heading, s.speed, c.accel, c.turn_rate)]
    if not all(np.isfinite(u).all() for u in vals):
        raise ad.NonFiniteError("integrate: non-finite input")
    x, y, psi, v, a, w = vals
    v = v + a * dt
    if speed_clamp:
        v = np.maximum(v, 0.0)
    psi = ad.wrap_angle_np(psi + w * dt)
    x = x + v * np.cos(psi) * dt
    y = y + v * np.sin(psi) * dt
    if x.ndim == 0:
        return KinematicState(float(x), float(y), float(psi), float(v))
    return KinematicState(x, y, psi, v)


def init_kinematic_head(params: Params, cfg: ModelConfig, rng: np.random.Generator) -> None:
    ad.add_linear(params, "kin.l1", cfg.d_model, cfg.kin_hidden, rng)
    ad.add_linear(params, "kin.out", cfg.kin_hidden, 2, rng, gain=0.1)


def decode_kinematics(z: LatentScene, params: Params, cfg: ModelConfig) -> KinematicCommand:
    """Shared 2-layer MLP per agent slot; tanh-squashed into command bounds.

    Returns ``(B, n_max)`` accel / turn tensors (``(n_max,)`` for an
    unbatched latent); masked slots carry exactly zero.
    """
    e = z.embeddings
    batched = e.ndim == 3
    if e.shape[-1] != cfg.d_model or e.shape[-2] != cfg.n_max:
        raise ad.ShapeError(f"decode_kinematics: latent shape {e.shape}")
    b = e.shape[0] if batched else 1
    rows = e.reshape(b * cfg.n_max, cfg.d_model)
    hid = ad.relu(ad.apply_linear(params, "kin.l1", rows))
    out = ad.tanh(ad.apply_linear(params, "kin.out", hid))
    mask = np.asarray(z.mask, dtype=bool).reshape(b, cfg.n_max)
    m = Tensor(mask.astype(float).reshape(b * cfg.n_max))
    accel = (out[:, 0] * cfg.accel_bound) * m
    turn = (out[:, 1] * cfg.turn_bound) * m
    shape = (b, cfg.n_max) if batched else (cfg.n_max,)
    return KinematicCommand(accel.reshape(shape), turn.reshape(shape), mask if batched else mask[0])


def commands_list(cmd: KinematicCommand) -> list[tuple[int, float, float]]:
    """Slot-aligned ``(slot, accel, turn)`` for the valid slots of one scene."""
    acc, turn = _np(cmd.accel), _np(cmd.turn_rate)
    mask = np.asarray(cmd.mask)
    return [(int(i), float(acc[i]), float(turn[i])) for i in np.flatnonzero(mask)]


def substep_integrate(s: KinematicState, c: KinematicCommand, dt: float, sample_dt: float,
                      speed_clamp: bool = True) -> list[KinematicState]:
    """Hold ``c`` for ``dt`` while stepping at ``sample_dt``; returns every sub-state."""
    k = int(round(dt / sample_dt))
    if k < 1 or not math.isclose(k * sample_dt, dt, rel_tol=1e-9):
        raise ValueError(f"dt={dt} is not a multiple of sample_dt={sample_dt}")
    out = []
    for _ in range(k):
        s = integrate(s, c, sample_dt, speed_clamp)
        out.append(s)
    return out


def reconstruct_scene(states: KinematicState, z: LatentScene, params: Params, cfg: ModelConfig,
                      dt: float) -> tuple[list[KinematicState], KinematicCommand]:
    """Decode commands from ``z`` and advance every agent slot by ``dt``."""
    if np.shape(_np(states.x)) != np.shape(np.asarray(z.mask)):
        raise ValueError(f"reconstruct_scene: state slots {np.shape(_np(states.x))} vs latent mask {np.shape(z.mask)}")
    cmd = decode_kinematics(z, params, cfg)
    return substep_integrate(states, cmd, dt, cfg.sample_dt, cfg.speed_clamp), cmd


def commands_from_track(states: np.ndarray, dt: float, stride: int = 1, scheme: str = "backward") -> np.ndarray:
    """Recover ``(accel, turn)`` from logged speed and heading.

    ``backward`` gives the command held over ``(t - stride, t]``, which inverts
    :func:`integrate` exactly when the speed clamp is inactive; ``central``
    averages the two neighbouring windows. Undefined leading rows are NaN.
    """
    v, psi = states[:, 3], states[:, 2]
    h = stride * dt
    out = np.full((len(states), 2), np.nan)
    if scheme == "backward":
        out[stride:, 0] = (v[stride:] - v[:-stride]) / h
        out[stride:, 1] = ad.wrap_angle_np(psi[stride:] - psi[:-stride]) / h
    elif scheme == "central":
        out[stride:-stride, 0] = (v[2 * stride:] - v[:-2 * stride]) / (2 * h)
        out[stride:-stride, 1] = ad.wrap_angle_np(psi[2 * stride:] - psi[:-2 * stride]) / (2 * h)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return out
