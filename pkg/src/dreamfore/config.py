"""Dataclass configs for the model and the training pipeline."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

SUPPORTED_DT = (0.1, 0.2, 0.5)


@dataclass
class ModelConfig:
    n_max: int = 16
    d_model: int = 64
    subgraph_hidden: int = 64
    h_dim: int = 256
    predictor_hidden: int = 256
    kin_hidden: int = 64
    target_hidden: int = 128
    traj_hidden: int = 256
    score_hidden: int = 128
    n_anchors: int = 64
    m_targets: int = 6
    accel_bound: float = 10.0
    turn_bound: float = 1.5
    coord_scale: float = 10.0
    crop_radius: float = 100.0
    resample_spacing: float = 2.0
    anchor_spacing: float = 2.0
    anchor_margin: float = 10.0
    sample_dt: float = 0.1
    speed_clamp: bool = True


@dataclass
class LossWeights:
    rssm: float = 1.0
    target: float = 1.0
    traj: float = 1.0
    score: float = 1.0
    kin: float = 1.0
    dream: float = 1.0


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    lr_min_ratio: float = 0.05
    H: int = 60
    dt: float = 0.1
    T: float = 2.0
    seed: int = 0
    warmup_epochs: int = 10
    grad_clip: float = 10.0
    score_temperature: float = 1.0
    action_source: str = "planner"
    detach_target: bool = True
    max_abort_fraction: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.validate()

    @property
    def substeps(self) -> int:
        return int(round(self.dt / self.model.sample_dt))

    @property
    def teacher_steps(self) -> int:
        return max(1, int(round(self.T / self.dt)))

    def plan_steps(self, horizon_len: int) -> int:
        return int(horizon_len // self.substeps)

    def validate(self) -> None:
        if not any(abs(self.dt - d) < 1e-9 for d in SUPPORTED_DT):
            raise ValueError(f"dt must be one of {SUPPORTED_DT}, got {self.dt}")
        if self.H < 1:
            raise ValueError(f"H must be >= 1, got {self.H}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.action_source not in ("planner", "reconstruction"):
            raise ValueError(f"unknown action_source {self.action_source!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``: constant, or cosine from ``lr`` down to ``lr * lr_min_ratio``."""
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.lr
        lo = self.lr * self.lr_min_ratio
        frac = (epoch - 1) / (self.epochs - 1)
        return lo + 0.5 * (self.lr - lo) * (1.0 + math.cos(math.pi * frac))

    def check_horizon(self, horizon_len: int) -> None:
        """H * dt must fit inside the scenario horizon."""
        if self.H * self.substeps > horizon_len:
            raise ValueError(
                f"H*dt = {self.H * self.dt:.2f}s exceeds scenario horizon "
                f"{horizon_len * self.model.sample_dt:.2f}s"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        weights = LossWeights(**d.pop("weights", {}))
        model = ModelConfig(**d.pop("model", {}))
        return cls(weights=weights, model=model, **d)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        for k, v in changes.items():
            if k in ("model", "weights") and isinstance(v, dict):
                d[k].update(v)
            else:
                d[k] = v
        return TrainConfig.from_dict(d)


def load_config(path) -> TrainConfig:
    doc = yaml.safe_load(Path(path).read_text()) or {}
    return TrainConfig.from_dict(doc)


def dump_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
