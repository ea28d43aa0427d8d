"""Multi-agent motion forecasting with a deterministic recurrent world model.

A vectorized scene encoder feeds a GRU world model whose imagined latents are
decoded into per-agent acceleration and turn-rate commands and integrated with
a bicycle model. A target-conditioned planner drives the ego inside the dream,
and training backpropagates through the whole closed-loop rollout.
"""

from .config import LossWeights, ModelConfig, TrainConfig, load_config
from .data import load, save, segment
from .evaluation import evaluate
from .metrics import MetricsReport, actor_mr, min_ade, min_fde
from .synthetic import generate_synthetic
from .training import dream_loss, dream_rollout, fit

__all__ = [
    "LossWeights",
    "MetricsReport",
    "ModelConfig",
    "TrainConfig",
    "actor_mr",
    "dream_loss",
    "dream_rollout",
    "evaluate",
    "fit",
    "generate_synthetic",
    "load",
    "load_config",
    "min_ade",
    "min_fde",
    "save",
    "segment",
]

__version__ = "0.1.0"
