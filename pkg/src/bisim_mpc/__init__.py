"""Latent model-based control with a per-step bisimulation objective,
sampling-based planning, and an exact tabular oracle for the metric's
value and reward bounds."""

from .envs import DistractorConfig, TabularMdp, make_env, random_mdp
from .losses import LossCoefficients, SegmentBatch, total_model_loss
from .models import ModelConfig, ModelSet
from .planner import PlanConfig, PlanState, plan
from .trainer import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "DistractorConfig", "TabularMdp", "make_env", "random_mdp",
    "LossCoefficients", "SegmentBatch", "total_model_loss",
    "ModelConfig", "ModelSet", "PlanConfig", "PlanState", "plan",
    "TrainConfig", "Trainer", "__version__",
]
