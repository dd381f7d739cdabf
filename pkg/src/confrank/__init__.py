"""Conformity-aware multi-task ranking with causal auxiliary modules."""

from .config import DataConfig, EvalConfig, ModelConfig, RunConfig, TrainConfig

__all__ = ["DataConfig", "EvalConfig", "ModelConfig", "RunConfig", "TrainConfig"]
__version__ = "0.1.0"
