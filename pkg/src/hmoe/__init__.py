"""Heterogeneous mixture-of-experts layers with a byte-level training harness."""

from .errors import (
    CheckpointFormatError,
    ConfigurationError,
    ContractError,
    DimensionError,
    SchemaError,
    TrainingDivergedError,
)
from .expert import Expert, expert_forward, new_expert, param_count
from .layer import (
    HeterogeneityProfile,
    HMoELayer,
    allocate_sizes,
    layer_stats,
    moe_forward,
    new_hmoe_layer,
)
from .losses import (
    AssignmentStats,
    AuxLossReport,
    entropy_loss,
    load_balance_loss,
    param_penalty_loss,
    total_objective,
)
from .model import Model, ModelConfig, build_model
from .routing import Router, RoutingDecision, new_router, router_probs, select_top_k, select_top_p
from .tensor import Tensor, backward, cross_entropy, finite_diff_check, no_grad, silu, softmax
from .training import AdamW, TrainConfig, evaluate_perplexity, train_loop, train_step

__all__ = [
    "AdamW",
    "AssignmentStats",
    "AuxLossReport",
    "CheckpointFormatError",
    "ConfigurationError",
    "ContractError",
    "DimensionError",
    "Expert",
    "HMoELayer",
    "HeterogeneityProfile",
    "Model",
    "ModelConfig",
    "Router",
    "RoutingDecision",
    "SchemaError",
    "Tensor",
    "TrainConfig",
    "TrainingDivergedError",
    "allocate_sizes",
    "backward",
    "build_model",
    "cross_entropy",
    "entropy_loss",
    "evaluate_perplexity",
    "expert_forward",
    "finite_diff_check",
    "layer_stats",
    "load_balance_loss",
    "moe_forward",
    "new_expert",
    "new_hmoe_layer",
    "new_router",
    "no_grad",
    "param_count",
    "param_penalty_loss",
    "router_probs",
    "select_top_k",
    "select_top_p",
    "silu",
    "softmax",
    "total_objective",
    "train_loop",
    "train_step",
]
