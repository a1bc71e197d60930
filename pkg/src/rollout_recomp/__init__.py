"""Length-aware rollout recomposition for RL with verifiable rewards."""

__version__ = "0.1.0"

from .config import RunConfig, load_config
from .core import (
    Question,
    Response,
    RolloutGroup,
    Source,
    StepMetrics,
    TrainItem,
    group_stats,
    pass_at_k,
    reduction_pct,
)
from .optim import AdvantageMode, OptimConfig, apply_update, grpo_advantages, gae_advantages
from .recomposition import (
    ReplayBuffer,
    ScheduleParams,
    comp_probability,
    partition,
    recompose_step,
    select_priority,
)
from .rewards import RewardOutcome, f1_reward, verify_exact
from .trainer import RunReport, compare, emit_metrics, sweep_alpha, train

__all__ = [
    "AdvantageMode", "OptimConfig", "Question", "ReplayBuffer", "Response", "RewardOutcome",
    "RolloutGroup", "RunConfig", "RunReport", "ScheduleParams", "Source", "StepMetrics",
    "TrainItem", "apply_update", "comp_probability", "compare", "emit_metrics", "f1_reward",
    "gae_advantages", "group_stats", "grpo_advantages", "load_config", "partition",
    "pass_at_k", "recompose_step", "reduction_pct", "select_priority", "sweep_alpha", "train",
    "verify_exact",
]
