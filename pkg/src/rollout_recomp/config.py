"""Run configuration: one flat key-value document (YAML or JSON)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .optim import AdvantageMode, OptimConfig
from .recomposition import ScheduleParams
from .sim import PatternSeekEnv, SamplingConfig, ToolChainEnv

ENV_KEYS = {
    "pattern": ("vocab_size", "pattern_length", "n_patterns", "slip", "hard_fraction", "think_tokens"),
    "toolchain": ("slip", "depth_mix", "answer_length", "answer_vocab", "max_turns"),
}


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = 0
    env: Literal["pattern", "toolchain"] = "pattern"

    # PatternSeek
    vocab_size: int = Field(8, ge=2)
    pattern_length: int = Field(2, ge=1, le=3)
    n_patterns: int = Field(1, ge=1)
    slip: float = Field(0.3, ge=0, lt=1)
    hard_fraction: float = Field(0.5, ge=0, le=1)
    think_tokens: int = Field(3, ge=0)
    # ToolChain
    depth_mix: tuple[float, float, float] = (0.5, 0.3, 0.2)
    answer_length: int = Field(2, ge=1)
    answer_vocab: int = Field(8, ge=2)
    max_turns: int = Field(32, ge=1)
    # initial logits: STOP bias, and a pre-answer SEARCH bias (ToolChain only)
    # that starts the agent over-searching
    init_stop_bias: float = 0.0
    init_search_bias: float = 4.0

    total_steps: int = Field(200, ge=1)
    prompts_per_step: int = Field(16, ge=1)
    workers: int = Field(1, ge=1)

    # sampling
    temperature: float = Field(1.0, gt=0)
    max_tokens: int = Field(64, ge=1)
    group_size: int = Field(12, ge=2)

    # optimizer
    advantage_mode: Literal["grpo", "dr_grpo", "ppo"] = "dr_grpo"
    clip_epsilon: float = Field(0.2, gt=0)
    learning_rate: float = Field(1.0, ge=0)
    kl_coef: float = Field(0.0, ge=0)
    gamma: float = Field(1.0, ge=0, le=1)
    lam: float = Field(1.0, ge=0, le=1)
    std_floor: float = Field(1e-6, gt=0)
    critic_lr: float = Field(0.1, ge=0)

    # recomposition
    recomp_enabled: bool = True
    alpha: float = Field(0.8, gt=0, le=1)
    p_lower: float = Field(0.2, gt=0, le=1)
    comp_batch_size: int = Field(32, ge=0)
    buffer_capacity: Optional[int] = Field(None, ge=0)
    retain_on_skip: bool = False
    use_compensation: bool = True
    comp_on_policy_loss: bool = False
    recompute_comp_advantages: bool = False
    filter_zero_variance: bool = False

    # rewards
    reward_mode: Literal["auto", "exact", "f1"] = "auto"
    shaping: Literal["none", "truncation_zero", "length_penalty"] = "none"
    truncation_limit: Optional[int] = Field(None, ge=1)
    penalty_weight: float = Field(0.5, ge=0)
    correct_threshold: float = Field(0.5, ge=0, le=1)

    # evaluation / output
    eval_questions: int = Field(32, ge=1)
    eval_samples: int = Field(16, ge=1)
    final_window: int = Field(10, ge=1)
    out_dir: Optional[str] = None

    @field_validator("depth_mix")
    @classmethod
    def _mix_sums_to_one(cls, v):
        if abs(sum(v) - 1.0) > 1e-9 or min(v) < 0:
            raise ValueError("depth_mix must be a probability vector")
        return v

    @model_validator(mode="after")
    def _check(self):
        expected = "exact" if self.env == "pattern" else "f1"
        if self.reward_mode not in ("auto", expected):
            raise ValueError(f"env {self.env!r} scores with {expected!r} rewards")
        if self.shaping == "truncation_zero" and self.truncation_limit is None:
            raise ValueError("truncation_zero shaping needs truncation_limit")
        if self.vocab_size < self.pattern_length:
            raise ValueError("vocab_size must cover the pattern")
        return self

    # ----------------------------------------------------------------- views

    @property
    def capacity(self) -> int:
        if self.buffer_capacity is not None:
            return self.buffer_capacity
        return 2 * self.comp_batch_size

    @property
    def sampling(self) -> SamplingConfig:
        return SamplingConfig(self.temperature, self.max_tokens, self.group_size)

    @property
    def optim(self) -> OptimConfig:
        return OptimConfig(
            clip_epsilon=self.clip_epsilon,
            learning_rate=self.learning_rate,
            kl_coef=self.kl_coef,
            advantage_mode=AdvantageMode(self.advantage_mode, self.gamma, self.lam),
            std_floor=self.std_floor,
            critic_lr=self.critic_lr,
        )

    @property
    def schedule(self) -> ScheduleParams:
        return ScheduleParams(self.p_lower, self.total_steps)

    def make_env(self):
        if self.env == "pattern":
            return PatternSeekEnv(self.vocab_size, self.pattern_length, self.n_patterns, self.seed,
                                  slip=self.slip, hard_fraction=self.hard_fraction,
                                  think_tokens=self.think_tokens)
        return ToolChainEnv(self.depth_mix, self.answer_length, self.answer_vocab,
                            self.max_turns, self.correct_threshold, self.seed, self.slip)

    def env_signature(self) -> tuple:
        return (self.env,) + tuple(getattr(self, k) for k in ENV_KEYS[self.env])

    def with_(self, **changes) -> "RunConfig":
        return RunConfig.model_validate({**self.model_dump(), **changes})


def load_config(path: str | Path, **overrides) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        data = json.loads(text)
    else:
        data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a flat key-value document")
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ValueError(f"{path}: nested sections are not supported ({', '.join(nested)})")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.model_validate(data)
