"""Verifiable reward functions and reward shaping."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace
from typing import Iterable

DEFAULT_CORRECT_THRESHOLD = 0.5


@dataclass(frozen=True)
class RewardOutcome:
    reward: float
    correct: bool
    format_ok: bool = True

    def __post_init__(self):
        if not 0.0 <= self.reward <= 1.0:
            raise ValueError(f"reward must lie in [0, 1], got {self.reward}")
        if not self.format_ok and (self.reward != 0.0 or self.correct):
            raise ValueError("format failure must carry zero reward")


FORMAT_FAILURE = RewardOutcome(0.0, False, False)


def verify_exact(pred: Iterable, ref: Iterable, format_ok: bool) -> RewardOutcome:
    """Binary reward: 1 only when the format is valid and ``pred == ref``."""
    if not format_ok:
        return FORMAT_FAILURE
    ok = tuple(pred) == tuple(ref)
    return RewardOutcome(1.0 if ok else 0.0, ok, True)


def f1_score(pred: Iterable, ref: Iterable) -> float:
    pred_counts, ref_counts = Counter(pred), Counter(ref)
    n_pred, n_ref = sum(pred_counts.values()), sum(ref_counts.values())
    if n_pred == 0 or n_ref == 0:
        return 0.0
    overlap = sum((pred_counts & ref_counts).values())
    if overlap == 0:
        return 0.0
    precision = overlap / n_pred
    recall = overlap / n_ref
    return 2 * precision * recall / (precision + recall)


def f1_reward(
    pred: Iterable,
    ref: Iterable,
    format_ok: bool = True,
    threshold: float = DEFAULT_CORRECT_THRESHOLD,
) -> RewardOutcome:
    """Multiset token F1 as reward; ``correct`` when F1 reaches ``threshold``."""
    if not format_ok:
        return FORMAT_FAILURE
    f1 = f1_score(pred, ref)
    return RewardOutcome(f1, f1 >= threshold, True)


def apply_truncation_zero(outcome: RewardOutcome, cost: int, limit: int) -> RewardOutcome:
    if limit <= 0:
        raise ValueError(f"limit must be positive, got {limit}")
    if cost > limit:
        return replace(outcome, reward=0.0, correct=False)
    return outcome


def length_penalty_baseline(
    outcome: RewardOutcome,
    cost: int,
    group_min_cost: int,
    group_max_cost: int,
    weight: float = 0.5,
) -> RewardOutcome:
    """Linear group-normalized length penalty, clamped to [0, 1].

    The correctness flag is left alone so batch recomposition (if enabled)
    still sees the verifier's verdict.
    """
    if group_max_cost < group_min_cost:
        raise ValueError("group_max_cost must be >= group_min_cost")
    span = group_max_cost - group_min_cost
    if span == 0:
        return outcome
    shaped = outcome.reward - weight * (cost - group_min_cost) / span
    return replace(outcome, reward=min(1.0, max(0.0, shaped)))
