"""Domain types shared across the package, plus group statistics and the
reduction / pass@k metrics used in reports."""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass
from typing import Any, Sequence, Union

Advantage = Union[float, tuple]


class Source(str, enum.Enum):
    PRIORITY = "priority"
    COMPENSATION = "compensation"


@dataclass(frozen=True)
class Question:
    id: int
    payload: Any
    reference: tuple = ()


@dataclass(frozen=True)
class Response:
    """One sampled trajectory.

    ``states`` holds the policy state each token was sampled from so the
    log-probabilities can be re-evaluated after the policy moves. ``advantage``
    is filled in after scoring and travels with the response into the replay
    buffer.
    """

    question_id: int
    tokens: tuple
    cost: int
    reward: float = 0.0
    correct: bool = False
    behavior_logprobs: tuple = ()
    born_step: int = 0
    states: tuple = ()
    index: int = 0
    advantage: Advantage | None = None

    def __post_init__(self):
        if self.cost < 0:
            raise ValueError(f"cost must be non-negative, got {self.cost}")
        if not 0.0 <= self.reward <= 1.0:
            raise ValueError(f"reward must lie in [0, 1], got {self.reward}")
        if len(self.behavior_logprobs) != len(self.tokens):
            raise ValueError("behavior_logprobs and tokens differ in length")
        if any(lp > 0.0 for lp in self.behavior_logprobs):
            raise ValueError("behavior log-probs must be <= 0")
        if self.states and len(self.states) != len(self.tokens):
            raise ValueError("states and tokens differ in length")

    def with_(self, **changes) -> "Response":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class RolloutGroup:
    question_id: int
    responses: tuple = ()

    def __post_init__(self):
        for r in self.responses:
            if r.question_id != self.question_id:
                raise ValueError(
                    f"response for question {r.question_id} in group {self.question_id}"
                )

    def __len__(self):
        return len(self.responses)

    def __iter__(self):
        return iter(self.responses)


@dataclass(frozen=True)
class TrainItem:
    response: Response
    advantage: Advantage
    source: Source = Source.PRIORITY

    def __post_init__(self):
        if isinstance(self.advantage, tuple) and len(self.advantage) != len(self.response.tokens):
            raise ValueError("per-token advantage length must match token count")


@dataclass(frozen=True)
class StepMetrics:
    step: int
    mean_reward: float
    mean_cost: float
    p_comp: float
    n_priority_items: int
    n_comp_items: int
    buffer_size: int
    did_comp_update: bool
    n_pushed: int = 0
    n_dropped: int = 0
    accuracy: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StepMetrics":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


STEP_METRICS_FIELDS = [f.name for f in dataclasses.fields(StepMetrics)]


def group_stats(group: RolloutGroup | Sequence[Response]) -> tuple[float, float, float]:
    """Mean reward, population std of rewards and mean cost over a group."""
    responses = group.responses if isinstance(group, RolloutGroup) else tuple(group)
    if not responses:
        raise ValueError("empty group")
    n = len(responses)
    rewards = [r.reward for r in responses]
    mean = math.fsum(rewards) / n
    var = math.fsum((x - mean) ** 2 for x in rewards) / n
    mean_cost = math.fsum(r.cost for r in responses) / n
    return mean, math.sqrt(var), mean_cost


def reduction_pct(baseline: float, treated: float) -> float:
    if baseline <= 0:
        raise ValueError(f"baseline must be positive, got {baseline}")
    return 100.0 * (baseline - treated) / baseline


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k estimate from ``n`` samples of which ``c`` are correct."""
    if not (0 <= c <= n and 1 <= k <= n):
        raise ValueError(f"need 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}")
    if n - c < k:
        return 1.0
    # 1 - C(n-c, k) / C(n, k) as a running product to stay in floating range
    prob_all_wrong = 1.0
    for i in range(n - c + 1, n + 1):
        prob_all_wrong *= 1.0 - k / i
    return 1.0 - prob_all_wrong
