"""Priority / compensation batch recomposition.

Each rollout group is split by correctness; the shortest correct and the
longest incorrect responses form the priority batch, the intermediate ones
go to a FIFO replay buffer that periodically yields a compensation batch.
How often the compensation batch is actually trained on follows a cosine
decay with a floor.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import Response, RolloutGroup


class ReplayBufferError(RuntimeError):
    pass


@dataclass(frozen=True)
class PartitionedGroup:
    correct: tuple
    incorrect: tuple


@dataclass(frozen=True)
class ScheduleParams:
    p_lower: float = 0.2
    T_max: int = 200

    def __post_init__(self):
        if not 0.0 < self.p_lower <= 1.0:
            raise ValueError(f"p_lower must lie in (0, 1], got {self.p_lower}")
        if self.T_max < 1:
            raise ValueError(f"T_max must be >= 1, got {self.T_max}")


def partition(group: RolloutGroup | Sequence[Response]) -> PartitionedGroup:
    responses = group.responses if isinstance(group, RolloutGroup) else tuple(group)
    correct = tuple(r for r in responses if r.correct)
    incorrect = tuple(r for r in responses if not r.correct)
    return PartitionedGroup(correct, incorrect)


def selection_count(alpha: float, n: int) -> int:
    """Round-half-up share of ``n``, at least one when the class is non-empty."""
    if n == 0:
        return 0
    return max(1, math.floor(alpha * n + 0.5))


def select_priority(part: PartitionedGroup, alpha: float) -> tuple[list, list]:
    """Pick the top-``alpha`` shortest correct and longest incorrect responses.

    Returns ``(selected, remainder)``. Ties in cost go to the response sampled
    first. Both lists come back in sampling order (``Response.index``) so a
    selection covering the whole group reproduces the group exactly.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")

    def pick(items: tuple, k: int, longest: bool) -> set:
        order = sorted(
            range(len(items)),
            key=lambda i: (-items[i].cost if longest else items[i].cost, i),
        )
        return set(order[:k])

    k_c = selection_count(alpha, len(part.correct))
    k_i = selection_count(alpha, len(part.incorrect))
    keep_c = pick(part.correct, k_c, longest=False)
    keep_i = pick(part.incorrect, k_i, longest=True)

    selected, remainder = [], []
    for keep, items in ((keep_c, part.correct), (keep_i, part.incorrect)):
        for i, r in enumerate(items):
            (selected if i in keep else remainder).append(r)
    selected.sort(key=lambda r: r.index)
    remainder.sort(key=lambda r: r.index)
    return selected, remainder


def comp_probability(t: int | float, sched: ScheduleParams) -> float:
    """Probability of training on a compensation batch at step ``t``."""
    if not 0 <= t <= sched.T_max:
        raise ValueError(f"step {t} outside [0, {sched.T_max}]")
    return max(sched.p_lower, (1.0 + math.cos(math.pi * t / sched.T_max)) / 2.0)


class ReplayBuffer:
    """Bounded FIFO of deferred responses. Single writer."""

    def __init__(self, capacity: int, entries: Iterable[Response] = ()):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self._entries: deque = deque(entries)
        if len(self._entries) > capacity:
            raise ReplayBufferError("buffer overflow; drain before push")

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    @property
    def entries(self) -> list:
        return list(self._entries)

    @property
    def free(self) -> int:
        return self.capacity - len(self._entries)

    def push(self, items: Sequence[Response]) -> "ReplayBuffer":
        if len(items) > self.free:
            raise ReplayBufferError("buffer overflow; drain before push")
        self._entries.extend(items)
        return self

    def pop_oldest(self, n: int) -> list:
        if n < 0 or n > len(self._entries):
            raise ReplayBufferError(f"buffer underflow: asked {n}, have {len(self._entries)}")
        return [self._entries.popleft() for _ in range(n)]


def buffer_push(buf: ReplayBuffer, items: Sequence[Response]) -> ReplayBuffer:
    return buf.push(items)


def buffer_pop_oldest(buf: ReplayBuffer, n: int) -> tuple[list, ReplayBuffer]:
    batch = buf.pop_oldest(n)
    return batch, buf


@dataclass
class RecomposeResult:
    priority: list
    comp: list | None
    buffer: ReplayBuffer
    p_comp: float
    n_pushed: int
    n_dropped: int
    gated_in: bool


def recompose_step(
    groups: Sequence[RolloutGroup],
    buf: ReplayBuffer,
    t: int,
    sched: ScheduleParams,
    comp_batch_size: int,
    rng: np.random.Generator,
    alpha: float = 0.8,
    retain_on_skip: bool = False,
) -> RecomposeResult:
    """Run selection over every group, buffer the remainders and gate.

    When a push would overflow the buffer the oldest entries are evicted
    first; their count is reported as ``n_dropped`` together with any
    compensation batch discarded by the gate.
    """
    priority, remainder = [], []
    for group in groups:
        sel, rest = select_priority(partition(group), alpha)
        priority.extend(sel)
        remainder.extend(rest)

    n_remainder = len(remainder)
    dropped = 0
    overflow = len(remainder) - buf.free
    if overflow > 0:
        evict = min(overflow, len(buf))
        buf.pop_oldest(evict)
        dropped += evict
        if len(remainder) > buf.capacity:
            cut = len(remainder) - buf.capacity
            dropped += cut
            remainder = remainder[cut:]
    buf.push(remainder)

    p = comp_probability(t, sched)
    comp = None
    gated_in = False
    if comp_batch_size > 0 and len(buf) >= comp_batch_size:
        u = rng.random()
        if u < p:
            comp = buf.pop_oldest(comp_batch_size)
            gated_in = True
        elif not retain_on_skip:
            buf.pop_oldest(comp_batch_size)
            dropped += comp_batch_size
    return RecomposeResult(priority, comp, buf, p, n_remainder, dropped, gated_in)
