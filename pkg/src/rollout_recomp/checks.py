"""Self-checks behind ``rollout-recomp verify``.

Each check compares a library function against a slow independent oracle
on randomized inputs and returns a :class:`CheckResult`.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import Response, RolloutGroup, Source, TrainItem, reduction_pct
from .optim import DR_GRPO, GRPO, AdvantageMode, OptimConfig, batch_gradient, batch_objective
from .optim import grpo_advantages, ppo_clip_objective
from .recomposition import ReplayBuffer, ReplayBufferError, ScheduleParams, comp_probability
from .recomposition import partition, select_priority
from .sim import PolicyParams


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _resp(cost: int, correct: bool, index: int) -> Response:
    return Response(0, (0,) * cost, cost, float(correct), correct, (0.0,) * cost, index=index)


def check_selection(n_groups: int = 1000, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n_groups):
        n = int(rng.integers(1, 33))
        costs = rng.integers(0, 40, n)
        flags = rng.random(n) < rng.random()
        alpha = float(rng.uniform(0.01, 1.0))
        group = RolloutGroup(0, tuple(_resp(int(c), bool(f), i)
                                      for i, (c, f) in enumerate(zip(costs, flags))))
        sel, _ = select_priority(partition(group), alpha)
        want = set()
        for ok, sign in ((True, 1), (False, -1)):
            idx = [i for i in range(n) if flags[i] == ok]
            k = max(1, math.floor(alpha * len(idx) + 0.5)) if idx else 0
            want |= set(sorted(idx, key=lambda i: (sign * costs[i], i))[:k])
        mismatches += {r.index for r in sel} != want
    return mismatches == 0, f"{n_groups} groups, {mismatches} mismatches"


def check_advantages(n_groups: int = 1000, seed: int = 0) -> tuple[bool, str]:
    hand = (
        grpo_advantages([1, 1, 1, 1], GRPO) == [0, 0, 0, 0]
        and np.allclose(grpo_advantages([1, 0, 0, 1], GRPO), [1, -1, -1, 1])
        and np.allclose(grpo_advantages([1, 0, 1], DR_GRPO), [1 / 3, -2 / 3, 1 / 3])
    )
    rng = np.random.default_rng(seed)
    worst_sum = worst_std = 0.0
    for _ in range(n_groups):
        r = rng.random(int(rng.integers(2, 33)))
        a = np.asarray(grpo_advantages(r.tolist(), GRPO))
        worst_sum = max(worst_sum, abs(a.sum()))
        worst_std = max(worst_std, abs(a.std() - 1.0))
    ok = hand and worst_sum < 1e-9 and worst_std < 1e-6
    return ok, f"hand={hand} max|sum|={worst_sum:.1e} max|std-1|={worst_std:.1e}"


def check_schedule(T_max: int = 1200, p_lower: float = 0.2) -> tuple[bool, str]:
    s = ScheduleParams(p_lower, T_max)
    want = {0: 1.0, T_max / 4: (1 + math.sqrt(2) / 2) / 2, T_max / 2: 0.5,
            2 * T_max / 3: 0.25, T_max: p_lower}
    err = max(abs(comp_probability(t, s) - p) for t, p in want.items())
    ps = [comp_probability(t, s) for t in range(T_max + 1)]
    monotone = all(a >= b for a, b in zip(ps, ps[1:]))
    return err < 1e-12 and monotone, f"max err {err:.1e}, monotone={monotone}"


def _random_batch(rng, params: PolicyParams, n: int) -> list:
    items = []
    lp = params.log_probs()
    for i in range(n):
        length = int(rng.integers(1, 6))
        states = rng.integers(0, params.n_states, length)
        actions = rng.integers(0, params.n_actions, length)
        old = np.minimum(lp[states, actions] + rng.normal(0, 0.1, length), 0.0)
        r = Response(0, tuple(actions.tolist()), length, 0.0, False, tuple(old.tolist()),
                     states=tuple(states.tolist()), index=i)
        items.append(TrainItem(r, float(rng.normal()), Source.PRIORITY))
    return items


def check_gradient(n_policies: int = 20, h: float = 1e-5, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_policies):
        params = PolicyParams(rng.normal(size=(3, 4)))
        cfg = OptimConfig(advantage_mode=AdvantageMode((GRPO, DR_GRPO)[k % 2]))
        batch = _random_batch(rng, params, 6)
        g = batch_gradient(params, batch, cfg)
        fd = np.zeros_like(g)
        for idx in np.ndindex(g.shape):
            up, dn = params.theta.copy(), params.theta.copy()
            up[idx] += h
            dn[idx] -= h
            fd[idx] = (batch_objective(PolicyParams(up), batch, cfg)
                       - batch_objective(PolicyParams(dn), batch, cfg)) / (2 * h)
        worst = max(worst, np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-8))
    return worst < 1e-4, f"max relative error {worst:.1e}"


def check_clip(n: int = 10_000, seed: int = 0) -> tuple[bool, str]:
    ex = [
        ppo_clip_objective([0.0, 0.0], [0.0, 0.0], [0.5, -1.0], 0.2),
        ppo_clip_objective([math.log(1.5)], [0.0], [1.0], 0.2),
        ppo_clip_objective([math.log(0.5)], [0.0], [-1.0], 0.2),
    ]
    hand = (abs(ex[0][0] + 0.25) < 1e-12 and ex[0][1].all()
            and abs(ex[1][0] - 1.2) < 1e-12 and not ex[1][1][0]
            and abs(ex[2][0] + 0.8) < 1e-12 and not ex[2][1][0])
    rng = np.random.default_rng(seed)
    logr = rng.uniform(-2, 2, n)
    adv = rng.uniform(-3, 3, n)
    eps = rng.uniform(0.01, 0.5, n)
    bad = 0
    for lr, a, e in zip(logr, adv, eps):
        _, active = ppo_clip_objective([lr], [0.0], [a], e)
        r = math.exp(lr)
        outside = (a > 0 and r > 1 + e) or (a < 0 and r < 1 - e)
        bad += outside and bool(active[0])
    return hand and bad == 0, f"examples={hand}, {bad} violations in {n}"


def check_buffer(n_ops: int = 10_000, capacity: int = 64, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    buf, model, counter, bad = ReplayBuffer(capacity), [], 0, 0
    for _ in range(n_ops):
        n = int(rng.integers(0, 12))
        if rng.random() < 0.5:
            try:
                buf.push([_resp(0, True, counter + i) for i in range(n)])
                model.extend(range(counter, counter + n))
                counter += n
            except ReplayBufferError:
                bad += len(model) + n <= capacity
        else:
            try:
                got = [r.index for r in buf.pop_oldest(n)]
                bad += got != model[:n]
                del model[:n]
            except ReplayBufferError:
                bad += n <= len(model)
        bad += len(buf) > capacity or [r.index for r in buf] != model
    return bad == 0, f"{n_ops} ops, {bad} violations"


def check_reduction() -> tuple[bool, str]:
    a, b = reduction_pct(997, 721), reduction_pct(6.2, 3.3)
    return abs(a - 27.7) <= 0.05 and abs(b - 46.8) <= 0.05, f"{a:.2f}%, {b:.2f}%"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "selection": check_selection,
    "advantages": check_advantages,
    "schedule": check_schedule,
    "gradient": check_gradient,
    "clip": check_clip,
    "buffer": check_buffer,
    "reduction": check_reduction,
}


def run_checks(names=None) -> list:
    out = []
    for name in names or CHECKS:
        t0 = time.perf_counter()
        ok, detail = CHECKS[name]()
        out.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return out
