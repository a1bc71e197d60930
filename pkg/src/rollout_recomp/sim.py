"""Synthetic verifiable environments and rollout sampling.

Policies are tabular softmax tables ``theta[state, action]``. The state is
whatever the environment exposes after each step: the last emitted token for
PatternSeek, the last observation for ToolChain. Every sample draws from its
own counter-derived random stream, so a rollout is a pure function of
``(policy, question, config, seed, step, sample index)``.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .core import Question, Response, RolloutGroup
from .rewards import (
    FORMAT_FAILURE,
    RewardOutcome,
    apply_truncation_zero,
    f1_reward,
    verify_exact,
)

BOS = 0

# stream tags keep the rollout, question and gate streams disjoint
ROLLOUT_STREAM = 1
QUESTION_STREAM = 2
GATE_STREAM = 3
EVAL_STREAM = 4


def stream(seed: int, *counters: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *counters]))


class PolicyParams:
    """Logit table with temperature-aware probabilities."""

    def __init__(self, theta: np.ndarray):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.ndim != 2:
            raise ValueError("theta must be a 2-D [state, action] table")
        self.theta = theta

    @classmethod
    def zeros(cls, n_states: int, n_actions: int) -> "PolicyParams":
        return cls(np.zeros((n_states, n_actions)))

    @property
    def n_states(self) -> int:
        return self.theta.shape[0]

    @property
    def n_actions(self) -> int:
        return self.theta.shape[1]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.theta.copy())

    def log_probs(self, temperature: float = 1.0) -> np.ndarray:
        z = self.theta / temperature
        forced = np.isposinf(z).any(axis=1)
        if forced.any():
            # a +inf logit takes all the mass (shared evenly between ties)
            z = z.copy()
            z[forced] = np.where(np.isposinf(z[forced]), 0.0, -np.inf)
        z = z - z.max(axis=1, keepdims=True)
        with np.errstate(divide="ignore"):
            return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def probs(self, temperature: float = 1.0) -> np.ndarray:
        return np.exp(self.log_probs(temperature))

    def sequence_logprobs(self, states: Sequence[int], actions: Sequence[int],
                          temperature: float = 1.0) -> np.ndarray:
        return self.log_probs(temperature)[np.asarray(states), np.asarray(actions)]


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    max_tokens: int = 64
    group_size: int = 12

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")


class Episode(Protocol):
    state: int
    done: bool

    def step(self, action: int) -> None: ...


class Environment(Protocol):
    n_states: int
    n_actions: int

    def sample_questions(self, rng: np.random.Generator, n: int, first_id: int) -> list: ...

    def episode(self, question: Question, rng: np.random.Generator, max_tokens: int) -> Episode: ...

    def horizon(self, question: Question, max_tokens: int) -> int: ...

    def outcome(self, question: Question, tokens: Sequence[int], episode: Episode,
                max_tokens: int) -> tuple[int, RewardOutcome]: ...


# --------------------------------------------------------------------------
# PatternSeek

@dataclass(frozen=True)
class PatternSeekTask:
    """Emit ``pattern`` then STOP. ``min_start`` > 0 marks a hard question:
    the pattern only counts when at least that many tokens precede it."""

    pattern: tuple
    vocab_size: int = 8
    min_start: int = 0

    @property
    def stop(self) -> int:
        return self.vocab_size

    def __post_init__(self):
        if not 1 <= len(self.pattern) <= 3:
            raise ValueError("pattern length must be 1..3")
        if any(not 0 <= p < self.vocab_size for p in self.pattern):
            raise ValueError("pattern symbols must come from the non-STOP vocabulary")


def contains_run(tokens: Sequence[int], pattern: Sequence[int], start: int = 0) -> bool:
    k = len(pattern)
    pattern = tuple(pattern)
    return any(tuple(tokens[i:i + k]) == pattern for i in range(start, len(tokens) - k + 1))


def score_pattern(response: Response, task: PatternSeekTask, limit: int) -> RewardOutcome:
    """Exact-match reward: the pattern must appear before a proper STOP."""
    tokens = response.tokens
    terminated = bool(tokens) and tokens[-1] == task.stop and task.stop not in tokens[:-1]
    body = tokens[:-1] if terminated else tokens
    found = task.pattern if contains_run(body, task.pattern, task.min_start) else ()
    outcome = verify_exact(found, task.pattern, terminated)
    return apply_truncation_zero(outcome, response.cost, limit)


class _PatternEpisode:
    __slots__ = ("state", "done", "stop", "max_tokens", "n", "rng")

    def __init__(self, stop: int, max_tokens: int, rng=None):
        self.rng = rng
        self.state = BOS
        self.done = False
        self.stop = stop
        self.max_tokens = max_tokens
        self.n = 0

    def step(self, action: int) -> None:
        self.n += 1
        self.state = action + 1
        if action == self.stop or self.n >= self.max_tokens:
            self.done = True


class PatternSeekEnv:
    """Emit a target run of symbols, then STOP.

    Actions are the symbols ``0..V-1`` plus STOP = ``V``; the state is the
    last emitted action shifted by one (0 is BOS). ``n_patterns`` distinct
    targets are drawn once from ``seed``; questions sample among them.
    """

    name = "pattern"

    def __init__(self, vocab_size: int = 8, pattern_length: int = 2, n_patterns: int = 1,
                 seed: int = 0, limit: int | None = None, slip: float = 0.0,
                 hard_fraction: float = 0.0, think_tokens: int = 0):
        if not 0.0 <= slip < 1.0:
            raise ValueError("slip must lie in [0, 1)")
        if not 0.0 <= hard_fraction <= 1.0:
            raise ValueError("hard_fraction must lie in [0, 1]")
        if pattern_length > vocab_size:
            raise ValueError("vocab_size too small for the pattern")
        self.slip = slip
        self.hard_fraction = hard_fraction
        self.think_tokens = think_tokens
        self.vocab_size = vocab_size
        self.pattern_length = pattern_length
        self.n_actions = vocab_size + 1
        self.n_states = self.n_actions + 1
        self.limit = limit
        rng = stream(seed, 0)
        pats: list = []
        while len(pats) < n_patterns:
            p = tuple(int(x) for x in rng.choice(vocab_size, size=pattern_length, replace=False))
            if p not in pats:
                pats.append(p)
        self.patterns = pats
        self.tasks = [PatternSeekTask(p, vocab_size) for p in pats]
        self.hard_tasks = [PatternSeekTask(p, vocab_size, think_tokens) for p in pats]

    @property
    def stop(self) -> int:
        return self.vocab_size

    def sample_questions(self, rng, n, first_id=0):
        idx = rng.integers(len(self.tasks), size=n)
        hard = rng.random(n) < self.hard_fraction
        out = []
        for i, (j, h) in enumerate(zip(idx, hard)):
            task = (self.hard_tasks if h else self.tasks)[int(j)]
            out.append(Question(first_id + i, task, task.pattern))
        return out

    def episode(self, question, rng, max_tokens):
        return _PatternEpisode(self.stop, max_tokens, rng)

    def horizon(self, question, max_tokens):
        return max_tokens

    def outcome(self, question, tokens, episode, max_tokens) -> tuple[int, RewardOutcome]:
        limit = self.limit if self.limit is not None else max_tokens
        cost = len(tokens)
        probe = Response(question.id, tuple(tokens), cost, behavior_logprobs=(0.0,) * len(tokens))
        outcome = score_pattern(probe, question.payload, limit)
        # slip: a found pattern is still graded wrong with probability `slip`,
        # independent of length (hard questions keep groups mixed)
        if self.slip > 0.0 and episode.rng.random() < self.slip and outcome.correct:
            outcome = RewardOutcome(0.0, False, True)
        return cost, outcome


# --------------------------------------------------------------------------
# ToolChain

SEARCH, ANSWER, STOP = 0, 1, 2
TOOL_ACTIONS = ("SEARCH", "ANSWER", "STOP")
# policy states: what the agent saw last
OBS_KEY, OBS_ANSWER, ANSWERED = 1, 2, 3


@dataclass(frozen=True)
class ToolChainTask:
    """A key-value chain ``start -> k1 -> ... -> answer`` of ``depth`` hops."""

    kb: tuple
    start: int
    depth: int
    answer: tuple
    max_turns: int = 32

    def follow(self, key: int):
        return dict(self.kb)[key]

    def __post_init__(self):
        node = self.start
        for _ in range(self.depth):
            node = self.follow(node)
        if node != tuple(self.answer):
            raise ValueError("chain does not reach the gold answer in `depth` hops")


@dataclass
class ToolState:
    task: ToolChainTask
    node: object
    rng: np.random.Generator
    searches: int = 0
    turns: int = 0
    candidate: list = field(default_factory=list)
    answered: bool = False
    done: bool = False
    malformed: bool = False
    stopped: bool = False


def step_tool(ts: ToolState, action: int) -> int:
    """Apply one agent action and return the observation (next policy state).

    SEARCH follows the chain one hop (a search on the answer itself returns
    it again). ANSWER appends the most recent retrieved value to the
    candidate answer, or a uniform guess if nothing was retrieved yet.
    """
    if ts.done:
        raise RuntimeError("episode already finished")
    ts.turns += 1
    obs: int
    if action == SEARCH:
        ts.searches += 1
        if not isinstance(ts.node, tuple):
            ts.node = ts.task.follow(ts.node)
        obs = OBS_ANSWER if isinstance(ts.node, tuple) else OBS_KEY
    elif action == ANSWER:
        if ts.searches == 0:
            vocab = _entity_count(ts.task)
            ts.candidate.append(int(ts.rng.integers(vocab)))
        elif isinstance(ts.node, tuple):
            ts.candidate.extend(ts.node)
        else:
            ts.candidate.append(ts.node)
        ts.answered = True
        obs = ANSWERED
    elif action == STOP:
        ts.stopped = True
        ts.done = True
        obs = ANSWERED
    else:
        ts.malformed = True
        ts.done = True
        obs = ANSWERED
    if ts.turns >= ts.task.max_turns:
        ts.done = True
    return obs


def _entity_count(task: ToolChainTask) -> int:
    return len(task.kb) + len(task.answer) + 8


def tool_outcome(ts: ToolState, threshold: float = 0.5) -> RewardOutcome:
    format_ok = ts.stopped and ts.answered and not ts.malformed
    if not format_ok:
        return FORMAT_FAILURE
    return f1_reward(ts.candidate, ts.task.answer, True, threshold)


class _ToolEpisode:
    __slots__ = ("ts", "state", "done")

    def __init__(self, ts: ToolState):
        self.ts = ts
        self.state = BOS
        self.done = False

    def step(self, action: int) -> None:
        self.state = step_tool(self.ts, action)
        self.done = self.ts.done


class ToolChainEnv:
    """Multi-hop lookup over a synthetic key-value store.

    Entities are integers; keys live in ``[0, n_keys)`` and answer tokens in
    ``[n_keys, n_keys + answer_vocab)``. Hop depths follow ``depth_mix``.
    """

    name = "toolchain"
    n_actions = 3
    n_states = 4

    def __init__(self, depth_mix=(0.5, 0.3, 0.2), answer_length: int = 2,
                 answer_vocab: int = 8, max_turns: int = 32, threshold: float = 0.5, seed: int = 0,
                 slip: float = 0.0):
        if abs(sum(depth_mix) - 1.0) > 1e-9:
            raise ValueError("depth_mix must sum to 1")
        if not 0.0 <= slip < 1.0:
            raise ValueError("slip must lie in [0, 1)")
        self.slip = slip
        self.depth_mix = tuple(depth_mix)
        self.answer_length = answer_length
        self.answer_vocab = answer_vocab
        self.max_turns = max_turns
        self.threshold = threshold

    def make_task(self, rng: np.random.Generator) -> ToolChainTask:
        depth = int(rng.choice(len(self.depth_mix), p=self.depth_mix)) + 1
        keys = [int(k) for k in rng.choice(64, size=depth, replace=False)]
        answer = tuple(int(a) + 64 for a in rng.choice(self.answer_vocab, size=self.answer_length,
                                                      replace=False))
        kb = []
        for i, k in enumerate(keys):
            kb.append((k, keys[i + 1] if i + 1 < depth else answer))
        return ToolChainTask(tuple(kb), keys[0], depth, answer, self.max_turns)

    def sample_questions(self, rng, n, first_id=0):
        out = []
        for i in range(n):
            task = self.make_task(rng)
            out.append(Question(first_id + i, task, task.answer))
        return out

    def episode(self, question, rng, max_tokens):
        task = question.payload
        return _ToolEpisode(ToolState(task, task.start, rng))

    def horizon(self, question, max_tokens):
        return question.payload.max_turns

    def outcome(self, question, tokens, episode, max_tokens) -> tuple[int, RewardOutcome]:
        outcome = tool_outcome(episode.ts, self.threshold)
        if self.slip > 0.0 and episode.ts.rng.random() < self.slip and outcome.correct:
            outcome = RewardOutcome(0.0, False, True)
        return episode.ts.searches, outcome

    def replay(self, question: Question, tokens: Sequence[int], rng) -> ToolState:
        ts = ToolState(question.payload, question.payload.start, rng)
        for a in tokens:
            step_tool(ts, a)
        return ts


# --------------------------------------------------------------------------
# rollout

def _sample_one(env, question: Question, log_table: list, cdf_table: list,
                max_tokens: int, rng: np.random.Generator):
    ep = env.episode(question, rng, max_tokens)
    horizon = env.horizon(question, max_tokens)
    # one uniform per step drawn up front; the env makes its own draws after
    us = rng.random(horizon).tolist()
    tokens, states, logps = [], [], []
    t = 0
    while not ep.done and t < horizon:
        s = ep.state
        cdf = cdf_table[s]
        a = min(bisect_right(cdf, us[t] * cdf[-1]), len(cdf) - 1)
        tokens.append(a)
        states.append(s)
        logps.append(log_table[s][a])
        ep.step(a)
        t += 1
    return tokens, states, logps, ep


def rollout(policy: PolicyParams, question: Question, cfg: SamplingConfig, env,
            seed: int = 0, step: int = 0, born_step: int | None = None) -> RolloutGroup:
    """Sample ``cfg.group_size`` responses and score them."""
    logp = policy.log_probs(cfg.temperature)
    log_table = logp.tolist()
    cdf_table = np.cumsum(np.exp(logp), axis=1).tolist()
    return _rollout_tables(env, question, cfg, log_table, cdf_table, seed, step,
                           step if born_step is None else born_step)


def _rollout_tables(env, question, cfg, log_table, cdf_table, seed, step, born_step,
                    tag=ROLLOUT_STREAM):
    responses = []
    for i in range(cfg.group_size):
        rng = stream(seed, tag, step, question.id, i)
        tokens, states, logps, ep = _sample_one(env, question, log_table, cdf_table,
                                                cfg.max_tokens, rng)
        cost, outcome = env.outcome(question, tokens, ep, cfg.max_tokens)
        responses.append(Response(
            question.id, tuple(tokens), cost, outcome.reward, outcome.correct,
            tuple(min(0.0, x) for x in logps), born_step, tuple(states), i,
        ))
    return RolloutGroup(question.id, tuple(responses))


def rollout_batch(policy: PolicyParams, questions: Sequence[Question], cfg: SamplingConfig,
                  env, seed: int, step: int, workers: int = 1,
                  tag: int = ROLLOUT_STREAM) -> list:
    """Roll out every question against one frozen policy snapshot.

    Results come back in question order whatever ``workers`` is.
    """
    logp = policy.log_probs(cfg.temperature)
    log_table = logp.tolist()
    cdf_table = np.cumsum(np.exp(logp), axis=1).tolist()

    def one(q):
        return _rollout_tables(env, q, cfg, log_table, cdf_table, seed, step, step, tag)

    if workers <= 1:
        return [one(q) for q in questions]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, questions))


def make_env(kind: str, **params):
    if kind in ("pattern", "patternseek", "pattern_seek"):
        return PatternSeekEnv(**params)
    if kind in ("toolchain", "tool_chain"):
        return ToolChainEnv(**params)
    raise ValueError(f"unknown environment {kind!r}")


def response_logprob(policy: PolicyParams, response: Response, temperature: float = 1.0) -> float:
    return float(math.fsum(policy.sequence_logprobs(response.states, response.tokens, temperature)))
