"""Advantages, the clipped surrogate, KL shaping and analytic updates for
tabular softmax policies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import Response, Source, TrainItem
from .sim import PolicyParams

GRPO = "grpo"
DR_GRPO = "dr_grpo"
PPO = "ppo"


@dataclass(frozen=True)
class AdvantageMode:
    kind: str = DR_GRPO
    gamma: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if self.kind not in (GRPO, DR_GRPO, PPO):
            raise ValueError(f"unknown advantage mode {self.kind!r}")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lambda must lie in [0, 1]")

    @property
    def is_group(self) -> bool:
        return self.kind in (GRPO, DR_GRPO)


@dataclass(frozen=True)
class OptimConfig:
    clip_epsilon: float = 0.2
    learning_rate: float = 0.1
    kl_coef: float = 0.0
    advantage_mode: AdvantageMode = field(default_factory=AdvantageMode)
    std_floor: float = 1e-6
    critic_lr: float = 0.1

    def __post_init__(self):
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        if self.kl_coef < 0:
            raise ValueError("kl_coef must be non-negative")
        if self.std_floor <= 0:
            raise ValueError("std_floor must be positive")


class ValueTable:
    """Tabular critic: one value per policy state."""

    def __init__(self, n_states: int, lr: float = 0.1):
        self.values = np.zeros(n_states)
        self.lr = lr

    def __getitem__(self, state):
        return self.values[state]

    def update(self, states: np.ndarray, returns: np.ndarray) -> None:
        if len(states) == 0:
            return
        err = np.zeros_like(self.values)
        np.add.at(err, states, returns - self.values[states])
        self.values += self.lr * err / len(states)


def grpo_advantages(rewards: Sequence[float], mode: AdvantageMode | str,
                    std_floor: float = 1e-6) -> list:
    kind = mode.kind if isinstance(mode, AdvantageMode) else mode
    if kind not in (GRPO, DR_GRPO):
        raise ValueError("group advantages need a grpo or dr_grpo mode")
    if len(rewards) == 0:
        raise ValueError("empty group")
    n = len(rewards)
    mean = math.fsum(rewards) / n
    centered = [r - mean for r in rewards]
    if kind == DR_GRPO:
        return centered
    std = math.sqrt(math.fsum(c * c for c in centered) / n)
    if std == 0.0:
        return [0.0] * n
    return [c / max(std, std_floor) for c in centered]


def gae_advantages(rewards: Sequence[float], values: Sequence[float], bootstrap: float = 0.0,
                   gamma: float = 1.0, lam: float = 1.0) -> list:
    if len(rewards) != len(values):
        raise ValueError("rewards and values differ in length")
    adv = [0.0] * len(rewards)
    running = 0.0
    next_value = bootstrap
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_value = values[t]
    return adv


def _clip_terms(ratio: np.ndarray, adv: np.ndarray, eps: float):
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    active = unclipped <= clipped
    return np.minimum(unclipped, clipped), active


def ppo_clip_objective(logp_new, logp_old, advantages, clip_epsilon: float):
    """Token-mean clipped surrogate and the mask of tokens carrying gradient."""
    logp_new = np.asarray(logp_new, dtype=float)
    logp_old = np.asarray(logp_old, dtype=float)
    advantages = np.asarray(advantages, dtype=float)
    if not (logp_new.shape == logp_old.shape == advantages.shape):
        raise ValueError("logp_new, logp_old and advantages differ in length")
    ratio = np.exp(logp_new - logp_old)
    terms, active = _clip_terms(ratio, advantages, clip_epsilon)
    return float(terms.mean()) if terms.size else 0.0, active


def kl_penalty(logp_new, logp_ref) -> np.ndarray:
    """Per-token k3 estimate of KL(new || ref); never negative."""
    logp_new = np.asarray(logp_new, dtype=float)
    logp_ref = np.asarray(logp_ref, dtype=float)
    if logp_new.shape != logp_ref.shape:
        raise ValueError("logp_new and logp_ref differ in length")
    d = logp_ref - logp_new
    return np.maximum(np.expm1(d) - d, 0.0)


def logprob_grad(params: PolicyParams, state: int, action: int,
                 temperature: float = 1.0) -> tuple[int, np.ndarray]:
    """Gradient of ``log pi(action | state)``; nonzero only on row ``state``.

    Returns ``(state, row)`` where ``row[a'] = (1{a'=a} - pi(a'|state)) / T``.
    """
    if not (0 <= state < params.n_states and 0 <= action < params.n_actions):
        raise IndexError(f"(state={state}, action={action}) outside the table")
    row = -np.exp(params.log_probs(temperature)[state])
    row[action] += 1.0
    return state, row / temperature


# --------------------------------------------------------------------------
# batch objective and gradient

@dataclass
class _Flat:
    states: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    adv: np.ndarray
    weight: np.ndarray
    on_policy: np.ndarray
    logp_ref: np.ndarray | None


def _flatten(batch: Sequence[TrainItem], token_mean: bool, on_policy_sources: Iterable,
             ref_logp: np.ndarray | None) -> _Flat:
    on_policy_sources = set(on_policy_sources)
    states, actions, old, adv, weight, onp = [], [], [], [], [], []
    for item in batch:
        r = item.response
        n = len(r.tokens)
        if n == 0:
            continue
        states.extend(r.states)
        actions.extend(r.tokens)
        old.extend(r.behavior_logprobs)
        a = item.advantage
        adv.extend(a if isinstance(a, (tuple, list)) else [a] * n)
        weight.extend([1.0 / n if token_mean else 1.0] * n)
        onp.extend([item.source in on_policy_sources] * n)
    s = np.asarray(states, dtype=np.intp)
    a = np.asarray(actions, dtype=np.intp)
    return _Flat(s, a, np.asarray(old, dtype=float), np.asarray(adv, dtype=float),
                 np.asarray(weight, dtype=float), np.asarray(onp, dtype=bool),
                 None if ref_logp is None else ref_logp[s, a])


def _token_mean(cfg: OptimConfig) -> bool:
    return cfg.advantage_mode.kind != DR_GRPO


def batch_objective(params: PolicyParams, batch: Sequence[TrainItem], cfg: OptimConfig,
                    temperature: float = 1.0, ref: PolicyParams | None = None,
                    norm: float | None = None) -> float:
    """Surrogate maximized by :func:`apply_update` (off-policy items only).

    Dr.GRPO sums token terms and divides by the constant ``norm`` (defaults
    to the batch size); the other modes average tokens within a response
    first. In group modes a k3 penalty against ``ref`` is subtracted when
    ``kl_coef > 0``; PPO folds KL into its rewards instead.
    """
    flat = _flatten(batch, _token_mean(cfg), (), _ref_table(ref, cfg, temperature))
    logp = params.log_probs(temperature)[flat.states, flat.actions]
    terms, _ = _clip_terms(np.exp(logp - flat.logp_old), flat.adv, cfg.clip_epsilon)
    if flat.logp_ref is not None:
        terms = terms - cfg.kl_coef * kl_penalty(logp, flat.logp_ref)
    z = norm if norm is not None else len(batch)
    return float(np.dot(flat.weight, terms) / z)


def _ref_table(ref, cfg, temperature):
    if ref is None or cfg.kl_coef == 0 or not cfg.advantage_mode.is_group:
        return None
    return ref.log_probs(temperature)


def batch_gradient(params: PolicyParams, batch: Sequence[TrainItem], cfg: OptimConfig,
                   temperature: float = 1.0, ref: PolicyParams | None = None,
                   norm: float | None = None, on_policy_sources: Iterable = ()) -> np.ndarray:
    """Analytic gradient of :func:`batch_objective` with respect to ``theta``.

    Items whose source is in ``on_policy_sources`` drop the importance ratio:
    they contribute ``A * grad log pi`` regardless of how stale they are.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    flat = _flatten(batch, _token_mean(cfg), on_policy_sources, _ref_table(ref, cfg, temperature))
    logp_table = params.log_probs(temperature)
    logp = logp_table[flat.states, flat.actions]
    ratio = np.exp(logp - flat.logp_old)
    ratio = np.where(flat.on_policy, 1.0, ratio)
    _, active = _clip_terms(ratio, flat.adv, cfg.clip_epsilon)
    coef = np.where(active | flat.on_policy, ratio * flat.adv, 0.0)
    if flat.logp_ref is not None:
        coef = coef - cfg.kl_coef * (1.0 - np.exp(flat.logp_ref - logp))
    z = norm if norm is not None else len(batch)
    coef = coef * flat.weight / z

    grad = np.zeros_like(params.theta)
    np.add.at(grad, (flat.states, flat.actions), coef)
    per_state = np.zeros(params.n_states)
    np.add.at(per_state, flat.states, coef)
    grad -= per_state[:, None] * np.exp(logp_table)
    # rows with a forced (+inf) logit are not trainable
    grad[~np.isfinite(params.theta).all(axis=1)] = 0.0
    return grad / temperature


def apply_update(params: PolicyParams, batch: Sequence[TrainItem], cfg: OptimConfig,
                 temperature: float = 1.0, ref: PolicyParams | None = None,
                 norm: float | None = None, on_policy_sources: Iterable = (),
                 critic: ValueTable | None = None) -> PolicyParams:
    """One gradient-ascent step on the clipped surrogate; returns new params.

    With a ``critic`` in PPO mode the value table also takes one squared-error
    step toward the GAE returns stored with each item.
    """
    grad = batch_gradient(params, batch, cfg, temperature, ref, norm, on_policy_sources)
    out = PolicyParams(params.theta + cfg.learning_rate * grad)
    if critic is not None and cfg.advantage_mode.kind == PPO:
        states, returns = [], []
        for item in batch:
            r = item.response
            states.extend(r.states)
            adv = np.asarray(item.advantage, dtype=float)
            returns.extend(adv + critic.values[np.asarray(r.states, dtype=np.intp)])
        critic.update(np.asarray(states, dtype=np.intp), np.asarray(returns))
    return out


def ppo_token_advantages(response: Response, critic: ValueTable, mode: AdvantageMode,
                         kl_coef: float = 0.0, logp_ref: np.ndarray | None = None) -> tuple:
    """GAE advantages for one response: terminal reward, per-token KL shaping."""
    n = len(response.tokens)
    rewards = np.zeros(n)
    if n:
        rewards[-1] = response.reward
    if kl_coef > 0 and logp_ref is not None and n:
        ref = logp_ref[np.asarray(response.states), np.asarray(response.tokens)]
        rewards -= kl_coef * kl_penalty(response.behavior_logprobs, ref)
    values = critic.values[np.asarray(response.states, dtype=np.intp)] if n else np.zeros(0)
    return tuple(gae_advantages(rewards.tolist(), values.tolist(), 0.0, mode.gamma, mode.lam))


def make_items(responses: Sequence[Response], source: Source = Source.PRIORITY) -> list:
    return [TrainItem(r, r.advantage if r.advantage is not None else 0.0, source)
            for r in responses]
