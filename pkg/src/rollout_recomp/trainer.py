"""The rollout -> score -> recompose -> update loop, plus experiment drivers."""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .core import (
    STEP_METRICS_FIELDS,
    Response,
    RolloutGroup,
    Source,
    StepMetrics,
    TrainItem,
    group_stats,
    pass_at_k,
    reduction_pct,
)
from .optim import (
    PPO,
    ValueTable,
    apply_update,
    grpo_advantages,
    ppo_token_advantages,
)
from .recomposition import ReplayBuffer, comp_probability, recompose_step
from .rewards import RewardOutcome, apply_truncation_zero, length_penalty_baseline
from .sim import (
    EVAL_STREAM,
    GATE_STREAM,
    QUESTION_STREAM,
    ANSWERED,
    SEARCH,
    STOP,
    PatternSeekEnv,
    PolicyParams,
    rollout_batch,
    stream,
)


PASS_KS = (1, 2, 4, 8, 16)


@dataclass
class RunReport:
    config: dict
    metrics: list
    summary: dict
    buffer: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "metrics": [m.to_dict() for m in self.metrics],
            "summary": self.summary,
        }


def initial_policy(cfg: RunConfig, env) -> PolicyParams:
    policy = PolicyParams.zeros(env.n_states, env.n_actions)
    if isinstance(env, PatternSeekEnv):
        policy.theta[:, env.stop] += cfg.init_stop_bias
    else:
        policy.theta[:, STOP] += cfg.init_stop_bias
        # a verbose agent keeps searching until it commits to an answer
        policy.theta[:ANSWERED, SEARCH] += cfg.init_search_bias
    return policy


def shape_group(group: RolloutGroup, cfg: RunConfig) -> RolloutGroup:
    if cfg.shaping == "none":
        return group
    out = []
    if cfg.shaping == "truncation_zero":
        for r in group:
            o = apply_truncation_zero(RewardOutcome(r.reward, r.correct), r.cost,
                                      cfg.truncation_limit)
            out.append(r.with_(reward=o.reward, correct=o.correct))
    else:
        lo = min(r.cost for r in group)
        hi = max(r.cost for r in group)
        for r in group:
            o = length_penalty_baseline(RewardOutcome(r.reward, r.correct), r.cost, lo, hi,
                                        cfg.penalty_weight)
            out.append(r.with_(reward=o.reward))
    return RolloutGroup(group.question_id, tuple(out))


def attach_advantages(group: RolloutGroup, cfg: RunConfig, critic: ValueTable | None,
                      ref_logp: np.ndarray | None) -> RolloutGroup:
    optim = cfg.optim
    mode = optim.advantage_mode
    if mode.kind == PPO:
        advs = [ppo_token_advantages(r, critic, mode, optim.kl_coef, ref_logp) for r in group]
    else:
        advs = grpo_advantages([r.reward for r in group], mode, optim.std_floor)
    return RolloutGroup(group.question_id,
                        tuple(r.with_(advantage=a) for r, a in zip(group, advs)))


def recompute_advantages(responses: Sequence[Response], cfg: RunConfig,
                         critic: ValueTable | None, ref_logp) -> list:
    """Re-derive advantages for buffered responses from what survives of each group."""
    mode = cfg.optim.advantage_mode
    if mode.kind == PPO:
        return [r.with_(advantage=ppo_token_advantages(r, critic, mode, cfg.kl_coef, ref_logp))
                for r in responses]
    by_q: dict = {}
    for r in responses:
        by_q.setdefault(r.question_id, []).append(r)
    fresh = {}
    for qid, rs in by_q.items():
        for r, a in zip(rs, grpo_advantages([r.reward for r in rs], mode, cfg.std_floor)):
            fresh[(qid, r.index, r.born_step)] = a
    return [r.with_(advantage=fresh[(r.question_id, r.index, r.born_step)]) for r in responses]


def _items(responses: Sequence[Response], source: Source) -> list:
    return [TrainItem(r, r.advantage, source) for r in responses]


class Trainer:
    """Holds policy, critic and replay buffer for one run."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.env = cfg.make_env()
        self.policy = initial_policy(cfg, self.env)
        self.ref = self.policy.copy()
        self.ref_logp = self.ref.log_probs(cfg.temperature)
        self.critic = ValueTable(self.env.n_states, cfg.critic_lr) \
            if cfg.advantage_mode == PPO else None
        self.buffer = ReplayBuffer(cfg.capacity)
        self.optim = cfg.optim
        self.sched = cfg.schedule
        # every update divides by the rollout batch size, so a response carries
        # the same weight whether it trains in a priority or compensation batch
        self.norm = float(cfg.prompts_per_step * cfg.group_size)
        self.on_policy = (Source.COMPENSATION,) if cfg.comp_on_policy_loss else ()

    def _update(self, responses: Sequence[Response], source: Source) -> None:
        if not responses:
            return
        self.policy = apply_update(
            self.policy, _items(responses, source), self.optim, self.cfg.temperature,
            self.ref, self.norm, self.on_policy, self.critic,
        )

    def step(self, t: int) -> StepMetrics:
        cfg = self.cfg
        n = cfg.prompts_per_step
        questions = self.env.sample_questions(stream(cfg.seed, QUESTION_STREAM, t), n, t * n)
        groups = rollout_batch(self.policy, questions, cfg.sampling, self.env, cfg.seed, t,
                               cfg.workers)
        groups = [attach_advantages(shape_group(g, cfg), cfg, self.critic, self.ref_logp)
                  for g in groups]
        everything = [r for g in groups for r in g]
        train_groups = groups
        if cfg.filter_zero_variance and self.optim.advantage_mode.is_group:
            train_groups = [g for g in groups if group_stats(g)[1] > 0]

        p = comp_probability(t, self.sched)
        n_comp = n_pushed = n_dropped = 0
        did_comp = False
        if cfg.recomp_enabled:
            res = recompose_step(train_groups, self.buffer, t, self.sched, cfg.comp_batch_size,
                                 stream(cfg.seed, GATE_STREAM, t), cfg.alpha,
                                 cfg.retain_on_skip)
            n_pushed, n_dropped = res.n_pushed, res.n_dropped
            self._update(res.priority, Source.PRIORITY)
            n_priority = len(res.priority)
            if res.comp is not None:
                if cfg.use_compensation:
                    comp = res.comp
                    if cfg.recompute_comp_advantages:
                        comp = recompute_advantages(comp, cfg, self.critic, self.ref_logp)
                    self._update(comp, Source.COMPENSATION)
                    n_comp, did_comp = len(comp), True
                else:
                    n_dropped += len(res.comp)
        else:
            batch = [r for g in train_groups for r in g]
            self._update(batch, Source.PRIORITY)
            n_priority = len(batch)

        return StepMetrics(
            step=t,
            mean_reward=statistics.fmean(r.reward for r in everything),
            mean_cost=statistics.fmean(r.cost for r in everything),
            p_comp=p,
            n_priority_items=n_priority,
            n_comp_items=n_comp,
            buffer_size=len(self.buffer),
            did_comp_update=did_comp,
            n_pushed=n_pushed,
            n_dropped=n_dropped,
            accuracy=statistics.fmean(float(r.correct) for r in everything),
        )

    def evaluate(self) -> dict:
        cfg = self.cfg
        questions = self.env.sample_questions(stream(cfg.seed, EVAL_STREAM, 0),
                                              cfg.eval_questions, 0)
        sampling = cfg.sampling.__class__(cfg.temperature, cfg.max_tokens, max(2, cfg.eval_samples))
        groups = rollout_batch(self.policy, questions, sampling, self.env, cfg.seed, 0,
                               cfg.workers, tag=EVAL_STREAM)
        groups = [shape_group(g, cfg) for g in groups]
        rs = [r for g in groups for r in g]
        n = len(groups[0])
        table = {}
        for k in PASS_KS:
            if k <= n:
                table[str(k)] = statistics.fmean(
                    pass_at_k(n, sum(r.correct for r in g), k) for g in groups)
        return {
            "eval_mean_cost": statistics.fmean(r.cost for r in rs),
            "eval_mean_reward": statistics.fmean(r.reward for r in rs),
            "eval_accuracy": statistics.fmean(float(r.correct) for r in rs),
            "pass_at_k": table,
        }


def train(cfg: RunConfig, on_step: Callable[[StepMetrics], None] | None = None,
          keep_trainer: bool = False):
    """Run ``cfg.total_steps`` steps and return a :class:`RunReport`.

    Two calls with the same config give identical reports.
    """
    trainer = Trainer(cfg)
    series = []
    for t in range(cfg.total_steps):
        m = trainer.step(t)
        series.append(m)
        if on_step is not None:
            on_step(m)
    tail = series[-cfg.final_window:]
    summary = {
        "final_mean_cost": statistics.fmean(m.mean_cost for m in tail),
        "final_mean_reward": statistics.fmean(m.mean_reward for m in tail),
        "final_accuracy": statistics.fmean(m.accuracy for m in tail),
        "n_comp_updates": sum(m.did_comp_update for m in series),
    }
    summary.update(trainer.evaluate())
    report = RunReport(cfg.model_dump(mode="json"), series, summary,
                       trainer.buffer.entries)
    if keep_trainer:
        return report, trainer
    return report


# --------------------------------------------------------------------------
# experiments

def _mean_std(xs: Sequence[float]) -> dict:
    xs = list(xs)
    return {"mean": statistics.fmean(xs), "std": statistics.pstdev(xs) if len(xs) > 1 else 0.0,
            "values": xs}


def compare(cfg_a: RunConfig, cfg_b: RunConfig, seeds: Sequence[int],
            metric: str = "final_mean_cost") -> dict:
    """Run both configs per seed; ``reduction_pct`` is of b relative to a."""
    if cfg_a.env_signature() != cfg_b.env_signature():
        raise ValueError("configs use different environments")
    rows = []
    for s in seeds:
        ra = train(cfg_a.with_(seed=s)).summary
        rb = train(cfg_b.with_(seed=s)).summary
        rows.append({"seed": s, "a": ra, "b": rb,
                     "reduction_pct": reduction_pct(ra[metric], rb[metric])
                     if ra[metric] > 0 else 0.0})
    out = {"seeds": list(seeds), "runs": rows}
    for arm in ("a", "b"):
        for key in ("final_mean_cost", "final_mean_reward", "eval_mean_cost", "eval_mean_reward"):
            out[f"{arm}_{key}"] = _mean_std(r[arm][key] for r in rows)
    out["reduction_pct"] = _mean_std(r["reduction_pct"] for r in rows)
    return out


def sweep_alpha(base: RunConfig, alphas: Sequence[float], seeds: Sequence[int]) -> list:
    rows = []
    for a in alphas:
        if not 0 < a <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {a}")
        runs = [train(base.with_(alpha=a, seed=s)).summary for s in seeds]
        rows.append({
            "alpha": a,
            "final_mean_cost": _mean_std(r["final_mean_cost"] for r in runs),
            "final_mean_reward": _mean_std(r["final_mean_reward"] for r in runs),
        })
    return rows


# --------------------------------------------------------------------------
# output

def metrics_jsonl(series: Sequence[StepMetrics]) -> str:
    return "".join(json.dumps(m.to_dict()) + "\n" for m in series)


def metrics_csv(series: Sequence[StepMetrics]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=STEP_METRICS_FIELDS, lineterminator="\n")
    w.writeheader()
    for m in series:
        w.writerow(m.to_dict())
    return buf.getvalue()


def emit_metrics(report: RunReport, path: str | Path) -> dict:
    """Write ``metrics.jsonl``, ``metrics.csv`` and ``summary.json`` under ``path``."""
    out = Path(path)
    files = {
        "metrics.jsonl": metrics_jsonl(report.metrics),
        "metrics.csv": metrics_csv(report.metrics),
        "summary.json": json.dumps({"config": report.config, "summary": report.summary},
                                   indent=2, sort_keys=True) + "\n",
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, text in files.items():
            (out / name).write_text(text)
    except OSError as e:
        raise OSError(f"cannot write metrics to {out}: {e}") from e
    return {name: str(out / name) for name in files}


def read_metrics(path: str | Path) -> list:
    with open(path) as f:
        return [StepMetrics.from_dict(json.loads(line)) for line in f if line.strip()]


def response_record(r: Response) -> dict:
    adv = r.advantage
    return {
        "question_id": r.question_id, "index": r.index, "born_step": r.born_step,
        "tokens": list(r.tokens), "states": list(r.states), "cost": r.cost,
        "reward": r.reward, "correct": r.correct,
        "behavior_logprobs": list(r.behavior_logprobs),
        "advantage": list(adv) if isinstance(adv, tuple) else adv,
    }


def response_from_record(d: dict) -> Response:
    adv = d.get("advantage")
    return Response(
        d["question_id"], tuple(d["tokens"]), d["cost"], d["reward"], d["correct"],
        tuple(d["behavior_logprobs"]), d.get("born_step", 0), tuple(d.get("states", ())),
        d.get("index", 0), tuple(adv) if isinstance(adv, list) else adv,
    )


def dump_responses(responses: Sequence[Response], path: str | Path) -> None:
    with open(path, "w") as f:
        for r in responses:
            f.write(json.dumps(response_record(r)) + "\n")


def load_responses(path: str | Path) -> list:
    with open(path) as f:
        return [response_from_record(json.loads(line)) for line in f if line.strip()]
