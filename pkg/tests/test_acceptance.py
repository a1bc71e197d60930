"""One test per acceptance criterion; each records a PASS/FAIL line that the
terminal summary prints at the end of the session."""

import math
import random
import statistics
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from rollout_recomp.config import RunConfig
from rollout_recomp.core import Response, RolloutGroup, Source, TrainItem, reduction_pct
from rollout_recomp.optim import (
    DR_GRPO,
    GRPO,
    AdvantageMode,
    OptimConfig,
    batch_gradient,
    batch_objective,
    grpo_advantages,
    ppo_clip_objective,
)
from rollout_recomp.recomposition import (
    ReplayBuffer,
    ReplayBufferError,
    ScheduleParams,
    comp_probability,
    partition,
    select_priority,
)
from rollout_recomp.sim import PolicyParams
from rollout_recomp.trainer import train

SEEDS = range(5)


def record(name, ok, detail):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok


def resp(cost, correct, index):
    return Response(0, (0,) * cost, cost, float(correct), correct, (0.0,) * cost, index=index)


# --------------------------------------------------------------------------
# exact property suites

def test_selection_oracle():
    rnd = random.Random(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        n = rnd.randint(1, 32)
        costs = [rnd.randint(0, 50) for _ in range(n)]
        flags = [rnd.random() < 0.5 for _ in range(n)]
        alpha = rnd.uniform(0.01, 1.0)
        group = RolloutGroup(0, tuple(resp(c, f, i) for i, (c, f) in enumerate(zip(costs, flags))))
        sel, rest = select_priority(partition(group), alpha)
        correct = sorted((costs[i], i) for i in range(n) if flags[i])
        wrong = sorted((-costs[i], i) for i in range(n) if not flags[i])
        want = set()
        for cls in (correct, wrong):
            if cls:
                k = max(1, int(alpha * len(cls) + 0.5))
                want |= {i for _, i in cls[:k]}
        got = {r.index for r in sel}
        mismatches += got != want or {r.index for r in rest} != set(range(n)) - want
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and dt < 5
    assert record("selection oracle", ok, f"{mismatches}/1000 mismatches in {dt:.2f}s")


def test_advantage_correctness():
    hand = [
        (grpo_advantages([1, 1, 1, 1], GRPO), [0, 0, 0, 0]),
        (grpo_advantages([1, 0, 0, 1], GRPO), [1, -1, -1, 1]),
        (grpo_advantages([1, 0, 1], DR_GRPO), [1 / 3, -2 / 3, 1 / 3]),
    ]
    hand_ok = all(np.allclose(got, want, atol=1e-12) for got, want in hand)
    rng = np.random.default_rng(5)
    worst_sum = worst_std = 0.0
    for _ in range(1000):
        r = rng.integers(0, 2, int(rng.integers(2, 33))).astype(float)
        if r.std() == 0:
            r[0] = 1 - r[0]
        a = np.array(grpo_advantages(r.tolist(), GRPO))
        worst_sum = max(worst_sum, abs(a.sum()))
        worst_std = max(worst_std, abs(a.std() - 1))
    ok = hand_ok and worst_sum < 1e-9 and worst_std < 1e-6
    assert record("advantage correctness", ok,
                  f"examples {'ok' if hand_ok else 'WRONG'}, max|sum| {worst_sum:.1e}, "
                  f"max|std-1| {worst_std:.1e}")


def test_schedule_exactness():
    T = 600
    s = ScheduleParams(0.2, T)
    want = [(0, 1.0), (T / 4, (1 + math.sqrt(2) / 2) / 2), (T / 2, 0.5), (2 * T / 3, 0.25), (T, 0.2)]
    err = max(abs(comp_probability(t, s) - p) for t, p in want)
    ps = [comp_probability(t, s) for t in range(T + 1)]
    monotone = all(a >= b for a, b in zip(ps, ps[1:]))
    ok = err < 1e-12 and monotone
    assert record("schedule exactness", ok, f"max error {err:.1e}, monotone {monotone}")


def test_gradient_fidelity():
    rng = np.random.default_rng(17)
    h = 1e-5
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(20):
        params = PolicyParams(rng.normal(size=(3, 4)))
        cfg = OptimConfig(advantage_mode=AdvantageMode((GRPO, DR_GRPO)[k % 2]))
        lp = params.log_probs()
        batch = []
        for i in range(6):
            n = int(rng.integers(1, 6))
            s = rng.integers(0, 3, n)
            a = rng.integers(0, 4, n)
            old = np.minimum(lp[s, a] + rng.normal(0, 0.1, n), 0)
            r = Response(0, tuple(a.tolist()), n, 0.0, False, tuple(old.tolist()),
                         states=tuple(s.tolist()), index=i)
            batch.append(TrainItem(r, float(rng.normal()), Source.PRIORITY))
        g = batch_gradient(params, batch, cfg)
        fd = np.zeros_like(g)
        for idx in np.ndindex(g.shape):
            up, dn = params.theta.copy(), params.theta.copy()
            up[idx] += h
            dn[idx] -= h
            fd[idx] = (batch_objective(PolicyParams(up), batch, cfg)
                       - batch_objective(PolicyParams(dn), batch, cfg)) / (2 * h)
        worst = max(worst, np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12))
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and dt < 10
    assert record("gradient fidelity", ok, f"max relative error {worst:.1e} in {dt:.2f}s")


def test_clip_semantics():
    o1, m1 = ppo_clip_objective([-0.5, -0.5], [-0.5, -0.5], [2.0, -1.0], 0.2)
    o2, m2 = ppo_clip_objective([math.log(1.5)], [0.0], [1.0], 0.2)
    o3, m3 = ppo_clip_objective([math.log(0.5)], [0.0], [-1.0], 0.2)
    examples = (o1 == 0.5 and m1.all() and abs(o2 - 1.2) < 1e-15 and not m2[0]
                and abs(o3 + 0.8) < 1e-15 and not m3[0])
    rng = np.random.default_rng(9)
    bad = 0
    for _ in range(10_000):
        rho, adv, eps = math.exp(rng.uniform(-1.5, 1.5)), rng.uniform(-2, 2), rng.uniform(0.05, 0.5)
        _, active = ppo_clip_objective([math.log(rho)], [0.0], [adv], eps)
        if (adv > 0 and rho > 1 + eps) or (adv < 0 and rho < 1 - eps):
            bad += bool(active[0])
    ok = examples and bad == 0
    assert record("clip semantics", ok, f"examples {'ok' if examples else 'WRONG'}, "
                  f"{bad} active tokens outside the clip range in 10000")


def test_buffer_fifo():
    rnd = random.Random(99)
    cap = 40
    buf, model, nxt, violations = ReplayBuffer(cap), [], 0, 0
    for _ in range(10_000):
        n = rnd.randint(0, 9)
        if rnd.random() < 0.55:
            try:
                buf.push([resp(0, True, nxt + i) for i in range(n)])
                model += list(range(nxt, nxt + n))
                nxt += n
            except ReplayBufferError:
                violations += len(model) + n <= cap
        else:
            try:
                got = [r.index for r in buf.pop_oldest(n)]
                violations += got != model[:n]
                model = model[n:]
            except ReplayBufferError:
                violations += n <= len(model)
        violations += len(buf) > cap or [r.index for r in buf] != model
    assert record("buffer FIFO", violations == 0, f"{violations} violations in 10000 ops")


def test_reduction_arithmetic():
    a, b = reduction_pct(997, 721), reduction_pct(6.2, 3.3)
    ok = abs(a - 27.7) <= 0.05 and abs(b - 46.8) <= 0.05
    assert record("reduction arithmetic", ok, f"{a:.2f}% and {b:.2f}%")


# --------------------------------------------------------------------------
# desk-scale trends

def _arm(cfg: RunConfig) -> dict:
    t0 = time.perf_counter()
    runs = [train(cfg.with_(seed=s)).summary for s in SEEDS]
    return {
        "cost": statistics.fmean(r["final_mean_cost"] for r in runs),
        "reward": statistics.fmean(r["final_mean_reward"] for r in runs),
        "seconds": time.perf_counter() - t0,
    }


@pytest.fixture(scope="module")
def pattern_arms():
    base = RunConfig(env="pattern")
    return {
        "baseline": _arm(base.with_(recomp_enabled=False)),
        "recomp": _arm(base),
        "no_comp": _arm(base.with_(use_compensation=False)),
    }


def test_zero_rl_analogue(pattern_arms):
    b, r = pattern_arms["baseline"], pattern_arms["recomp"]
    ratio = r["cost"] / b["cost"]
    gap = abs(b["reward"] - r["reward"])
    secs = b["seconds"] + r["seconds"]
    ok = ratio <= 0.75 and gap <= 0.05 and secs < 300
    assert record("zero-RL analogue (PatternSeek)", ok,
                  f"cost {b['cost']:.2f} -> {r['cost']:.2f} (ratio {ratio:.3f}), "
                  f"reward {b['reward']:.3f} vs {r['reward']:.3f} (gap {gap:.3f}), {secs:.0f}s")


def test_agentic_analogue():
    base = RunConfig(env="toolchain")
    b = _arm(base.with_(recomp_enabled=False))
    r = _arm(base)
    ratio = r["cost"] / b["cost"]
    gap = abs(b["reward"] - r["reward"])
    secs = b["seconds"] + r["seconds"]
    ok = ratio <= 0.70 and gap <= 0.05 and secs < 300
    assert record("agentic analogue (ToolChain)", ok,
                  f"tool calls {b['cost']:.2f} -> {r['cost']:.2f} (ratio {ratio:.3f}), "
                  f"F1 {b['reward']:.3f} vs {r['reward']:.3f} (gap {gap:.3f}), {secs:.0f}s")


@pytest.mark.xfail(strict=True, reason="desk-scale ablation gap stays near 0.02; "
                   "see the README section on known gaps")
def test_compensation_ablation(pattern_arms):
    full, abl = pattern_arms["recomp"], pattern_arms["no_comp"]
    drop = full["reward"] - abl["reward"]
    ok = drop >= 0.05
    record("compensation ablation", ok,
           f"reward {full['reward']:.3f} with vs {abl['reward']:.3f} without (drop {drop:.3f}, "
           f"need >= 0.05)")
    assert ok


def test_alpha_sweep_trend(pattern_arms):
    base = RunConfig(env="pattern")
    costs = {0.8: pattern_arms["recomp"]["cost"]}
    for a in (0.5, 0.7, 0.9):
        costs[a] = _arm(base.with_(alpha=a))["cost"]
    series = [costs[a] for a in (0.5, 0.7, 0.8, 0.9)]
    ok = all(x <= y for x, y in zip(series, series[1:]))
    assert record("alpha-sweep trend", ok,
                  ", ".join(f"a={a}: {costs[a]:.2f}" for a in (0.5, 0.7, 0.8, 0.9)))


@pytest.mark.parametrize("workers", [1, 4])
def test_determinism(tmp_path, workers):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(f"workers: {workers}\n")
    outs = []
    for name in ("first", "second"):
        subprocess.run([sys.executable, "-m", "rollout_recomp", "run", str(cfg), "--seed", "11",
                        "--out", str(tmp_path / name)], check=True, capture_output=True)
        outs.append((tmp_path / name / "metrics.jsonl").read_bytes())
    ok = outs[0] == outs[1] and len(outs[0]) > 0
    assert record(f"determinism (workers={workers})", ok,
                  f"metrics.jsonl {'byte-identical' if ok else 'DIFFERS'} ({len(outs[0])} bytes)")
