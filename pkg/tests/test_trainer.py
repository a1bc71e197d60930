import json

import numpy as np
import pytest

from rollout_recomp.config import RunConfig, load_config
from rollout_recomp.core import StepMetrics
from rollout_recomp.recomposition import comp_probability
from rollout_recomp.trainer import (
    RunReport,
    Trainer,
    compare,
    emit_metrics,
    load_responses,
    dump_responses,
    metrics_jsonl,
    read_metrics,
    sweep_alpha,
    train,
)

SMALL = dict(total_steps=12, prompts_per_step=4, group_size=6, max_tokens=16,
             eval_questions=4, eval_samples=4, final_window=3, comp_batch_size=6)


def small(**kw):
    return RunConfig(**{**SMALL, **kw})


def trajectory(cfg, steps):
    tr = Trainer(cfg)
    out = []
    for t in range(steps):
        tr.step(t)
        out.append(tr.policy.theta.copy())
    return out


class TestTrajectories:
    @pytest.mark.parametrize("env", ["pattern", "toolchain"])
    def test_alpha_one_matches_baseline(self, env):
        kw = dict(env=env, vocab_size=2, pattern_length=1, total_steps=50, slip=0.0) \
            if env == "pattern" else dict(env=env, total_steps=50)
        base = small(recomp_enabled=False, **kw)
        rr = small(recomp_enabled=True, alpha=1.0, **kw)
        for a, b in zip(trajectory(base, 50), trajectory(rr, 50)):
            np.testing.assert_array_equal(a, b)

    def test_zero_lr_keeps_policy(self):
        tr = Trainer(small(learning_rate=0.0))
        theta = tr.policy.theta.copy()
        for t in range(5):
            tr.step(t)
        np.testing.assert_array_equal(tr.policy.theta, theta)

    def test_disabled_never_buffers(self):
        rep = train(small(recomp_enabled=False))
        assert all(m.n_comp_items == 0 and m.buffer_size == 0 for m in rep.metrics)
        assert all(m.n_priority_items == 24 for m in rep.metrics)


@pytest.fixture(scope="module")
def report():
    return train(small(total_steps=20, alpha=0.5, slip=0.3, learning_rate=1.0))


class TestStepInvariants:
    def test_series_length(self, report):
        assert len(report.metrics) == 20

    def test_conservation(self, report):
        for m in report.metrics:
            assert m.n_priority_items + m.n_pushed == 4 * 6

    def test_p_comp_column(self, report):
        cfg = small(total_steps=20)
        for m in report.metrics:
            assert m.p_comp == comp_probability(m.step, cfg.schedule)

    def test_buffer_bounded(self, report):
        assert all(m.buffer_size <= 12 for m in report.metrics)
        assert any(m.did_comp_update for m in report.metrics)

    def test_summary(self, report):
        s = report.summary
        tail = report.metrics[-3:]
        assert s["final_mean_cost"] == pytest.approx(np.mean([m.mean_cost for m in tail]))
        assert set(s["pass_at_k"]) == {"1", "2", "4"}
        assert s["pass_at_k"]["1"] <= s["pass_at_k"]["4"]


class TestDeterminism:
    @pytest.mark.parametrize("env", ["pattern", "toolchain"])
    def test_same_seed_same_bytes(self, env):
        a = metrics_jsonl(train(small(env=env, seed=3)).metrics)
        b = metrics_jsonl(train(small(env=env, seed=3, workers=4)).metrics)
        assert a == b
        assert a != metrics_jsonl(train(small(env=env, seed=4)).metrics)

    def test_ppo_runs(self):
        rep = train(small(advantage_mode="ppo", kl_coef=0.01))
        assert len(rep.metrics) == 12


class TestExperiments:
    def test_identical_configs(self):
        out = compare(small(), small(), [0, 1])
        assert out["reduction_pct"]["mean"] == 0.0

    def test_env_mismatch(self):
        with pytest.raises(ValueError, match="different environments"):
            compare(small(), small(env="toolchain"), [0])

    def test_sweep_shape(self):
        rows = sweep_alpha(small(total_steps=4), [0.5, 1.0], [0])
        assert [r["alpha"] for r in rows] == [0.5, 1.0]
        with pytest.raises(ValueError):
            sweep_alpha(small(), [1.5], [0])


class TestOutput:
    def test_roundtrip(self, tmp_path):
        rep = train(small())
        paths = emit_metrics(rep, tmp_path)
        assert read_metrics(paths["metrics.jsonl"]) == rep.metrics
        header = (tmp_path / "metrics.csv").read_text().splitlines()[0].split(",")
        assert header == list(rep.metrics[0].to_dict())
        assert json.loads((tmp_path / "summary.json").read_text())["summary"] == rep.summary

    def test_empty_series(self, tmp_path):
        emit_metrics(RunReport({}, [], {}), tmp_path)
        assert (tmp_path / "metrics.jsonl").read_text() == ""
        assert read_metrics(tmp_path / "metrics.jsonl") == []

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="cannot write metrics"):
            emit_metrics(RunReport({}, [StepMetrics(0, 0, 0, 1, 0, 0, 0, False)], {}), blocker / "sub")

    def test_buffer_dump_roundtrip(self, tmp_path):
        rep = train(small(alpha=0.5, p_lower=1e-6, retain_on_skip=True, comp_batch_size=100,
                          buffer_capacity=200))
        assert rep.buffer
        dump_responses(rep.buffer, tmp_path / "buf.jsonl")
        assert load_responses(tmp_path / "buf.jsonl") == rep.buffer


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.alpha == 0.8 and cfg.p_lower == 0.2 and cfg.group_size == 12
        assert cfg.capacity == 2 * cfg.comp_batch_size

    @pytest.mark.parametrize("bad", [dict(alpha=0), dict(alpha=1.2), dict(total_steps=0),
                                     dict(unknown_key=1), dict(env="toolchain", reward_mode="exact"),
                                     dict(shaping="truncation_zero")])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            RunConfig(**bad)

    def test_load(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("seed: 4\nalpha: 0.5\n")
        cfg = load_config(p, seed=9)
        assert (cfg.seed, cfg.alpha) == (9, 0.5)
        p.write_text("optim:\n  lr: 1\n")
        with pytest.raises(ValueError, match="nested"):
            load_config(p)
