"""Command-line client.

Every subcommand builds a service request and hands it to a backend: the
in-process one by default, or a running server with ``--server URL``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .service import (
    CompareRequest,
    LocalBackend,
    RemoteBackend,
    RunRequest,
    SweepRequest,
    VerifyRequest,
)
from .trainer import emit_metrics

log = logging.getLogger("rollout_recomp")


def read_config(path: str) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise SystemExit(f"cannot read config {path}: {e}")
    data = json.loads(text) if p.suffix == ".json" else (yaml.safe_load(text) or {})
    if not isinstance(data, dict):
        raise SystemExit(f"{path}: expected a flat key-value document")
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise SystemExit(f"{path}: nested sections are not supported ({', '.join(nested)})")
    return data


def _backend(args):
    return RemoteBackend(args.server) if args.server else LocalBackend()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def cmd_run(args) -> int:
    resp = _backend(args).run(RunRequest(config=read_config(args.config), seed=args.seed))
    if args.out:
        for name, path in emit_metrics(resp.report(), args.out).items():
            log.info("wrote %s", path)
    s = resp.summary
    print(f"final cost {s['final_mean_cost']:.3f}  reward {s['final_mean_reward']:.4f}  "
          f"eval cost {s['eval_mean_cost']:.3f}  eval reward {s['eval_mean_reward']:.4f}  "
          f"comp updates {s['n_comp_updates']}")
    return 0


def cmd_compare(args) -> int:
    req = CompareRequest(config_a=read_config(args.config_a), config_b=read_config(args.config_b),
                         seeds=args.seeds, metric=args.metric)
    out = _backend(args).compare(req)
    if args.json:
        print(_dump(out))
        return 0
    print(f"{'':8}{'cost':>20}{'reward':>20}")
    for arm, path in (("a", args.config_a), ("b", args.config_b)):
        c, r = out[f"{arm}_final_mean_cost"], out[f"{arm}_final_mean_reward"]
        print(f"{arm:8}{c['mean']:>12.3f} ± {c['std']:<6.3f}{r['mean']:>12.4f} ± {r['std']:<6.4f}"
              f"  {path}")
    red = out["reduction_pct"]
    print(f"reduction of b vs a ({args.metric}): {red['mean']:.1f}% ± {red['std']:.1f}")
    return 0


def cmd_sweep(args) -> int:
    req = SweepRequest(config=read_config(args.config), alphas=args.alphas, seeds=args.seeds)
    rows = _backend(args).sweep(req).rows
    if args.json:
        print(_dump(rows))
        return 0
    print(f"{'alpha':>6}{'cost':>20}{'reward':>20}")
    for row in rows:
        c, r = row["final_mean_cost"], row["final_mean_reward"]
        print(f"{row['alpha']:>6.2f}{c['mean']:>12.3f} ± {c['std']:<6.3f}"
              f"{r['mean']:>12.4f} ± {r['std']:<6.4f}")
    return 0


def cmd_verify(args) -> int:
    resp = _backend(args).verify(VerifyRequest(checks=args.checks))
    for c in resp.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<12} {c.detail}  ({c.seconds:.2f}s)")
    return 0 if resp.passed else 1


def cmd_dump_buffer(args) -> int:
    req = RunRequest(config=read_config(args.config), seed=args.seed, include_buffer=True)
    records = _backend(args).run(req).buffer or []
    text = "".join(json.dumps(r) + "\n" for r in records)
    if args.out:
        Path(args.out).write_text(text)
        log.info("wrote %d buffered responses to %s", len(records), args.out)
    else:
        sys.stdout.write(text)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("rollout_recomp.service:app", host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rollout-recomp")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--server", metavar="URL", help="send requests to a running service")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one config")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="directory for metrics.jsonl, metrics.csv, summary.json")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="run two configs over several seeds")
    c.add_argument("config_a")
    c.add_argument("config_b")
    c.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    c.add_argument("--metric", default="final_mean_cost")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep-alpha", help="final cost and reward per selection ratio")
    s.add_argument("config")
    s.add_argument("--alphas", type=float, nargs="+", default=[0.5, 0.7, 0.8, 0.9, 1.0])
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="run the built-in property checks")
    v.add_argument("--checks", nargs="+")
    v.set_defaults(func=cmd_verify)

    d = sub.add_parser("dump-buffer", help="train and print the final replay buffer as JSONL")
    d.add_argument("config")
    d.add_argument("--seed", type=int)
    d.add_argument("--out", help="file to write instead of stdout")
    d.set_defaults(func=cmd_dump_buffer)

    sv = sub.add_parser("serve", help="start the HTTP service")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8000)
    sv.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
