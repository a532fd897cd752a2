"""Command line: ``boml run|eval|inspect|sweep``.

Worker threads for task fan-out come from ``BOML_WORKERS`` (default 1).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .._parallel import WORKERS_ENV, default_workers
from ..bomla import LaplacePosterior
from ..bomvi import MeanFieldPosterior
from ..maml import evaluate
from . import checkpoint as ck
from .config import ConfigError, load
from .metrics import matrix
from .runner import AccessViolation, NonFiniteLossError, build_stream, run_experiment, sweep


def _print_matrices(result) -> None:
    for s in result.seeds:
        grid = matrix(s.records, s.seed)
        print(f"seed {s.seed}: end-of-phase accuracy (rows = phase, cols = eval set)")
        for p, row in enumerate(grid, start=1):
            print(f"  phase {p}: " + "  ".join(f"{a:.3f}" for a in row))


def cmd_run(args) -> int:
    cfg = load(args.config)
    out = Path(args.output) if args.output else Path(cfg.output)
    result = run_experiment(cfg, out, args.workers)
    _print_matrices(result)
    print(f"wrote {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load(args.config)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    out = Path(args.output) if args.output else Path(cfg.output)
    results = sweep(cfg, args.param, values, out, args.workers)
    for v, res in results.items():
        print(f"{args.param}={v}")
        _print_matrices(res)
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = ck.load_posterior(args.checkpoint)
    cfg = load(args.stream_config)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    stream = build_stream(cfg, seed)
    if stream.datasets[0].feature_dim != ckpt.net.layers[0].input_dim:
        print(f"error: checkpoint expects {ckpt.net.layers[0].input_dim} features, stream has "
              f"{stream.datasets[0].feature_dim}", file=sys.stderr)
        return 2
    if args.tasks is not None:
        cfg = cfg.with_overrides(**{"experiment.eval_tasks": str(args.tasks)})
    for j, src in enumerate(stream.eval_sources, start=1):
        mean, ci = evaluate(ckpt.net, ckpt.mean, src, cfg.eval_config(seed * 1000 + j), args.workers)
        print(f"eval set {j} ({src.name}): accuracy {mean:.4f} +/- {ci:.4f}")
    return 0


def cmd_inspect(args) -> int:
    c = ck.load_posterior(args.checkpoint)
    size = Path(args.checkpoint).stat().st_size
    print(f"method: {c.method}")
    print(f"datasets folded in: {c.t}")
    print(f"bytes: {size}")
    for li, (layer, w) in enumerate(zip(c.net.layers, c.mean)):
        print(f"layer {li}: {layer.input_dim} -> {layer.output_dim} ({layer.activation}), "
              f"mean |w| {np.abs(w).mean():.4g}")
    s = c.state
    if isinstance(s, LaplacePosterior):
        for li, lp in enumerate(s.precision.layers):
            print(f"layer {li} precision: {len(lp.pairs)} Kronecker pairs, diag mean {lp.diag.mean():.4g}")
    elif isinstance(s, MeanFieldPosterior):
        for li, ls in enumerate(s.log_sigma):
            v = np.exp(2 * ls)
            print(f"layer {li} variance: mean {v.mean():.4g} min {v.min():.4g} max {v.max():.4g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boml", description="Sequential meta-learning experiments.")
    p.add_argument("--workers", type=int, default=None, help=f"worker threads (default ${WORKERS_ENV} or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every seed of a config")
    r.add_argument("config")
    r.add_argument("--output", help="override experiment.output")
    r.set_defaults(fn=cmd_run)

    e = sub.add_parser("eval", help="evaluate a checkpoint's mean on a stream")
    e.add_argument("checkpoint")
    e.add_argument("stream_config")
    e.add_argument("--seed", type=int, help="stream seed (default: first config seed)")
    e.add_argument("--tasks", type=int, help="evaluation tasks per set")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("inspect", help="summarise a checkpoint")
    i.add_argument("checkpoint")
    i.set_defaults(fn=cmd_inspect)

    s = sub.add_parser("sweep", help="one run per value of a config key")
    s.add_argument("config")
    s.add_argument("--param", required=True, help="config key or alias (lambda, kl_weight, method)")
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--output", help="override experiment.output")
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers is None:
        args.workers = default_workers()
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ck.CheckpointFormatError, ck.CheckpointCompatibilityError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 3
    except (NonFiniteLossError, AccessViolation) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
