"""The sequential meta-training loop and everything it writes to disk.

For each seed and each arriving dataset (or task group) the runner trains
with the configured method, evaluates every evaluation source on novel-class
tasks at a fixed cadence, folds the result into the carried-forward state
(posterior, parameters or buffer) and checkpoints it.
"""
from __future__ import annotations

import json
import threading
import time
from collections import Counter
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import baselines as bl
from ..bomla import bomla_value_and_grad, fit_precision, init_posterior, set_mean
from ..bomvi import MeanFieldPosterior, bomvi_value_and_grad, covariance_stats
from ..diffcore import ParamSet
from ..episodic import (
    DatasetSource, TaskStream, load_image_dir, make_domain, make_rng, make_synthetic_stream, split_sequential_tasks,
)
from ..maml import evaluate
from . import checkpoint as ck
from .config import ExperimentConfig, dumps
from .metrics import MetricRecord, emit_metrics, end_of_phase, forgetting_text, svg_lines

ONLINE_METHODS = ("bomla", "bomvi", "maml_seq")
_FISHER_KEY = 2**31 - 1  # third seed element no iteration index reaches


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN or infinite loss; a dump was written."""


class AccessViolation(RuntimeError):
    """A dataset's base split was read outside its own phase."""


# ------------------------------------------------------------- access logging

class AccessLog:
    """Counts example-store reads per (store, class, phase)."""

    def __init__(self):
        self.phase = 0
        self.reads: Counter = Counter()
        self._lock = threading.Lock()

    def hit(self, store: int, cls) -> None:
        with self._lock:
            self.reads[(store, cls, self.phase)] += 1

    def violations(self, owners: dict) -> list[tuple]:
        """Reads of a base class (owned by dataset ``owners[(store, cls)]``)
        during any other phase."""
        return sorted(
            (store, cls, phase, n)
            for (store, cls, phase), n in self.reads.items()
            if (store, cls) in owners and owners[(store, cls)] != phase
        )


class _LoggedStore(Mapping):
    def __init__(self, inner: Mapping, log: AccessLog, store: int):
        self._inner, self._log, self._store = inner, log, store

    def __getitem__(self, cls):
        self._log.hit(self._store, cls)
        return self._inner[cls]

    def __iter__(self):
        return iter(self._inner)

    def __len__(self):
        return len(self._inner)

    def __contains__(self, cls):
        return cls in self._inner


def instrument(stream: TaskStream, log: AccessLog) -> tuple[TaskStream, dict]:
    """Route every example read through ``log``; returns the wrapped stream
    and the base-class ownership map ``(store, class) -> phase``."""
    wrapped: dict[int, _LoggedStore] = {}

    def wrap(src: DatasetSource) -> DatasetSource:
        key = id(src.examples)
        if key not in wrapped:
            wrapped[key] = _LoggedStore(src.examples, log, len(wrapped))
        return replace(src, examples=wrapped[key])

    datasets = tuple(wrap(s) for s in stream.datasets)
    evals = tuple(wrap(s) for s in stream.eval_sources)
    owners = {}
    for phase, s in enumerate(datasets, start=1):
        for c in s.base_classes:
            owners[(s.examples._store, c)] = phase
    return TaskStream(stream.mode, datasets, evals), owners


# ------------------------------------------------------------------- streams

def build_stream(cfg: ExperimentConfig, seed: int) -> TaskStream:
    """Data depends on ``stream.seed + seed`` so each run seed sees its own draw."""
    s = cfg.stream
    data_seed = s.seed + seed
    if s.image_dirs:
        sources = tuple(load_image_dir(d, s.image_side) for d in s.image_dirs)
        if s.mode == "tasks":
            return split_sequential_tasks(sources[0], s.group_size, data_seed)
        return TaskStream("datasets", sources, sources)
    if s.mode == "tasks":
        return split_sequential_tasks(make_domain(s.synthetic, 0, data_seed), s.group_size, data_seed)
    return make_synthetic_stream(s.synthetic, data_seed)


# -------------------------------------------------------------------- result

@dataclass
class SeedResult:
    seed: int
    records: list = field(default_factory=list)
    covariance: list = field(default_factory=list)
    accounting: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    wall_s: float = 0.0


@dataclass
class RunResult:
    cfg: ExperimentConfig
    out_dir: Path | None
    seeds: list

    @property
    def records(self) -> list:
        return [r for s in self.seeds for r in s.records]

    def end_of_phase(self):
        return end_of_phase(self.records)


# ---------------------------------------------------------------------- loop

def run_seed(cfg: ExperimentConfig, seed: int, out_dir: Path | None = None, workers: int | None = None) -> SeedResult:
    log = AccessLog()
    raw = build_stream(cfg, seed)
    input_dim = raw.datasets[0].feature_dim
    stream, owners = instrument(raw, log)
    net = cfg.network(input_dim)
    spec = bl.TrainSpec(
        net, cfg.inner, cfg.adam, cfg.iterations, cfg.meta_batch, cfg.n_way, cfg.k_shot, cfg.q_query, workers
    )
    res = SeedResult(seed)
    t_start = time.perf_counter()
    method = cfg.method

    params = bl.init_params(spec, seed, 1)
    buffer = bl.TaskBuffer()
    posterior = init_posterior(params, cfg.bomla, make_rng(seed, 98)) if method == "bomla" else None
    phi = prior = None
    if method == "bomvi":
        phi = MeanFieldPosterior.init(params, cfg.bomvi.sigma_init)
        prior = MeanFieldPosterior.standard(net, cfg.bomvi.prior_sigma)

    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    for phase, dataset in enumerate(stream.datasets, start=1):
        log.phase = phase
        last = {"i": -1, "loss": float("nan")}

        def record(step: int, eval_params: ParamSet, loss: float):
            wall = round((time.perf_counter() - t_start) * 1000.0, 3) if cfg.timing else 0.0
            for j, src in enumerate(stream.eval_sources, start=1):
                mean, ci = evaluate(net, eval_params, src, cfg.eval_config(seed * 1000 + j), workers)
                res.records.append(MetricRecord(seed, method, phase, step, j, mean, ci, float(loss), wall))

        def due(i: int) -> bool:
            return (i + 1) % cfg.eval_every == 0 or i + 1 == cfg.iterations

        def callback(i, p, loss):
            last["i"], last["loss"] = i, loss
            if due(i):
                if method == "bomvi":
                    q = MeanFieldPosterior.unpack(p)
                    record(i + 1, q.mu, loss)
                    for row in covariance_stats(q):
                        res.covariance.append({"seed": seed, "phase": phase, "step": i + 1, **row})
                else:
                    record(i + 1, p, loss)

        try:
            if method == "maml_seq":
                params = bl.seq_maml_round(spec, params, dataset, seed, phase, callback)
            elif method == "toe":
                params, buffer = bl.toe_round(spec, buffer, dataset, seed, phase, callback)
            elif method == "ftml":
                params, buffer = bl.ftml_round(spec, params, buffer, dataset, seed, phase, callback)
            elif method == "bomla":
                post = posterior

                def objective(p, batch, i):
                    return bomla_value_and_grad(net, p, batch, post, cfg.inner, workers)

                params = bl.train_on(spec, params, lambda i: dataset, seed, phase, callback, objective)
                posterior = fit_precision(
                    net, set_mean(posterior, params), dataset, cfg.inner, cfg.bomla,
                    cfg.n_way, cfg.k_shot, cfg.q_query, (seed, phase, _FISHER_KEY), workers,
                )
            elif method == "bomvi":
                prev = prior

                def objective(packed, batch, i):
                    return bomvi_value_and_grad(
                        net, MeanFieldPosterior.unpack(packed), prev, batch, cfg.inner, cfg.bomvi, (seed, phase, i), workers
                    )

                packed = bl.train_on(spec, phi.packed(), lambda i: dataset, seed, phase, callback, objective)
                phi = MeanFieldPosterior.unpack(packed)
                prior = phi
                params = phi.mu
        except FloatingPointError as exc:
            _dump_nan(out_dir, cfg, seed, phase, last, exc)
            raise NonFiniteLossError(f"seed {seed} phase {phase}: {exc}") from exc

        if cfg.iterations == 0:
            record(0, params, float("nan"))

        state = posterior if method == "bomla" else phi if method == "bomvi" else params
        blob = ck.encode(method, net, state, phase)
        if ckpt_dir is not None:
            ck.save_posterior(ckpt_dir / f"seed{seed}_phase{phase}.ckpt", method, net, state, phase)
        res.accounting.append({
            "seed": seed,
            "method": method,
            "phase": phase,
            "state_bytes": len(blob),
            "buffer_bytes": buffer.nbytes if method in ("toe", "ftml") else 0,
            "buffer_items": len(buffer),
            "kron_pairs": posterior.precision.n_pairs if method == "bomla" else 0,
        })

    res.violations = log.violations(owners)
    res.wall_s = time.perf_counter() - t_start
    if method in ONLINE_METHODS and res.violations:
        raise AccessViolation(f"seed {seed}: out-of-phase base reads {res.violations[:5]}")
    return res


def _dump_nan(out_dir, cfg, seed, phase, last, exc):
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    dump = {
        "error": str(exc),
        "method": cfg.method,
        "seed": seed,
        "phase": phase,
        "failed_iteration": last["i"] + 1,
        "previous_loss": last["loss"],
        "config": dumps(cfg),
    }
    (out_dir / f"nan_dump_seed{seed}.json").write_text(json.dumps(dump, indent=2, default=str))


# -------------------------------------------------------------------- output

def _csv(rows: list[dict], cols: list[str]) -> str:
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols))
    return "\n".join(lines) + "\n"


def write_outputs(result: RunResult, out_dir: Path) -> None:
    cfg = result.cfg
    recs = result.records
    emit_metrics(recs, out_dir / "metrics.csv")
    (out_dir / "forgetting.csv").write_text(forgetting_text(recs))
    acct = [row for s in result.seeds for row in s.accounting]
    (out_dir / "accounting.csv").write_text(
        _csv(acct, ["seed", "method", "phase", "state_bytes", "buffer_bytes", "buffer_items", "kron_pairs"])
    )
    if cfg.method == "bomvi":
        cov = sorted((row for s in result.seeds for row in s.covariance), key=lambda r: (r["seed"], r["phase"], r["step"], r["layer"]))
        (out_dir / "covariance.csv").write_text(
            _csv(cov, ["seed", "phase", "step", "layer", "var_mean", "var_min", "var_max"])
        )
    plots = out_dir / "plots"
    plots.mkdir(exist_ok=True)
    n_eval = max((r.eval_dataset for r in recs), default=0)
    label = bl.FTML_LABEL if cfg.method == "ftml" else cfg.method
    for j in range(1, n_eval + 1):
        series = {}
        for s in result.seeds:
            pts = sorted(
                ((r.phase - 1) * cfg.iterations + r.step, r.acc_mean)
                for r in s.records if r.eval_dataset == j
            )
            series[f"seed {s.seed}"] = pts
        n_phases = max((r.phase for r in recs), default=1)
        svg = svg_lines(
            series,
            f"{label}: novel-task accuracy on evaluation set {j}",
            vlines=[p * cfg.iterations for p in range(1, n_phases)],
        )
        (plots / f"eval_dataset{j}.svg").write_text(svg)


def run_experiment(
    cfg: ExperimentConfig,
    out_dir=None,
    workers: int | None = None,
    write: bool = True,
) -> RunResult:
    """Every seed of ``cfg``; files go to ``out_dir`` (default ``cfg.output``)."""
    out = Path(out_dir if out_dir is not None else cfg.output) if write else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dumps(cfg))
    seeds = []
    log_lines = [{"event": "start", "method": cfg.method, "shared_config_hash": cfg.shared_hash()}]
    for seed in cfg.seeds:
        r = run_seed(cfg, seed, out, workers)
        seeds.append(r)
        for row in r.accounting:
            log_lines.append({"event": "accounting", **row})
        log_lines.append({
            "event": "access_check",
            "seed": seed,
            "out_of_phase_reads": len(r.violations),
            "enforced": cfg.method in ONLINE_METHODS,
        })
        log_lines.append({"event": "seed_done", "seed": seed, "wall_s": round(r.wall_s, 3)})
    result = RunResult(cfg, out, seeds)
    if out is not None:
        write_outputs(result, out)
        (out / "run.log").write_text("".join(json.dumps(line, sort_keys=True) + "\n" for line in log_lines))
    return result


def sweep(cfg: ExperimentConfig, param: str, values, out_dir=None, workers=None) -> dict:
    """One sub-run per value in ``<out>/<param>=<value>``."""
    base = Path(out_dir if out_dir is not None else cfg.output)
    out = {}
    for v in values:
        sub = cfg.with_overrides(**{param: str(v)})
        out[v] = run_experiment(sub, base / f"{param}={v}", workers)
    return out
