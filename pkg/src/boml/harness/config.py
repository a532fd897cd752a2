"""Flat ``section.key = value`` experiment configuration.

Example::

    # two shifted domains, Laplace posterior
    experiment.preset = desk
    experiment.method = bomla
    experiment.seeds = 0,1,2
    bomla.lambda = 100

Blank lines and ``#`` comments are ignored.  ``experiment.preset`` applies
a named set of defaults first; every other key overrides it regardless of
its position in the file.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..bomla import BomlaConfig
from ..bomvi import BomviConfig
from ..diffcore import Network
from ..episodic import DomainSpec, SyntheticShiftConfig
from ..maml import AdamConfig, EvalConfig, InnerLoopConfig

METHODS = ("bomla", "bomvi", "maml_seq", "toe", "ftml")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.key = key
        self.line = line


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _choice(*options):
    def parse(s: str) -> str:
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s

    return parse


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "experiment.preset": (_choice("desk", "desk_seqtask", "full_nathlon", "full_seqtask"), "desk"),
    "experiment.method": (_choice(*METHODS), "bomla"),
    "experiment.seeds": (_ints, (0, 1, 2)),
    "experiment.iterations": (int, 300),
    "experiment.eval_every": (int, 25),
    "experiment.eval_tasks": (int, 50),
    "experiment.meta_batch": (int, 8),
    "experiment.output": (str, "runs/default"),
    "experiment.timing": (_bool, False),
    "stream.mode": (_choice("datasets", "tasks"), "datasets"),
    "stream.seed": (int, 0),
    "stream.domains": (int, 2),
    "stream.classes": (int, 30),
    "stream.novel_classes": (int, 10),
    "stream.examples": (int, 20),
    "stream.feature_dim": (int, 16),
    "stream.informative_dims": (int, 4),
    "stream.rotation": (_choice("disjoint", "random"), "disjoint"),
    "stream.share_prototypes": (_bool, False),
    "stream.prototype_scale": (float, 1.0),
    "stream.dispersion": (float, 0.3),
    "stream.noise_scale": (float, 3.0),
    "stream.group_size": (int, 5),
    "stream.image_dirs": (_strs, ()),
    "stream.image_side": (int, 28),
    "model.hidden": (_ints, (32,)),
    "model.activation": (_choice("relu", "tanh"), "relu"),
    "task.n_way": (int, 5),
    "task.k_shot": (int, 1),
    "task.q_query": (int, 15),
    "inner.k": (int, 1),
    "inner.alpha": (float, 0.4),
    "inner.eval_k": (int, 3),
    "inner.first_order": (_bool, False),
    "outer.lr": (float, 0.003),
    "outer.decay_every": (int, 0),
    "outer.decay_factor": (float, 0.1),
    "bomla.lambda": (float, 100.0),
    "bomla.tau": (float, 0.0),
    "bomla.fisher_tasks": (int, 200),
    "bomla.mc_labels": (int, 1),
    "bomla.precision_init": (_floats, (1e-4, 1e-2)),
    "bomla.jacobian_alpha": (_bool, True),
    "bomla.empirical_fisher": (_bool, False),
    "bomla.psd_shift": (_bool, True),
    "bomvi.mc_samples": (int, 5),
    "bomvi.sigma_init": (float, math.exp(-5.0)),
    "bomvi.prior_sigma": (float, 1.0),
    "bomvi.kl_weight": (float, 1e-5),
    "bomvi.estimator": (_choice("lrt", "weights"), "lrt"),
}

ALIASES = {"lambda": "bomla.lambda", "kl_weight": "bomvi.kl_weight", "method": "experiment.method"}

PRESETS: dict[str, dict[str, str]] = {
    "desk": {},
    "desk_seqtask": {
        "stream.mode": "tasks",
        "stream.domains": "1",
        "stream.informative_dims": "8",
        "experiment.iterations": "50",
        "experiment.eval_every": "50",
        "experiment.eval_tasks": "100",
        "bomla.lambda": "1",
        "bomla.fisher_tasks": "100",
    },
    # Omniglot column of the triathlon/pentathlon tables
    "full_nathlon": {
        "experiment.iterations": "5000",
        "experiment.meta_batch": "32",
        "experiment.eval_tasks": "100",
        "experiment.eval_every": "500",
        "task.q_query": "15",
        "inner.k": "1",
        "inner.alpha": "0.4",
        "inner.eval_k": "3",
        "outer.lr": "0.001",
        "bomla.fisher_tasks": "5000",
        "bomvi.mc_samples": "20",
        "bomvi.sigma_init": repr(math.exp(-5.0)),
        "bomvi.kl_weight": "1",
    },
    # stationary-distribution sequential tasks
    "full_seqtask": {
        "stream.mode": "tasks",
        "experiment.iterations": "50",
        "experiment.meta_batch": "1",
        "experiment.eval_tasks": "100",
        "task.k_shot": "5",
        "inner.k": "5",
        "inner.alpha": "0.1",
        "inner.eval_k": "10",
        "outer.lr": "0.001",
        "bomla.lambda": "0.01",
        "bomvi.mc_samples": "5",
        "bomvi.sigma_init": repr(math.exp(-10.0)),
        "bomvi.kl_weight": "1",
    },
}


def parse_text(text: str) -> dict[str, tuple[str, int]]:
    """``key -> (raw value, line number)``."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'section.key = value'", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        key = ALIASES.get(key, key)
        if key not in SCHEMA:
            raise ConfigError("unknown key", key=key, line=lineno)
        if key in out:
            raise ConfigError("duplicate key", key=key, line=lineno)
        out[key] = (value, lineno)
    return out


def resolve(entries: dict[str, tuple[str, int]]) -> dict[str, object]:
    values = {k: default for k, (_, default) in SCHEMA.items()}
    preset_raw = entries.get("experiment.preset")
    layers = []
    if preset_raw is not None:
        preset = _convert("experiment.preset", *preset_raw)
        layers.append({k: (v, None) for k, v in PRESETS[preset].items()})
        values["experiment.preset"] = preset
    layers.append(entries)
    for layer in layers:
        for key, (raw, lineno) in layer.items():
            values[key] = _convert(key, raw, lineno)
    return values


def _convert(key: str, raw: str, lineno: int | None):
    parser = SCHEMA[key][0]
    try:
        return parser(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value {raw!r}: {exc}", key=key, line=lineno) from exc


@dataclass(frozen=True)
class StreamSpec:
    mode: str
    seed: int
    synthetic: SyntheticShiftConfig
    group_size: int
    image_dirs: tuple[str, ...]
    image_side: int


@dataclass(frozen=True)
class ExperimentConfig:
    method: str
    seeds: tuple[int, ...]
    iterations: int
    eval_every: int
    eval_tasks: int
    meta_batch: int
    output: str
    timing: bool
    stream: StreamSpec
    hidden: tuple[int, ...]
    activation: str
    n_way: int
    k_shot: int
    q_query: int
    inner: InnerLoopConfig
    eval_k: int
    adam: AdamConfig
    bomla: BomlaConfig
    bomvi: BomviConfig
    raw: tuple = field(default=(), compare=False)  # the parsed entries, for overrides

    def network(self, input_dim: int) -> Network:
        return Network.mlp([input_dim, *self.hidden, self.n_way], self.activation)

    def eval_config(self, seed: int) -> EvalConfig:
        return EvalConfig(
            n_tasks=self.eval_tasks,
            n_way=self.n_way,
            k_shot=self.k_shot,
            q_per_class=self.q_query,
            inner=InnerLoopConfig(k=self.eval_k, alpha=self.inner.alpha),
            seed=seed,
        )

    def shared_hash(self) -> str:
        """Digest of every setting the methods must share."""
        shared = {
            "inner": asdict(self.inner),
            "eval_k": self.eval_k,
            "eval_tasks": self.eval_tasks,
            "adam": asdict(self.adam),
            "meta_batch": self.meta_batch,
            "task": [self.n_way, self.k_shot, self.q_query],
            "model": [list(self.hidden), self.activation],
            "iterations": self.iterations,
        }
        return hashlib.sha256(json.dumps(shared, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, **kv: str) -> "ExperimentConfig":
        entries = dict(self.raw)
        for key, value in kv.items():
            key = ALIASES.get(key, key)
            if key not in SCHEMA:
                raise ConfigError("unknown key", key=key)
            entries[key] = (str(value), None)
        return build(entries)


def build(entries: dict[str, tuple[str, int]]) -> ExperimentConfig:
    v = resolve(entries)

    def check(cond: bool, key: str, msg: str):
        if not cond:
            raise ConfigError(msg, key=key, line=entries.get(key, (None, None))[1])

    check(len(v["experiment.seeds"]) > 0, "experiment.seeds", "need at least one seed")
    check(v["experiment.iterations"] >= 0, "experiment.iterations", "must be >= 0")
    check(v["experiment.eval_every"] >= 1, "experiment.eval_every", "must be >= 1")
    check(v["experiment.meta_batch"] >= 1, "experiment.meta_batch", "must be >= 1")
    check(len(v["bomla.precision_init"]) == 2, "bomla.precision_init", "need two values lo,hi")

    n_domains = v["stream.domains"]
    spec = DomainSpec(v["stream.prototype_scale"], v["stream.dispersion"], v["stream.noise_scale"], 0)
    synthetic = SyntheticShiftConfig(
        n_domains=n_domains,
        classes_per_domain=v["stream.classes"],
        novel_classes=v["stream.novel_classes"],
        examples_per_class=v["stream.examples"],
        feature_dim=v["stream.feature_dim"],
        informative_dims=v["stream.informative_dims"],
        rotation=v["stream.rotation"],
        share_prototypes=v["stream.share_prototypes"],
        domains=tuple(DomainSpec(spec.prototype_scale, spec.dispersion, spec.noise_scale, d) for d in range(max(n_domains, 0))),
    )
    try:
        synthetic.validate()
        inner = InnerLoopConfig(v["inner.k"], v["inner.alpha"], v["inner.first_order"])
        bomla = BomlaConfig(
            lam=v["bomla.lambda"],
            precision_init=tuple(v["bomla.precision_init"]),
            fisher_tasks=v["bomla.fisher_tasks"],
            mc_labels=v["bomla.mc_labels"],
            tau=v["bomla.tau"],
            jacobian_alpha=v["bomla.jacobian_alpha"],
            empirical_fisher=v["bomla.empirical_fisher"],
            psd_shift=v["bomla.psd_shift"],
        )
        bomvi = BomviConfig(
            mc_samples=v["bomvi.mc_samples"],
            sigma_init=v["bomvi.sigma_init"],
            prior_sigma=v["bomvi.prior_sigma"],
            kl_weight=v["bomvi.kl_weight"],
            estimator=v["bomvi.estimator"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    return ExperimentConfig(
        method=v["experiment.method"],
        seeds=tuple(v["experiment.seeds"]),
        iterations=v["experiment.iterations"],
        eval_every=v["experiment.eval_every"],
        eval_tasks=v["experiment.eval_tasks"],
        meta_batch=v["experiment.meta_batch"],
        output=v["experiment.output"],
        timing=v["experiment.timing"],
        stream=StreamSpec(
            v["stream.mode"], v["stream.seed"], synthetic, v["stream.group_size"],
            tuple(v["stream.image_dirs"]), v["stream.image_side"],
        ),
        hidden=tuple(v["model.hidden"]),
        activation=v["model.activation"],
        n_way=v["task.n_way"],
        k_shot=v["task.k_shot"],
        q_query=v["task.q_query"],
        inner=inner,
        eval_k=v["inner.eval_k"],
        adam=AdamConfig(lr=v["outer.lr"], decay_every=v["outer.decay_every"], decay_factor=v["outer.decay_factor"]),
        bomla=bomla,
        bomvi=bomvi,
        raw=tuple(sorted(entries.items())),
    )


def loads(text: str) -> ExperimentConfig:
    return build(parse_text(text))


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def dumps(cfg_or_entries) -> str:
    """Config text reproducing ``cfg`` (only the explicitly-set keys)."""
    entries = dict(cfg_or_entries.raw) if isinstance(cfg_or_entries, ExperimentConfig) else cfg_or_entries
    return "".join(f"{k} = {v}\n" for k, (v, _) in sorted(entries.items()))
