"""Comparison methods that differ from MAML only in which data they train on.

* train-on-everything (TOE): re-initialise every round and meta-train on
  all datasets seen so far;
* sequential MAML: warm start, newest dataset only;
* FTML-modified: warm start, meta-batches drawn from a growing buffer.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diffcore import InputError, Network, ParamSet
from .episodic import DatasetSource, make_rng
from .maml import AdamConfig, InnerLoopConfig, MetaBatch, meta_train, meta_value_and_grad, sample_batch

FTML_LABEL = "FTML-modified"

# stream labels used in every seed tuple below
_INIT, _CHOICE = 99, 5


@dataclass(frozen=True)
class TrainSpec:
    """Settings shared by every method in a comparison."""

    net: Network
    inner: InnerLoopConfig
    adam: AdamConfig
    iterations: int
    meta_batch: int
    n_way: int
    k_shot: int
    q_query: int
    workers: int | None = None

    def __post_init__(self):
        if self.iterations < 0 or self.meta_batch < 1:
            raise InputError("iterations must be >= 0 and meta_batch >= 1")


@dataclass(frozen=True)
class TaskBuffer:
    """Append-only record of encountered datasets (or task groups)."""

    items: tuple[DatasetSource, ...] = ()

    def __len__(self):
        return len(self.items)

    def appended(self, item: DatasetSource) -> "TaskBuffer":
        return TaskBuffer(self.items + (item,))

    def draw(self, rng: np.random.Generator) -> DatasetSource:
        if not self.items:
            raise InputError("cannot sample from an empty buffer")
        return self.items[int(rng.integers(len(self.items)))]

    @property
    def nbytes(self) -> int:
        return sum(s.nbytes for s in self.items)


Callback = Callable[[int, ParamSet, float], None]


def init_params(spec: TrainSpec, seed: int, round_: int = 1) -> ParamSet:
    return spec.net.init_params(make_rng(seed, _INIT, round_))


def train_on(
    spec: TrainSpec,
    params: ParamSet,
    pick: Callable[[int], DatasetSource],
    seed: int,
    phase: int,
    callback: Callback | None = None,
    objective: Callable[[ParamSet, MetaBatch, int], tuple[float, ParamSet]] | None = None,
) -> ParamSet:
    """Adam on ``objective`` (MAML by default) where iteration ``i`` samples
    its meta-batch from ``pick(i)``.

    Task draws are keyed on ``(seed, phase, i)`` only, so two policies that
    pick the same dataset see the same tasks.
    """
    if objective is None:
        def objective(p, batch, i):
            return meta_value_and_grad(spec.net, p, batch, spec.inner, workers=spec.workers)

    def next_batch(i):
        return i, sample_batch(pick(i), spec.meta_batch, spec.n_way, spec.k_shot, spec.q_query, (seed, phase, i))

    params, _ = meta_train(
        params, spec.iterations, next_batch, lambda p, ib: objective(p, ib[1], ib[0]), spec.adam, callback=callback
    )
    return params


def seq_maml_round(
    spec: TrainSpec,
    params: ParamSet,
    dataset: DatasetSource,
    seed: int,
    phase: int,
    callback: Callback | None = None,
) -> ParamSet:
    """Warm-started MAML on the newest dataset only."""
    return train_on(spec, params, lambda i: dataset, seed, phase, callback)


def _uniform_picker(buffer: TaskBuffer, seed: int, phase: int):
    # five-element key: never equal to a task key (seed, phase, i, j)
    return lambda i: buffer.draw(make_rng(seed, phase, i, _CHOICE, 0))


def toe_round(
    spec: TrainSpec,
    buffer: TaskBuffer,
    dataset: DatasetSource,
    seed: int,
    phase: int,
    callback: Callback | None = None,
) -> tuple[ParamSet, TaskBuffer]:
    """Fresh initialisation, then MAML over every dataset seen so far."""
    buffer = buffer.appended(dataset)
    params = init_params(spec, seed, phase)
    return train_on(spec, params, _uniform_picker(buffer, seed, phase), seed, phase, callback), buffer


def ftml_round(
    spec: TrainSpec,
    params: ParamSet,
    buffer: TaskBuffer,
    item: DatasetSource,
    seed: int,
    phase: int,
    callback: Callback | None = None,
) -> tuple[ParamSet, TaskBuffer]:
    """Warm start; each meta-iteration draws its tasks from a uniform buffer item."""
    buffer = buffer.appended(item)
    return train_on(spec, params, _uniform_picker(buffer, seed, phase), seed, phase, callback), buffer
