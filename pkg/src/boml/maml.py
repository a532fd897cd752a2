"""Inner-loop adaptation, the MAML objective, Adam and episodic evaluation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from ._parallel import ordered_map
from .diffcore import InputError, Network, ParamSet, Var
from .episodic import DatasetSource, EpisodicTask, make_rng, sample_task


@dataclass(frozen=True)
class InnerLoopConfig:
    k: int = 1
    alpha: float = 0.4
    first_order: bool = False

    def __post_init__(self):
        if self.k < 0:
            raise InputError("inner step count k must be >= 0")
        if self.alpha <= 0:
            raise InputError("inner learning rate alpha must be > 0")


MetaBatch = Sequence[EpisodicTask]


def _check_batch(batch: MetaBatch) -> None:
    if len(batch) < 1:
        raise InputError("a meta-batch needs at least one task")


def support_loss_fn(net: Network, x, y) -> Callable[[list[Var]], Var]:
    return lambda vs: dc.nll(dc.forward(net, vs, x), y)


def adapt_vars(net: Network, vs: list[Var], x, y, cfg: InnerLoopConfig, create_graph: bool = True) -> list[Var]:
    """``k`` SGD steps on the support NLL, kept on the tape."""
    if len(y) == 0:
        raise InputError("empty support set")
    return dc.sgd_steps(support_loss_fn(net, x, y), cfg.k, cfg.alpha, create_graph)(vs)


def inner_adapt(net: Network, params: ParamSet, support, cfg: InnerLoopConfig) -> ParamSet:
    """Parameters after ``k`` full-batch SGD steps on the support set.

    ``support`` is an :class:`EpisodicTask` or an ``(x, y)`` pair.
    """
    x, y = (support.support_x, support.support_y) if isinstance(support, EpisodicTask) else support
    if len(y) == 0:
        raise InputError("empty support set")
    params.check(net)
    loss = support_loss_fn(net, x, y)
    for _ in range(cfg.k):
        params = params - dc.grad(loss, params).scaled(cfg.alpha)
    return params


def task_objective(
    net: Network,
    vs: list[Var],
    task: EpisodicTask,
    cfg: InnerLoopConfig,
    support_term: bool = False,
) -> Var:
    """Query NLL after adaptation, optionally plus the pre-adaptation support NLL."""
    adapted = adapt_vars(net, vs, task.support_x, task.support_y, cfg, create_graph=not cfg.first_order)
    loss = dc.nll(dc.forward(net, adapted, task.query_x), task.query_y)
    if support_term:
        loss = loss + dc.nll(dc.forward(net, vs, task.support_x), task.support_y)
    return loss


def _task_value_and_grad(net, params, task, cfg, support_term):
    vs = params.as_vars()
    loss = task_objective(net, vs, task, cfg, support_term)
    gs = dc.backward(loss, vs)
    return float(loss.value), [g.value for g in gs]


def meta_value_and_grad(
    net: Network,
    params: ParamSet,
    batch: MetaBatch,
    cfg: InnerLoopConfig,
    support_term: bool = False,
    workers: int | None = None,
) -> tuple[float, ParamSet]:
    """Mean task objective over the meta-batch and its meta-gradient.

    Each task gets its own tape; the reduction runs in task order.
    """
    _check_batch(batch)
    params.check(net)
    results = ordered_map(lambda t: _task_value_and_grad(net, params, t, cfg, support_term), batch, workers)
    m = len(batch)
    loss = sum(r[0] for r in results) / m
    grads = [sum(r[1][li] for r in results) / m for li in range(len(params))]
    return loss, ParamSet(tuple(grads))


def maml_loss(net: Network, params: ParamSet, batch: MetaBatch, cfg: InnerLoopConfig) -> float:
    _check_batch(batch)
    total = 0.0
    for task in batch:
        adapted = inner_adapt(net, params, task, cfg)
        total += dc.nll(dc.forward(net, adapted, task.query_x), task.query_y)
    return total / len(batch)


def maml_loss_vars(net: Network, vs: list[Var], batch: MetaBatch, cfg: InnerLoopConfig) -> Var:
    """Tape version of :func:`maml_loss`, differentiable in ``vs``."""
    _check_batch(batch)
    terms = [task_objective(net, vs, t, cfg) for t in batch]
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out / len(batch)


# ------------------------------------------------------------------ optimizer

@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_every: int = 0  # 0 disables the step decay
    decay_factor: float = 0.1

    def lr_at(self, step: int) -> float:
        if self.decay_every <= 0:
            return self.lr
        return self.lr * self.decay_factor ** (step // self.decay_every)


@dataclass(frozen=True)
class AdamState:
    m: ParamSet
    v: ParamSet
    t: int = 0

    @classmethod
    def init(cls, params: ParamSet) -> "AdamState":
        return cls(ParamSet.zeros_like(params), ParamSet.zeros_like(params), 0)


def adam_update(params: ParamSet, grads: ParamSet, state: AdamState, cfg: AdamConfig) -> tuple[ParamSet, AdamState]:
    lr = cfg.lr_at(state.t)
    t = state.t + 1
    m = state.m.map(lambda m_, g: cfg.beta1 * m_ + (1 - cfg.beta1) * g, grads)
    v = state.v.map(lambda v_, g: cfg.beta2 * v_ + (1 - cfg.beta2) * g * g, grads)
    c1, c2 = 1 - cfg.beta1 ** t, 1 - cfg.beta2 ** t
    new = params.map(lambda p, m_, v_: p - lr * (m_ / c1) / (np.sqrt(v_ / c2) + cfg.eps), m, v)
    return new, AdamState(m, v, t)


Objective = Callable[[ParamSet, MetaBatch], tuple[float, ParamSet]]


def meta_step(
    net: Network,
    params: ParamSet,
    batch: MetaBatch,
    cfg: InnerLoopConfig,
    state: AdamState,
    adam: AdamConfig = AdamConfig(),
    objective: Objective | None = None,
) -> tuple[ParamSet, AdamState, float]:
    """One Adam update on ``objective`` (the MAML loss by default)."""
    if objective is None:
        loss, g = meta_value_and_grad(net, params, batch, cfg)
    else:
        loss, g = objective(params, batch)
    if [w.shape for w in state.m] != [w.shape for w in params]:
        raise dc.DimensionError("optimizer state does not match parameter shapes")
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")
    new, state = adam_update(params, g, state, adam)
    return new, state, loss


# ----------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class EvalConfig:
    n_tasks: int = 100
    n_way: int = 5
    k_shot: int = 1
    q_per_class: int = 15
    inner: InnerLoopConfig = InnerLoopConfig(k=3, alpha=0.4)
    seed: int = 0


def _eval_task(net, params, src, cfg: EvalConfig, i: int) -> float:
    task = sample_task(src, "novel", cfg.n_way, cfg.k_shot, cfg.q_per_class, make_rng(cfg.seed, 7, i))
    adapted = inner_adapt(net, params, task, cfg.inner)
    return dc.accuracy(dc.forward(net, adapted, task.query_x), task.query_y)


def evaluate(
    net: Network,
    params: ParamSet,
    src: DatasetSource,
    cfg: EvalConfig = EvalConfig(),
    workers: int | None = None,
) -> tuple[float, float]:
    """Mean query accuracy on novel tasks and its 95% half-width."""
    if not src.novel_classes:
        raise InputError(f"{src.name} has no novel classes")
    accs = np.array(ordered_map(lambda i: _eval_task(net, params, src, cfg, i), range(cfg.n_tasks), workers))
    half = 1.96 * accs.std(ddof=1) / np.sqrt(len(accs)) if len(accs) > 1 else 0.0
    return float(accs.mean()), float(half)


# ------------------------------------------------------------- training loop

def sample_batch(src: DatasetSource, m: int, n_way: int, k_shot: int, q_per_class: int, seed: tuple) -> list[EpisodicTask]:
    return [sample_task(src, "base", n_way, k_shot, q_per_class, make_rng(*seed, j)) for j in range(m)]


def meta_train(
    params: ParamSet,
    n_iters: int,
    next_batch: Callable[[int], MetaBatch],
    objective: Objective,
    adam: AdamConfig = AdamConfig(),
    state: AdamState | None = None,
    callback: Callable[[int, ParamSet, float], None] | None = None,
) -> tuple[ParamSet, AdamState]:
    """Run ``n_iters`` Adam steps; ``callback(i, params, loss)`` after each."""
    state = AdamState.init(params) if state is None else state
    for i in range(n_iters):
        batch = next_batch(i)
        loss, g = objective(params, batch)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss} at iteration {i}")
        params, state = adam_update(params, g, state, adam)
        if callback is not None:
            callback(i, params, loss)
    return params, state
