"""Laplace-approximation posterior over meta-parameters.

The precision of each layer is a diagonal prior plus a list of weighted
Kronecker pairs ``w * (left kron right)``, ``left`` acting on the augmented
layer input and ``right`` on the layer output.  Every completed dataset
appends four pairs per layer: the expansion of the Fisher sandwiched by the
one-step inner-loop Jacobian, with the meta-batch average pushed into the
factors.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, InputError, LayerFactors, Network, ParamSet, Var
from .episodic import CapacityError, EpisodicTask, make_rng
from .maml import InnerLoopConfig, MetaBatch, inner_adapt, meta_value_and_grad, maml_loss

MAX_DENSE_FACTOR = 64


@dataclass(frozen=True)
class BomlaConfig:
    lam: float = 100.0
    precision_init: tuple[float, float] = (1e-4, 1e-2)
    fisher_tasks: int = 200
    mc_labels: int = 1
    tau: float = 0.0
    jacobian_alpha: bool = True
    empirical_fisher: bool = False
    psd_shift: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise InputError("lambda must be >= 0")
        if self.tau < 0:
            raise InputError("tau must be >= 0")
        if self.fisher_tasks < 1:
            raise InputError("fisher_tasks must be >= 1")
        if self.mc_labels < 1:
            raise InputError("mc_labels must be >= 1")


@dataclass(frozen=True)
class KronPair:
    weight: float
    left: np.ndarray
    right: np.ndarray

    def dense(self) -> np.ndarray:
        return self.weight * np.kron(self.left, self.right)


@dataclass(frozen=True)
class LayerPrecision:
    diag: np.ndarray  # same shape as the layer weight
    pairs: tuple[KronPair, ...] = ()

    def dense(self) -> np.ndarray:
        out = np.diag(self.diag.ravel(order="F"))
        for p in self.pairs:
            out = out + p.dense()
        return out


@dataclass(frozen=True)
class KroneckerPrecision:
    layers: tuple[LayerPrecision, ...]

    @property
    def n_pairs(self) -> int:
        return sum(len(layer.pairs) for layer in self.layers)

    def dense_blocks(self) -> list[np.ndarray]:
        return [layer.dense() for layer in self.layers]

    def dense(self) -> np.ndarray:
        from scipy.linalg import block_diag

        return block_diag(*self.dense_blocks())


@dataclass(frozen=True)
class LaplacePosterior:
    mean: ParamSet
    precision: KroneckerPrecision
    t: int = 0

    def __post_init__(self):
        shapes = [w.shape for w in self.mean]
        pshapes = [layer.diag.shape for layer in self.precision.layers]
        if shapes != pshapes:
            raise DimensionError(f"mean shapes {shapes} do not match precision {pshapes}")


def init_posterior(params: ParamSet, cfg: BomlaConfig, rng: np.random.Generator) -> LaplacePosterior:
    """Zero-step posterior: mean at ``params``, diagonal precision drawn uniformly."""
    lo, hi = cfg.precision_init
    layers = tuple(LayerPrecision(rng.uniform(lo, hi, size=w.shape)) for w in params)
    return LaplacePosterior(params, KroneckerPrecision(layers), 0)


def zero_posterior(params: ParamSet) -> LaplacePosterior:
    return LaplacePosterior(params, KroneckerPrecision(tuple(LayerPrecision(np.zeros_like(w)) for w in params)))


def set_mean(posterior: LaplacePosterior, params: ParamSet) -> LaplacePosterior:
    if [w.shape for w in params] != [w.shape for w in posterior.mean]:
        raise DimensionError("new mean does not match the posterior's layer shapes")
    return replace(posterior, mean=ParamSet(tuple(w.copy() for w in params)))


# -------------------------------------------------------------------- penalty

def quad_penalty(params, posterior: LaplacePosterior):
    """``0.5 (theta - mu)^T Lambda (theta - mu)`` without forming Kronecker products.

    Each pair contributes ``w * <D, right @ D @ left^T>`` with ``D`` the
    displacement of the layer weight.  Accepts a ParamSet (returns a float)
    or a list of Vars (returns a Var).
    """
    layers = posterior.precision.layers
    if len(params) != len(layers):
        raise DimensionError(f"{len(params)} layers vs {len(layers)} in the posterior")
    if isinstance(params, ParamSet):
        out = 0.0
        for w, mu, prec in zip(params, posterior.mean, layers):
            if w.shape != mu.shape:
                raise DimensionError(f"shape {w.shape} vs {mu.shape}")
            d = w - mu
            out += float(np.sum(prec.diag * d * d))
            for p in prec.pairs:
                out += p.weight * float(np.sum(d * (p.right @ d @ p.left.T)))
        return 0.5 * out
    terms = []
    for w, mu, prec in zip(params, posterior.mean, layers):
        if w.shape != mu.shape:
            raise DimensionError(f"shape {w.shape} vs {mu.shape}")
        d = w - mu
        terms.append(dc.total(dc.mul(dc.mul(d, prec.diag), d)))
        for p in prec.pairs:
            rdl = dc.matmul(dc.matmul(Var(p.right), d), Var(p.left.T))
            terms.append(dc.scale(dc.total(dc.mul(d, rdl)), p.weight))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return dc.scale(out, 0.5)


def penalty_grad(params: ParamSet, posterior: LaplacePosterior) -> ParamSet:
    """``Lambda (theta - mu)`` layer by layer."""
    out = []
    for w, mu, prec in zip(params, posterior.mean, posterior.precision.layers):
        d = w - mu
        g = prec.diag * d
        for p in prec.pairs:
            g = g + 0.5 * p.weight * (p.right @ d @ p.left.T + p.right.T @ d @ p.left)
        out.append(g)
    return ParamSet(tuple(out))


def bomla_loss(net: Network, params: ParamSet, batch: MetaBatch, posterior: LaplacePosterior, cfg: InnerLoopConfig) -> float:
    """MAML query loss + pre-adaptation support loss + quadratic penalty."""
    support = sum(dc.nll(dc.forward(net, params, t.support_x), t.support_y) for t in batch) / len(batch)
    return maml_loss(net, params, batch, cfg) + support + quad_penalty(params, posterior)


def bomla_value_and_grad(
    net: Network,
    params: ParamSet,
    batch: MetaBatch,
    posterior: LaplacePosterior,
    cfg: InnerLoopConfig,
    workers: int | None = None,
) -> tuple[float, ParamSet]:
    loss, g = meta_value_and_grad(net, params, batch, cfg, support_term=True, workers=workers)
    return loss + quad_penalty(params, posterior), g + penalty_grad(params, posterior)


# --------------------------------------------------------------------- fisher

def fisher_label_sampler(net: Network, params: ParamSet, inputs, mc_labels: int, rng: np.random.Generator) -> np.ndarray:
    """``(n, mc_labels)`` labels drawn from the model's predictive distribution."""
    if mc_labels < 1:
        raise InputError("mc_labels must be >= 1")
    logits = dc.forward(net, params, inputs)
    z = logits - logits.max(axis=1, keepdims=True)
    prob = np.exp(z)
    prob /= prob.sum(axis=1, keepdims=True)
    cdf = np.cumsum(prob, axis=1)
    u = rng.random((prob.shape[0], mc_labels))
    labels = np.stack([np.searchsorted(cdf[i], u[i], side="right") for i in range(prob.shape[0])])
    return np.minimum(labels, prob.shape[1] - 1)


@dataclass(frozen=True)
class TaskFactors:
    """Inner-curvature factors (support set, pre-adaptation) and outer
    factors (query set, adapted parameters) of one task."""

    inner: list[LayerFactors]
    outer: list[LayerFactors]


def task_factors(
    net: Network,
    params: ParamSet,
    task: EpisodicTask,
    inner_cfg: InnerLoopConfig,
    cfg: BomlaConfig,
    rng: np.random.Generator,
) -> TaskFactors:
    if cfg.empirical_fisher:
        ys, yq = task.support_y, task.query_y
        adapted = inner_adapt(net, params, task, inner_cfg)
    else:
        ys = fisher_label_sampler(net, params, task.support_x, cfg.mc_labels, rng)
        adapted = inner_adapt(net, params, task, inner_cfg)
        yq = fisher_label_sampler(net, adapted, task.query_x, cfg.mc_labels, rng)
    return TaskFactors(
        dc.capture_factors(net, params, task.support_x, ys),
        dc.capture_factors(net, adapted, task.query_x, yq),
    )


def adjusted_block(A, G, At, Gt, alpha: float = 1.0) -> np.ndarray:
    """Dense ``(I - alpha A kron G)(At kron Gt)(I - alpha A kron G)^T``."""
    A, G, At, Gt = (np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in (A, G, At, Gt))
    if max(A.shape[0], G.shape[0]) > MAX_DENSE_FACTOR:
        raise CapacityError(
            f"factor dims {A.shape[0]}x{G.shape[0]} exceed {MAX_DENSE_FACTOR}; use averaged_adjusted_fisher"
        )
    jac = np.eye(A.shape[0] * G.shape[0]) - alpha * np.kron(A, G)
    return jac @ np.kron(At, Gt) @ jac.T


def _alpha(inner_cfg: InnerLoopConfig, cfg: BomlaConfig) -> float:
    return inner_cfg.alpha if cfg.jacobian_alpha else 1.0


def task_adjusted_fisher(
    net: Network,
    params: ParamSet,
    task: EpisodicTask,
    inner_cfg: InnerLoopConfig,
    cfg: BomlaConfig,
    rng: np.random.Generator | None = None,
    factors: TaskFactors | None = None,
) -> list[np.ndarray]:
    """Exact per-layer sandwich blocks for one task (densified)."""
    if factors is None:
        factors = task_factors(net, params, task, inner_cfg, cfg, rng if rng is not None else make_rng(0))
    a = _alpha(inner_cfg, cfg)
    return [
        adjusted_block(fi.A, fi.G, fo.A, fo.G, a)
        for fi, fo in zip(factors.inner, factors.outer)
    ]


def four_term_pairs(factors: Sequence[TaskFactors], alpha: float) -> list[tuple[KronPair, ...]]:
    """Per-layer ``(+, -, -, +)`` Kronecker pairs with task-averaged factors."""
    if not factors:
        raise InputError("need at least one task")
    out = []
    for li in range(len(factors[0].inner)):
        acc = None
        for tf in factors:
            A, G = alpha * tf.inner[li].A, tf.inner[li].G
            At, Gt = tf.outer[li].A, tf.outer[li].G
            AAt = A @ At
            GGt = G @ Gt
            terms = (At, Gt, AAt, GGt, At @ A.T, Gt @ G.T, AAt @ A.T, GGt @ G.T)
            if acc is None:
                acc = [t.copy() for t in terms]
            else:
                for s, t in zip(acc, terms):
                    s += t
        m = len(factors)
        acc = [s / m for s in acc]
        out.append((
            KronPair(1.0, acc[0], acc[1]),
            KronPair(-1.0, acc[2], acc[3]),
            KronPair(-1.0, acc[4], acc[5]),
            KronPair(1.0, acc[6], acc[7]),
        ))
    return out


def averaged_adjusted_fisher(
    net: Network,
    params: ParamSet,
    tasks: Sequence[EpisodicTask],
    inner_cfg: InnerLoopConfig,
    cfg: BomlaConfig,
    seed=0,
    workers: int | None = None,
) -> list[tuple[KronPair, ...]]:
    """Four Kronecker pairs per layer approximating the task-averaged
    adjusted Fisher, each composite factor averaged before pairing."""
    from ._parallel import ordered_map

    if not tasks:
        raise InputError("need at least one task")
    factors = ordered_map(
        lambda it: task_factors(net, params, it[1], inner_cfg, cfg, make_rng(*np.atleast_1d(seed), 8, it[0])),
        list(enumerate(tasks)),
        workers,
    )
    return four_term_pairs(factors, _alpha(inner_cfg, cfg))


def densify_pairs(pairs: Sequence[KronPair]) -> np.ndarray:
    out = pairs[0].dense()
    for p in pairs[1:]:
        out = out + p.dense()
    return out


def update_precision(
    posterior: LaplacePosterior,
    fisher_pairs: Sequence[Sequence[KronPair]],
    cfg: BomlaConfig,
) -> LaplacePosterior:
    """``Lambda <- lam * H + Lambda`` with ``H`` given as Kronecker pairs.

    The diagonal prior absorbs ``tau`` plus, with ``psd_shift``, whatever
    shift makes the densified increment positive semi-definite.
    """
    layers = posterior.precision.layers
    if len(fisher_pairs) != len(layers):
        raise DimensionError(f"{len(fisher_pairs)} fisher layers vs {len(layers)}")
    new_layers = []
    for prec, pairs in zip(layers, fisher_pairs):
        out_dim, in_aug = prec.diag.shape
        for p in pairs:
            if p.left.shape != (in_aug, in_aug) or p.right.shape != (out_dim, out_dim):
                raise DimensionError(
                    f"pair factors {p.left.shape}/{p.right.shape} do not fit layer {prec.diag.shape}"
                )
        shift = 0.0
        added: tuple[KronPair, ...] = ()
        if cfg.lam > 0 and pairs:
            added = tuple(KronPair(cfg.lam * p.weight, p.left, p.right) for p in pairs)
            if cfg.psd_shift:
                block = densify_pairs(added)
                min_eig = float(np.linalg.eigvalsh(0.5 * (block + block.T))[0])
                shift = max(0.0, -min_eig)
        new_layers.append(LayerPrecision(prec.diag + cfg.tau + shift, prec.pairs + added))
    return replace(posterior, precision=KroneckerPrecision(tuple(new_layers)), t=posterior.t + 1)


def fit_precision(
    net: Network,
    posterior: LaplacePosterior,
    src,
    inner_cfg: InnerLoopConfig,
    cfg: BomlaConfig,
    n_way: int,
    k_shot: int,
    q_per_class: int,
    seed: tuple,
    workers: int | None = None,
) -> LaplacePosterior:
    """Sample ``fisher_tasks`` base tasks at the current mean and fold the
    resulting curvature into the precision."""
    from .episodic import sample_task

    tasks = [
        sample_task(src, "base", n_way, k_shot, q_per_class, make_rng(*seed, 9, i))
        for i in range(cfg.fisher_tasks)
    ]
    pairs = averaged_adjusted_fisher(net, posterior.mean, tasks, inner_cfg, cfg, seed=seed, workers=workers)
    return update_precision(posterior, pairs, cfg)
