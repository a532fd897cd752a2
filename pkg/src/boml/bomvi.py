"""Mean-field variational posterior over meta-parameters.

The inner loop takes its gradients at the posterior mean rather than at each
weight sample, so an adapted sample is the sample shifted by the same offset
as the adapted mean.  The query term can then be estimated with
pre-activation (local reparameterisation) sampling around the adapted mean.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from ._parallel import ordered_map
from .diffcore import DimensionError, InputError, Network, ParamSet, Var
from .episodic import EpisodicTask, make_rng
from .maml import InnerLoopConfig, MetaBatch, adapt_vars, inner_adapt


class DomainError(ValueError):
    """A standard deviation is not strictly positive and finite."""


@dataclass(frozen=True)
class MeanFieldPosterior:
    mu: ParamSet
    log_sigma: ParamSet

    def __post_init__(self):
        if [w.shape for w in self.mu] != [w.shape for w in self.log_sigma]:
            raise DimensionError("mu and log_sigma shapes differ")

    @classmethod
    def init(cls, params: ParamSet, sigma: float) -> "MeanFieldPosterior":
        if not sigma > 0:
            raise DomainError("sigma must be > 0")
        return cls(params, ParamSet(tuple(np.full(w.shape, np.log(sigma)) for w in params)))

    @classmethod
    def standard(cls, net: Network, sigma: float = 1.0) -> "MeanFieldPosterior":
        """Zero-mean prior with a shared standard deviation."""
        zeros = ParamSet(tuple(np.zeros(s) for s in net.shapes))
        return cls.init(zeros, sigma)

    def sigma(self) -> ParamSet:
        return ParamSet(tuple(np.exp(w) for w in self.log_sigma))

    def packed(self) -> ParamSet:
        """``mu`` and ``log_sigma`` as one ParamSet for the optimizer."""
        return ParamSet(self.mu.weights + self.log_sigma.weights)

    @classmethod
    def unpack(cls, packed: ParamSet) -> "MeanFieldPosterior":
        n = len(packed) // 2
        return cls(ParamSet(packed.weights[:n]), ParamSet(packed.weights[n:]))

    def sample(self, rng: np.random.Generator) -> ParamSet:
        return self.mu.map(lambda m, ls: m + np.exp(ls) * rng.standard_normal(m.shape), self.log_sigma)


@dataclass(frozen=True)
class BomviConfig:
    mc_samples: int = 5
    sigma_init: float = float(np.exp(-5.0))
    prior_sigma: float = 1.0  # first dataset's prior: N(0, prior_sigma^2)
    kl_weight: float = 1.0
    estimator: str = "lrt"  # or "weights": explicit weight samples shared by both data terms

    def __post_init__(self):
        if self.mc_samples < 1:
            raise InputError("mc_samples must be >= 1")
        if not self.sigma_init > 0 or not self.prior_sigma > 0:
            raise DomainError("sigma_init and prior_sigma must be > 0")
        if self.estimator not in ("lrt", "weights"):
            raise InputError(f"unknown estimator {self.estimator!r}")


def _check_sigma(ls: np.ndarray) -> None:
    s = np.exp(ls)
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise DomainError("standard deviations must be finite and > 0")


def kl_mean_field(q: MeanFieldPosterior, p: MeanFieldPosterior) -> float:
    """Closed-form ``KL(q || p)`` between diagonal Gaussians."""
    if [w.shape for w in q.mu] != [w.shape for w in p.mu]:
        raise DimensionError("posteriors have different shapes")
    total = 0.0
    for mq, lq, mp, lp in zip(q.mu, q.log_sigma, p.mu, p.log_sigma):
        _check_sigma(lq)
        _check_sigma(lp)
        total += float(np.sum(lp - lq + (np.exp(2 * lq) + (mq - mp) ** 2) / (2 * np.exp(2 * lp)) - 0.5))
    return total


def kl_vars(mu_vs: list[Var], ls_vs: list[Var], p: MeanFieldPosterior) -> Var:
    """Tape version of :func:`kl_mean_field`, differentiable in ``q``."""
    terms = []
    for mq, lq, mp, lp in zip(mu_vs, ls_vs, p.mu, p.log_sigma):
        inv_var_p = np.exp(-2 * lp)
        d = mq - mp
        quad = dc.mul(dc.add(dc.exp(dc.scale(lq, 2.0)), dc.mul(d, d)), 0.5 * inv_var_p)
        terms.append(dc.total(dc.add(dc.sub(quad, lq), lp - 0.5)))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def modified_inner_adapt(
    net: Network,
    theta_sample: ParamSet,
    mu: ParamSet,
    support,
    cfg: InnerLoopConfig,
) -> ParamSet:
    """Shift a weight sample by the adaptation step computed at the mean."""
    adapted_mu = inner_adapt(net, mu, support, cfg)
    return theta_sample + (adapted_mu - mu)


def _noise(rng: np.random.Generator, net: Network, n: int) -> list[np.ndarray]:
    return [rng.standard_normal((n, layer.output_dim)) for layer in net.layers]


def lrt_forward_vars(net: Network, mu_vs, ls_vs, inputs, noise: list[np.ndarray]) -> Var:
    """Logits with every pre-activation drawn from its Gaussian marginal."""
    a = dc._as_inputs(net, inputs)
    for layer, mu, ls, eps in zip(net.layers, mu_vs, ls_vs, noise):
        a_aug = dc.append_ones(a)
        mean = dc.matmul(a_aug, dc.transpose(dc.const(mu)))
        var_w = dc.exp(dc.scale(dc.const(ls), 2.0))
        var = dc.matmul(dc.mul(a_aug, a_aug), dc.transpose(var_w))
        h = dc.add(mean, dc.mul(dc.sqrt(var), eps))
        a = dc.ACTIVATIONS[layer.activation](h)
    return a


def lrt_forward(net: Network, phi: MeanFieldPosterior, inputs, seed) -> np.ndarray:
    """Sampled logits for a batch; deterministic given ``seed``."""
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(*np.atleast_1d(seed))
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    with dc.no_grad():
        out = lrt_forward_vars(net, [Var(w) for w in phi.mu], [Var(w) for w in phi.log_sigma], x, _noise(rng, net, x.shape[0]))
    return out.value


def _tile(x: np.ndarray, r: int) -> np.ndarray:
    return np.tile(x, (r,) + (1,) * (x.ndim - 1))


def task_terms(
    net: Network,
    mu_vs: list[Var],
    ls_vs: list[Var],
    task: EpisodicTask,
    inner: InnerLoopConfig,
    cfg: BomviConfig,
    rng: np.random.Generator,
) -> Var:
    """Monte-Carlo estimate of query NLL after adaptation plus support NLL."""
    r = cfg.mc_samples
    mu_adapted = adapt_vars(net, mu_vs, task.support_x, task.support_y, inner, create_graph=not inner.first_order)
    if cfg.estimator == "lrt":
        qx, qy = _tile(task.query_x, r), _tile(task.query_y, r)
        sx, sy = _tile(task.support_x, r), _tile(task.support_y, r)
        f1 = dc.nll(lrt_forward_vars(net, mu_adapted, ls_vs, qx, _noise(rng, net, len(qy))), qy)
        f2 = dc.nll(lrt_forward_vars(net, mu_vs, ls_vs, sx, _noise(rng, net, len(sy))), sy)
        return f1 + f2
    shift = [dc.sub(ma, m) for ma, m in zip(mu_adapted, mu_vs)]
    total = None
    for _ in range(r):
        theta = [dc.add(m, dc.mul(dc.exp(ls), rng.standard_normal(m.shape))) for m, ls in zip(mu_vs, ls_vs)]
        adapted = [dc.add(t, s) for t, s in zip(theta, shift)]
        term = dc.nll(dc.forward(net, adapted, task.query_x), task.query_y)
        term = term + dc.nll(dc.forward(net, theta, task.support_x), task.support_y)
        total = term if total is None else total + term
    return total / r


def _task_value_and_grad(net, phi, task, inner, cfg, rng):
    mu_vs, ls_vs = phi.mu.as_vars(), phi.log_sigma.as_vars()
    loss = task_terms(net, mu_vs, ls_vs, task, inner, cfg, rng)
    gs = dc.backward(loss, mu_vs + ls_vs)
    return float(loss.value), [g.value for g in gs]


def bomvi_value_and_grad(
    net: Network,
    phi: MeanFieldPosterior,
    phi_prev: MeanFieldPosterior,
    batch: MetaBatch,
    inner: InnerLoopConfig,
    cfg: BomviConfig,
    seed,
    workers: int | None = None,
) -> tuple[float, ParamSet]:
    """Objective value and gradient with respect to ``(mu, log_sigma)``.

    The gradient is packed like :meth:`MeanFieldPosterior.packed`.  Each
    task's noise comes from ``(seed, task index)`` so the estimate is a
    deterministic function of ``phi`` and ``seed``.
    """
    if len(batch) < 1:
        raise InputError("a meta-batch needs at least one task")
    for ls in phi.log_sigma:
        _check_sigma(ls)
    seed = tuple(np.atleast_1d(seed))
    results = ordered_map(
        lambda it: _task_value_and_grad(net, phi, it[1], inner, cfg, make_rng(*seed, 10, it[0])),
        list(enumerate(batch)),
        workers,
    )
    m = len(batch)
    n = 2 * len(phi.mu)
    data = sum(r[0] for r in results) / m
    grads = [sum(r[1][i] for r in results) / m for i in range(n)]
    mu_vs, ls_vs = phi.mu.as_vars(), phi.log_sigma.as_vars()
    kl = kl_vars(mu_vs, ls_vs, phi_prev)
    kgs = dc.backward(kl, mu_vs + ls_vs)
    w = cfg.kl_weight
    grads = [g + w * kg.value for g, kg in zip(grads, kgs)]
    return data + w * float(kl.value), ParamSet(tuple(grads))


def bomvi_loss(
    net: Network,
    phi: MeanFieldPosterior,
    phi_prev: MeanFieldPosterior,
    batch: MetaBatch,
    inner: InnerLoopConfig,
    cfg: BomviConfig,
    seed,
) -> float:
    return bomvi_value_and_grad(net, phi, phi_prev, batch, inner, cfg, seed)[0]


def bomvi_loss_vars(net, mu_vs, ls_vs, phi_prev, batch, inner, cfg, seed) -> Var:
    """Tape version of :func:`bomvi_loss` over caller-owned Vars."""
    seed = tuple(np.atleast_1d(seed))
    total = None
    for j, task in enumerate(batch):
        term = task_terms(net, mu_vs, ls_vs, task, inner, cfg, make_rng(*seed, 10, j))
        total = term if total is None else total + term
    return total / len(batch) + dc.scale(kl_vars(mu_vs, ls_vs, phi_prev), cfg.kl_weight)


def covariance_stats(phi: MeanFieldPosterior) -> list[dict]:
    """Per-layer mean/min/max of the variances."""
    out = []
    for li, ls in enumerate(phi.log_sigma):
        v = np.exp(2 * ls)
        out.append({"layer": li, "var_mean": float(v.mean()), "var_min": float(v.min()), "var_max": float(v.max())})
    return out
