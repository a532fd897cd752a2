import logging

import numpy as np
import pytest

from boml import diffcore as dc
from boml.bomla import (
    BomlaConfig, KronPair, KroneckerPrecision, LaplacePosterior, LayerPrecision, adjusted_block,
    averaged_adjusted_fisher, bomla_loss, bomla_value_and_grad, densify_pairs, fisher_label_sampler,
    init_posterior, penalty_grad, quad_penalty, set_mean, task_adjusted_fisher, task_factors,
    update_precision, zero_posterior,
)
from boml.diffcore import DimensionError, Layer, Network, ParamSet
from boml.episodic import CapacityError, make_rng
from boml.maml import InnerLoopConfig, maml_loss, meta_value_and_grad
from conftest import central_diff, random_net, rel_err, toy_batch, toy_source

log = logging.getLogger(__name__)

# frozen from tests/oracles/freeze_values.py
PENALTY_FIXED = 0.84695
SCALAR_FISHER = 0.27


def vecf(w):
    return w.ravel(order="F")


def random_posterior(rng, params, n_pairs=3):
    layers = []
    for w in params:
        o, i = w.shape
        pairs = []
        for _ in range(n_pairs):
            L, R = rng.normal(size=(i, i)), rng.normal(size=(o, o))
            pairs.append(KronPair(float(rng.normal()), L, R))
        layers.append(LayerPrecision(rng.uniform(0, 1, w.shape), tuple(pairs)))
    mean = params.map(lambda w: w + rng.normal(size=w.shape))
    return LaplacePosterior(mean, KroneckerPrecision(tuple(layers)))


def test_kron_vec_identity(rng):
    for _ in range(20):
        o, i = rng.integers(1, 7, size=2)
        A, G, X = rng.normal(size=(i, i)), rng.normal(size=(o, o)), rng.normal(size=(o, i))
        assert np.max(np.abs(np.kron(A, G) @ vecf(X) - vecf(G @ X @ A.T))) < 1e-12


def test_penalty_zero_and_identity(rng):
    net, params = random_net(rng)
    post = random_posterior(rng, params)
    assert quad_penalty(post.mean, post) == 0.0
    w = np.zeros((2, 3))
    d = rng.normal(size=(2, 3))
    d /= np.linalg.norm(d)
    post = LaplacePosterior(ParamSet((w,)), KroneckerPrecision((LayerPrecision(np.zeros((2, 3)), (KronPair(1.0, np.eye(3), np.eye(2)),)),)))
    assert quad_penalty(ParamSet((d,)), post) == pytest.approx(0.5, abs=1e-15)


def test_penalty_frozen_instance():
    D = np.array([[0.3, -0.2, 0.5], [0.1, 0.4, -0.6]])
    diag = np.array([[0.01, 0.02, 0.03], [0.04, 0.05, 0.06]])
    pairs = (
        KronPair(2.0, np.array([[1.0, 0.2, 0.0], [0.2, 2.0, 0.1], [0.0, 0.1, 0.5]]), np.array([[1.5, -0.3], [-0.3, 0.7]])),
        KronPair(-0.5, np.array([[0.4, 0.0, 0.1], [0.0, 0.3, 0.0], [0.1, 0.0, 0.2]]), np.array([[0.6, 0.1], [0.1, 0.2]])),
    )
    post = LaplacePosterior(ParamSet((np.zeros((2, 3)),)), KroneckerPrecision((LayerPrecision(diag, pairs),)))
    assert quad_penalty(ParamSet((D,)), post) == pytest.approx(PENALTY_FIXED, abs=1e-12)


def test_penalty_matches_dense_oracle(rng):
    for _ in range(20):
        net, params = random_net(rng, tuple(rng.integers(1, 5, size=3)))
        post = random_posterior(rng, params)
        delta = np.concatenate([vecf(w - m) for w, m in zip(params, post.mean)])
        want = 0.5 * delta @ post.precision.dense() @ delta
        assert abs(quad_penalty(params, post) - want) <= 1e-10 * max(1.0, abs(want))


def test_penalty_tape_and_gradient(rng):
    net, params = random_net(rng)
    post = random_posterior(rng, params)
    tape = quad_penalty(params.as_vars(), post)
    assert tape.value == pytest.approx(quad_penalty(params, post), rel=1e-13)
    g = penalty_grad(params, post).flatten()
    fd = central_diff(lambda v: quad_penalty(ParamSet.unflatten(net, v), post), params.flatten())
    assert rel_err(g, fd) < 1e-6


def test_penalty_shape_mismatch(rng):
    net, params = random_net(rng)
    post = random_posterior(rng, params)
    with pytest.raises(DimensionError):
        quad_penalty(ParamSet((params[0],)), post)
    with pytest.raises(DimensionError):
        quad_penalty(ParamSet((params[0], params[0])), post)


def test_bomla_loss_reductions(rng):
    src = toy_source(rng)
    net, params = random_net(rng, (4, 6, 3))
    batch = toy_batch(rng, src, m=3)
    cfg = InnerLoopConfig()
    support = np.mean([dc.nll(dc.forward(net, params, t.support_x), t.support_y) for t in batch])
    assert bomla_loss(net, params, batch, zero_posterior(params), cfg) == pytest.approx(
        maml_loss(net, params, batch, cfg) + support, abs=1e-14
    )
    post = set_mean(random_posterior(rng, params), params)
    assert bomla_loss(net, params, batch, post, cfg) == pytest.approx(maml_loss(net, params, batch, cfg) + support, abs=1e-14)


@pytest.mark.parametrize("k", [1, 2])
def test_bomla_gradient_finite_differences(rng, k):
    src = toy_source(rng)
    net, params = random_net(rng, (4, 5, 3))
    batch = toy_batch(rng, src, m=2)
    post = random_posterior(rng, params)
    cfg = InnerLoopConfig(k, 0.3)
    loss, g = bomla_value_and_grad(net, params, batch, post, cfg)
    assert loss == pytest.approx(bomla_loss(net, params, batch, post, cfg), rel=1e-12)
    fd = central_diff(lambda v: bomla_loss(net, ParamSet.unflatten(net, v), batch, post, cfg), params.flatten())
    assert rel_err(g.flatten(), fd) <= 1e-4


def test_adjusted_block_cases(rng):
    At, Gt = rng.normal(size=(3, 3)), rng.normal(size=(2, 2))
    At, Gt = At @ At.T, Gt @ Gt.T
    assert np.allclose(adjusted_block(np.zeros((3, 3)), np.zeros((2, 2)), At, Gt), np.kron(At, Gt), atol=0)
    assert adjusted_block([[2.0]], [[0.5]], [[3.0]], [[0.25]], alpha=0.4)[0, 0] == pytest.approx(SCALAR_FISHER, abs=1e-15)
    with pytest.raises(CapacityError):
        adjusted_block(np.eye(65), np.eye(2), np.eye(65), np.eye(2))


def test_task_fisher_symmetric_psd(rng):
    src = toy_source(rng)
    net, params = random_net(rng, (4, 5, 3))
    (task,) = toy_batch(rng, src, m=1)
    for block in task_adjusted_fisher(net, params, task, InnerLoopConfig(), BomlaConfig(), make_rng(1)):
        assert np.max(np.abs(block - block.T)) < 1e-8 * max(1.0, np.abs(block).max())
        assert np.linalg.eigvalsh(0.5 * (block + block.T))[0] >= -1e-8


def test_four_term_single_task_equals_sandwich(rng):
    src = toy_source(rng)
    net, params = random_net(rng, (4, 5, 3))
    (task,) = toy_batch(rng, src, m=1)
    cfg, inner = BomlaConfig(), InnerLoopConfig(2, 0.3)
    pairs = averaged_adjusted_fisher(net, params, [task], inner, cfg, seed=4)
    f = task_factors(net, params, task, inner, cfg, make_rng(4, 8, 0))
    exact = task_adjusted_fisher(net, params, task, inner, cfg, factors=f)
    for layer_pairs, block in zip(pairs, exact):
        assert len(layer_pairs) == 4 and [p.weight for p in layer_pairs] == [1.0, -1.0, -1.0, 1.0]
        assert np.max(np.abs(densify_pairs(layer_pairs) - block)) <= 1e-10 * max(1.0, np.abs(block).max())


def test_four_term_identical_tasks(rng):
    src = toy_source(rng)
    net, params = random_net(rng, (4, 5, 3))
    (task,) = toy_batch(rng, src, m=1)
    cfg = BomlaConfig(empirical_fisher=True)
    one = averaged_adjusted_fisher(net, params, [task], InnerLoopConfig(), cfg)
    many = averaged_adjusted_fisher(net, params, [task] * 5, InnerLoopConfig(), cfg)
    for a, b in zip(one, many):
        assert np.max(np.abs(densify_pairs(a) - densify_pairs(b))) < 1e-12


def test_four_term_m8_residual_and_damping(rng):
    src = toy_source(rng)
    net, params = random_net(rng, (4, 5, 3))
    tasks = toy_batch(rng, src, m=8, seed=3)
    inner, cfg = InnerLoopConfig(), BomlaConfig(lam=1.0)
    pairs = averaged_adjusted_fisher(net, params, tasks, inner, cfg, seed=2)
    per_task = [
        task_adjusted_fisher(net, params, t, inner, cfg, factors=task_factors(net, params, t, inner, cfg, make_rng(2, 8, i)))
        for i, t in enumerate(tasks)
    ]
    for li, lp in enumerate(pairs):
        mean_block = np.mean([blocks[li] for blocks in per_task], axis=0)
        resid = np.linalg.norm(densify_pairs(lp) - mean_block) / np.linalg.norm(mean_block)
        log.info("layer %d: factor-averaging residual %.3e", li, resid)
        assert np.isfinite(resid)
    post = update_precision(zero_posterior(params), pairs, cfg)
    for block in post.precision.dense_blocks():
        assert np.linalg.eigvalsh(0.5 * (block + block.T))[0] >= -1e-10


def scalar_posterior(prior):
    return LaplacePosterior(ParamSet((np.zeros((1, 1)),)), KroneckerPrecision((LayerPrecision(np.full((1, 1), prior)),)))


def test_update_precision_scalar_and_zero_lambda():
    post = scalar_posterior(0.01)
    h = [(KronPair(1.0, np.array([[0.5]]), np.array([[1.0]])),)]
    new = update_precision(post, h, BomlaConfig(lam=100.0))
    assert new.precision.dense()[0, 0] == pytest.approx(50.01, abs=1e-12)
    assert new.t == 1 and new.mean is post.mean
    same = update_precision(post, h, BomlaConfig(lam=0.0, tau=0.3))
    assert same.precision.layers[0].pairs == () and same.precision.dense()[0, 0] == pytest.approx(0.31)


def test_update_precision_dense_difference(rng):
    src = toy_source(rng)
    net, params = random_net(rng, (4, 5, 3))
    tasks = toy_batch(rng, src, m=4)
    cfg = BomlaConfig(lam=7.0, tau=0.05)
    prev = init_posterior(params, cfg, make_rng(0))
    pairs = averaged_adjusted_fisher(net, params, tasks, InnerLoopConfig(), cfg)
    new = update_precision(prev, pairs, cfg)
    for li, lp in enumerate(pairs):
        inc = new.precision.layers[li].dense() - prev.precision.layers[li].dense()
        H = cfg.lam * densify_pairs(lp)
        shift = max(0.0, -np.linalg.eigvalsh(0.5 * (H + H.T))[0])
        want = H + (cfg.tau + shift) * np.eye(len(H))
        assert np.max(np.abs(inc - want)) <= 1e-10 * max(1.0, np.abs(want).max())
        assert np.linalg.eigvalsh(0.5 * (inc + inc.T) - cfg.tau * np.eye(len(H)))[0] >= -1e-8


def test_update_precision_shape_mismatch(rng):
    post = scalar_posterior(0.0)
    with pytest.raises(DimensionError):
        update_precision(post, [(KronPair(1.0, np.eye(2), np.eye(1)),)], BomlaConfig())
    with pytest.raises(DimensionError):
        update_precision(post, [], BomlaConfig())


def test_set_mean(rng):
    net, params = random_net(rng)
    post = random_posterior(rng, params)
    p2 = set_mean(post, params)
    assert all(np.array_equal(a, b) for a, b in zip(p2.mean, params))
    p3 = set_mean(p2, params)
    assert all(np.array_equal(a, b) for a, b in zip(p3.mean, p2.mean))
    assert quad_penalty(params, p3) == 0.0
    with pytest.raises(DimensionError):
        set_mean(post, ParamSet((params[0],)))


def test_init_posterior_range(rng):
    net, params = random_net(rng)
    post = init_posterior(params, BomlaConfig(), make_rng(0))
    d = np.concatenate([lp.diag.ravel() for lp in post.precision.layers])
    assert d.min() >= 1e-4 and d.max() <= 1e-2 and post.precision.n_pairs == 0


def test_fisher_label_sampler():
    net = Network((Layer(2, 4, "identity"),))
    w = np.zeros((4, 3))
    w[2, 2] = 50.0
    x = np.ones((5, 2))
    labels = fisher_label_sampler(net, ParamSet((w,)), x, 3, make_rng(0))
    assert labels.shape == (5, 3) and np.all(labels == 2)
    uni = fisher_label_sampler(net, ParamSet((np.zeros((4, 3)),)), np.ones((10_000, 2)), 1, make_rng(1))
    freq = np.bincount(uni.ravel(), minlength=4) / 10_000
    assert np.all(np.abs(freq - 0.25) <= 3 * np.sqrt(0.25 * 0.75 / 10_000))
    again = fisher_label_sampler(net, ParamSet((np.zeros((4, 3)),)), np.ones((10_000, 2)), 1, make_rng(1))
    assert np.array_equal(uni, again)


def test_lambda_zero_matches_maml_plus_support(rng):
    src = toy_source(rng)
    net, params = random_net(rng, (4, 5, 3))
    post = zero_posterior(params)
    for it in range(3):
        batch = toy_batch(rng, src, m=2, seed=it)
        a, ga = bomla_value_and_grad(net, params, batch, post, InnerLoopConfig())
        b, gb = meta_value_and_grad(net, params, batch, InnerLoopConfig(), support_term=True)
        assert a == b and ga.flatten().tobytes() == gb.flatten().tobytes()
