from dataclasses import replace

import numpy as np
import pytest

from boml import baselines as bl
from boml.diffcore import InputError, Network
from boml.episodic import make_rng
from boml.maml import AdamConfig, EvalConfig, InnerLoopConfig, evaluate, meta_train, meta_value_and_grad, sample_batch
from conftest import toy_source


def spec(iterations=6):
    net = Network.mlp([4, 6, 3])
    return bl.TrainSpec(net, InnerLoopConfig(), AdamConfig(lr=0.01), iterations, 2, 3, 1, 3)


def same(a, b):
    return a.flatten().tobytes() == b.flatten().tobytes()


def recorder():
    losses = []
    return losses, lambda i, p, loss: losses.append(loss)


def test_seq_maml_first_round_is_plain_maml(rng):
    s, src = spec(), toy_source(rng)
    p0 = bl.init_params(s, 4)
    got = bl.seq_maml_round(s, p0, src, 4, 1)
    want, _ = meta_train(
        p0, s.iterations,
        lambda i: sample_batch(src, 2, 3, 1, 3, (4, 1, i)),
        lambda p, b: meta_value_and_grad(s.net, p, b, s.inner),
        s.adam,
    )
    assert same(got, want)


def test_seq_maml_zero_iterations(rng):
    s = spec(0)
    p0 = bl.init_params(s, 0)
    assert same(bl.seq_maml_round(s, p0, toy_source(rng), 0, 1), p0)


def test_toe_first_round_matches_plain_maml_trajectory(rng):
    s, src = spec(), toy_source(rng)
    la, ca = recorder()
    lb, cb = recorder()
    toe, buf = bl.toe_round(s, bl.TaskBuffer(), src, 9, 1, ca)
    seq = bl.seq_maml_round(s, bl.init_params(s, 9, 1), src, 9, 1, cb)
    assert la == lb and same(toe, seq) and len(buf) == 1


def test_buffer_growth_and_immutability(rng):
    s = spec(1)
    buf = bl.TaskBuffer()
    params = bl.init_params(s, 0)
    sources = [toy_source(rng, name=f"d{t}") for t in range(4)]
    for t, src in enumerate(sources, start=1):
        before = buf
        _, buf = bl.toe_round(s, buf, src, 0, t)
        assert len(buf) == t and len(before) == t - 1
    buf = bl.TaskBuffer()
    for t, src in enumerate(sources, start=1):
        params, buf = bl.ftml_round(s, params, buf, src, 0, t)
        assert len(buf) == t
    assert buf.nbytes == sum(x.nbytes for x in sources)


def test_ftml_singleton_buffer_is_seq_maml(rng):
    s, src = spec(), toy_source(rng)
    p0 = bl.init_params(s, 2)
    ftml, _ = bl.ftml_round(s, p0, bl.TaskBuffer(), src, 2, 1)
    assert same(ftml, bl.seq_maml_round(s, p0, src, 2, 1))


def test_buffer_draws_uniform():
    items = tuple(replace(toy_source(np.random.default_rng(0)), name=f"s{i}") for i in range(5))
    buf = bl.TaskBuffer(items)
    pick = bl._uniform_picker(buf, 3, 2)
    n = 10_000
    counts = np.bincount([int(pick(i).name[1:]) for i in range(n)], minlength=5)
    p = 1 / 5
    assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))
    with pytest.raises(InputError):
        bl.TaskBuffer().draw(make_rng(0))


def test_toe_symmetric_stream(rng):
    s = spec(40)
    src = toy_source(rng, n_classes=10, per_class=15, n_novel=4)
    twin = replace(src, name="twin")
    buf = bl.TaskBuffer()
    _, buf = bl.toe_round(s, buf, src, 1, 1)
    params, buf = bl.toe_round(s, buf, twin, 1, 2)
    cfg = EvalConfig(n_tasks=60, n_way=3, k_shot=1, q_per_class=3, inner=InnerLoopConfig(3, 0.4))
    m1, c1 = evaluate(s.net, params, src, replace(cfg, seed=1))
    m2, c2 = evaluate(s.net, params, twin, replace(cfg, seed=2))
    assert abs(m1 - m2) <= 3 * max(c1, c2)


def test_train_spec_validation():
    with pytest.raises(InputError):
        bl.TrainSpec(Network.mlp([2, 2]), InnerLoopConfig(), AdamConfig(), -1, 1, 2, 1, 1)
