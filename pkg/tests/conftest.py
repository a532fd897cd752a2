import numpy as np
import pytest

from boml.diffcore import Network, ParamSet
from boml.episodic import DatasetSource, make_rng, sample_task


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def random_net(rng, dims=(4, 6, 3), activation="tanh"):
    net = Network.mlp(list(dims), activation)
    params = ParamSet(tuple(rng.normal(0, 0.5, s) for s in net.shapes))
    return net, params


def toy_source(rng, n_classes=8, per_class=12, dim=4, n_novel=3, name="toy"):
    protos = rng.normal(0, 2.0, (n_classes, dim))
    ex = {c: protos[c] + 0.3 * rng.normal(size=(per_class, dim)) for c in range(n_classes)}
    base = tuple(range(n_classes - n_novel))
    return DatasetSource(name, ex, base, tuple(range(n_classes - n_novel, n_classes)))


def toy_batch(rng, src, m=2, n_way=3, k_shot=2, q=3, seed=0):
    return [sample_task(src, "base", n_way, k_shot, q, make_rng(seed, j)) for j in range(m)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ----------------------------------------------------- acceptance reporting

ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records and prints one verdict line."""

    def report(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        ACCEPTANCE.append((n, ok, detail))
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
