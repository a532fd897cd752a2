"""Dense reverse-mode differentiation for small fully-connected networks.

Every operation on a :class:`Var` records its parents together with a
vector-Jacobian product written in terms of other ``Var`` operations.  The
recorded graph is the tape: walking it backwards yields gradients, and when
``create_graph=True`` the backward pass is itself recorded, so a gradient can
be differentiated again.  That is all MAML needs to differentiate through
``k`` inner SGD steps.

Weights follow the bias-column convention: layer ``l`` holds a matrix of shape
``(out, in + 1)`` whose last column is the bias, and every activation gets a
constant 1 appended before the product.  Flattening stacks columns
(Fortran order), so ``(A kron G) vec(X) == vec(G X A^T)`` holds for each
layer block.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shapes of operands do not agree."""


class InputError(ValueError):
    """Malformed inputs such as out-of-range labels or empty batches."""


class CapabilityError(TypeError):
    """An operation outside the supported primitive set was attempted."""


_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording parents (plain numpy speed)."""
    prev = _recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


class Var:
    """A node of the tape: a float64 array plus how it was produced."""

    __slots__ = ("value", "parents", "requires_grad")

    def __init__(self, value, requires_grad: bool = False, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # numpy must not silently turn a Var into an array and drop the graph
    def __array__(self, *args, **kwargs):
        raise CapabilityError("Var does not convert to ndarray; use .value or a supported primitive")

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        raise CapabilityError(f"unsupported primitive: numpy ufunc {ufunc.__name__!r} on Var")

    def __array_function__(self, func, types, args, kwargs):
        raise CapabilityError(f"unsupported primitive: numpy function {func.__name__!r} on Var")

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, reciprocal(other))
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def const(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _node(value, inputs: Sequence[Var], vjps: Sequence[Callable]) -> Var:
    if not _recording():
        return Var(value)
    parents = tuple((p, f) for p, f in zip(inputs, vjps) if p.requires_grad)
    return Var(value, requires_grad=bool(parents), parents=parents)


def _sum_to_shape(x: np.ndarray, shape: tuple) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x


# ---------------------------------------------------------------- primitives

def sum_to(a: Var, shape: tuple) -> Var:
    """Reduce a broadcast result back to ``shape``."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    in_shape = a.shape
    return _node(_sum_to_shape(a.value, shape), [a], [lambda g: broadcast_to(g, in_shape)])


def broadcast_to(a: Var, shape: tuple) -> Var:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    in_shape = a.shape
    return _node(np.broadcast_to(a.value, shape).copy(), [a], [lambda g: sum_to(g, in_shape)])


def _check_broadcast(a: Var, b: Var) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b) -> Var:
    a, b = const(a), const(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, [a, b], [lambda g: sum_to(g, sa), lambda g: sum_to(g, sb)])


def sub(a, b) -> Var:
    a, b = const(a), const(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _node(
        a.value - b.value, [a, b], [lambda g: sum_to(g, sa), lambda g: sum_to(scale(g, -1.0), sb)]
    )


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _node(
        a.value * b.value,
        [a, b],
        [lambda g: sum_to(mul(g, b), sa), lambda g: sum_to(mul(g, a), sb)],
    )


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return _node(a.value * c, [a], [lambda g: scale(g, c)])


def reciprocal(a: Var) -> Var:
    y = 1.0 / a.value
    out = None

    def vjp(g):
        return scale(mul(g, mul(out, out)), -1.0)

    out = _node(y, [a], [vjp])
    return out


def matmul(a, b) -> Var:
    a, b = const(a), const(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not chain")
    return _node(
        a.value @ b.value,
        [a, b],
        [lambda g: matmul(g, transpose(b)), lambda g: matmul(transpose(a), g)],
    )


def transpose(a: Var) -> Var:
    return _node(a.value.T.copy(), [a], [lambda g: transpose(g)])


def total(a: Var) -> Var:
    """Sum of all entries, as a 0-d Var."""
    in_shape = a.shape
    return _node(np.asarray(a.value.sum()), [a], [lambda g: broadcast_to(g, in_shape)])


def exp(a: Var) -> Var:
    out = None

    def vjp(g):
        return mul(g, out)

    out = _node(np.exp(a.value), [a], [vjp])
    return out


def sqrt(a: Var) -> Var:
    out = None

    def vjp(g):
        return scale(mul(g, reciprocal(out)), 0.5)

    out = _node(np.sqrt(a.value), [a], [vjp])
    return out


def relu(a: Var) -> Var:
    mask = (a.value > 0).astype(np.float64)
    return _node(a.value * mask, [a], [lambda g: mul(g, Var(mask))])


def tanh(a: Var) -> Var:
    out = None

    def vjp(g):
        return mul(g, sub(1.0, mul(out, out)))

    out = _node(np.tanh(a.value), [a], [vjp])
    return out


def identity(a: Var) -> Var:
    return a


def softmax(z: Var) -> Var:
    """Row-wise softmax of a 2-d Var."""
    zv = z.value - z.value.max(axis=1, keepdims=True)
    e = np.exp(zv)
    out = None

    def vjp(g):
        gs = mul(g, out)
        return sub(gs, mul(out, sum_to(gs, (out.shape[0], 1))))

    out = _node(e / e.sum(axis=1, keepdims=True), [z], [vjp])
    return out


def logsumexp_rows(z: Var) -> Var:
    m = z.value.max(axis=1, keepdims=True)
    val = m + np.log(np.exp(z.value - m).sum(axis=1, keepdims=True))
    return _node(val, [z], [lambda g: mul(g, softmax(z))])


def append_ones(a: Var) -> Var:
    """Append a constant-1 column (the bias unit)."""
    n = a.shape[0]
    val = np.concatenate([a.value, np.ones((n, 1))], axis=1)
    return _node(val, [a], [lambda g: drop_last_col(g)])


def drop_last_col(a: Var) -> Var:
    return _node(a.value[:, :-1].copy(), [a], [lambda g: pad_zero_col(g)])


def pad_zero_col(a: Var) -> Var:
    n = a.shape[0]
    val = np.concatenate([a.value, np.zeros((n, 1))], axis=1)
    return _node(val, [a], [lambda g: drop_last_col(g)])


ACTIVATIONS: dict[str, Callable[[Var], Var]] = {"relu": relu, "tanh": tanh, "identity": identity}


# ------------------------------------------------------------------ backward

def _toposort(root: Var) -> list[Var]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Var, wrt: Sequence[Var], create_graph: bool = False) -> list[Var]:
    """Gradients of a scalar ``root`` with respect to each Var in ``wrt``.

    With ``create_graph`` the returned gradients are themselves recorded and
    can be differentiated again.
    """
    if root.value.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, Var] = {id(root): Var(np.ones_like(root.value))}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(_toposort(root)):
            g = grads.get(id(node))
            if g is None:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = contrib if prev is None else add(prev, contrib)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else Var(np.zeros_like(w.value)))
    return out


# --------------------------------------------------------- network and params

@dataclass(frozen=True)
class Layer:
    input_dim: int
    output_dim: int
    activation: str = "relu"

    @property
    def weight_shape(self) -> tuple[int, int]:
        return (self.output_dim, self.input_dim + 1)


@dataclass(frozen=True)
class Network:
    """Fully-connected classifier; the last layer's output feeds a softmax."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("a network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.output_dim != nxt.input_dim:
                raise DimensionError(
                    f"layer dims do not chain: {prev.output_dim} -> {nxt.input_dim}"
                )
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise CapabilityError(f"unsupported activation {layer.activation!r}")

    @classmethod
    def mlp(cls, dims: Sequence[int], activation: str = "relu") -> "Network":
        """``dims = [in, hidden..., n_classes]``; the output layer is linear."""
        layers = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            act = "identity" if i == len(dims) - 2 else activation
            layers.append(Layer(int(d_in), int(d_out), act))
        return cls(tuple(layers))

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def n_classes(self) -> int:
        return self.layers[-1].output_dim

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [layer.weight_shape for layer in self.layers]

    @property
    def n_params(self) -> int:
        return sum(o * i for o, i in self.shapes)

    def init_params(self, rng: np.random.Generator) -> "ParamSet":
        """Glorot-uniform weights, zero bias."""
        ws = []
        for layer in self.layers:
            lim = np.sqrt(6.0 / (layer.input_dim + layer.output_dim))
            w = np.zeros(layer.weight_shape)
            w[:, :-1] = rng.uniform(-lim, lim, size=(layer.output_dim, layer.input_dim))
            ws.append(w)
        return ParamSet(tuple(ws))


@dataclass(frozen=True)
class ParamSet:
    """Per-layer weight matrices, each with its bias as the last column."""

    weights: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=np.float64) for w in self.weights))

    def __len__(self):
        return len(self.weights)

    def __iter__(self):
        return iter(self.weights)

    def __getitem__(self, i):
        return self.weights[i]

    @property
    def size(self) -> int:
        return sum(w.size for w in self.weights)

    def flatten(self) -> np.ndarray:
        return np.concatenate([w.ravel(order="F") for w in self.weights])

    @classmethod
    def unflatten(cls, net: Network, vec: np.ndarray) -> "ParamSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1 or vec.size != net.n_params:
            raise DimensionError(f"expected a vector of length {net.n_params}, got {vec.shape}")
        ws, pos = [], 0
        for shape in net.shapes:
            n = shape[0] * shape[1]
            ws.append(vec[pos:pos + n].reshape(shape, order="F").copy())
            pos += n
        return cls(tuple(ws))

    def map(self, fn, *others: "ParamSet") -> "ParamSet":
        return ParamSet(tuple(fn(*ws) for ws in zip(self.weights, *(o.weights for o in others))))

    def __add__(self, other: "ParamSet") -> "ParamSet":
        return self.map(np.add, other)

    def __sub__(self, other: "ParamSet") -> "ParamSet":
        return self.map(np.subtract, other)

    def scaled(self, c: float) -> "ParamSet":
        return ParamSet(tuple(w * c for w in self.weights))

    def check(self, net: Network) -> None:
        shapes = [w.shape for w in self.weights]
        if shapes != net.shapes:
            raise DimensionError(f"parameter shapes {shapes} do not match network {net.shapes}")

    def as_vars(self, requires_grad: bool = True) -> list[Var]:
        return [Var(w.copy(), requires_grad=requires_grad) for w in self.weights]

    @classmethod
    def from_vars(cls, vs: Iterable[Var]) -> "ParamSet":
        return cls(tuple(v.value.copy() for v in vs))

    @classmethod
    def zeros_like(cls, other: "ParamSet") -> "ParamSet":
        return cls(tuple(np.zeros_like(w) for w in other.weights))


# -------------------------------------------------------------------- forward

@dataclass
class ForwardTrace:
    """Per-layer augmented inputs and pre-activations of one forward pass."""

    inputs: list[Var]
    preacts: list[Var]
    logits: Var


def _as_inputs(net: Network, inputs) -> Var:
    x = inputs if isinstance(inputs, Var) else Var(np.atleast_2d(np.asarray(inputs, dtype=np.float64)))
    if x.value.ndim != 2 or x.shape[1] != net.input_dim:
        raise DimensionError(f"inputs of shape {x.shape} do not match input_dim {net.input_dim}")
    return x


def forward_trace(net: Network, weights: Sequence[Var], inputs) -> ForwardTrace:
    if len(weights) != len(net.layers):
        raise DimensionError(f"{len(weights)} weight matrices for {len(net.layers)} layers")
    a = _as_inputs(net, inputs)
    ins, pre = [], []
    for layer, w in zip(net.layers, weights):
        w = const(w)
        if w.shape != layer.weight_shape:
            raise DimensionError(f"weight shape {w.shape} != {layer.weight_shape}")
        a_aug = append_ones(a)
        h = matmul(a_aug, transpose(w))
        ins.append(a_aug)
        pre.append(h)
        a = ACTIVATIONS[layer.activation](h)
    return ForwardTrace(ins, pre, a)


def forward(net: Network, params, inputs) -> Var | np.ndarray:
    """Logits of the network.

    ``params`` may be a :class:`ParamSet` (returns an ndarray) or a list of
    Vars (returns a Var on the tape).
    """
    if isinstance(params, ParamSet):
        params.check(net)
        with no_grad():
            return forward_trace(net, [Var(w) for w in params], inputs).logits.value
    return forward_trace(net, params, inputs).logits


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != n_rows:
        raise InputError(f"need one label per row: {labels.shape} vs {n_rows} rows")
    if n_rows == 0:
        raise InputError("empty batch")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputError(f"labels out of range 0..{n_classes - 1}")
    return labels.astype(np.int64)


def nll(logits, labels, reduction: str = "mean"):
    """Negative log-likelihood of ``labels`` under ``softmax(logits)``.

    Works on ndarrays (returns a float) and on Vars (returns a 0-d Var).
    """
    if not isinstance(logits, Var):
        z = np.asarray(logits, dtype=np.float64)
        y = _check_labels(labels, z.shape[0], z.shape[1])
        m = z.max(axis=1, keepdims=True)
        lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]
        losses = lse - z[np.arange(len(y)), y]
        return float(losses.mean() if reduction == "mean" else losses.sum())
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(y)), y] = 1.0
    loss = sub(total(logsumexp_rows(logits)), total(mul(logits, onehot)))
    if reduction == "mean":
        loss = scale(loss, 1.0 / len(y))
    return loss


def accuracy(logits: np.ndarray, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


# ------------------------------------------------------------------ gradients

def _as_paramset_fn(loss_fn):
    def call(vs):
        out = loss_fn(vs)
        if not isinstance(out, Var):
            raise CapabilityError(
                f"loss_fn returned {type(out).__name__}; it must be built from supported primitives"
            )
        return out

    return call


def value_and_grad(loss_fn: Callable[[list[Var]], Var], params: ParamSet) -> tuple[float, ParamSet]:
    vs = params.as_vars()
    loss = _as_paramset_fn(loss_fn)(vs)
    gs = backward(loss, vs)
    return float(loss.value), ParamSet(tuple(g.value for g in gs))


def grad(loss_fn: Callable[[list[Var]], Var], params: ParamSet) -> ParamSet:
    """Gradient of a scalar loss built from tape primitives."""
    return value_and_grad(loss_fn, params)[1]


def sgd_steps(loss_fn: Callable[[list[Var]], Var], k: int, alpha: float, create_graph: bool = True):
    """An inner-step function running ``k`` full-batch SGD steps on ``loss_fn``.

    With ``create_graph`` the steps stay on the tape, so the returned
    parameters remain differentiable with respect to the starting point.
    """
    def step(vs: list[Var]) -> list[Var]:
        for _ in range(k):
            gs = backward(loss_fn(vs), vs, create_graph=create_graph)
            if create_graph:
                vs = [sub(v, scale(g, alpha)) for v, g in zip(vs, gs)]
            else:
                # first-order: the adapted point is a detached offset of vs
                vs = [sub(v, Var(g.value * alpha)) for v, g in zip(vs, gs)]
        return vs

    return step


def grad_through_inner(
    outer_loss_fn: Callable[[list[Var]], Var],
    inner_step_fn: Callable[[list[Var]], list[Var]],
    params: ParamSet,
) -> ParamSet:
    """Total derivative of ``outer_loss(inner_step(theta))`` at ``params``."""
    vs = params.as_vars()
    adapted = inner_step_fn(vs)
    loss = _as_paramset_fn(outer_loss_fn)(adapted)
    gs = backward(loss, vs)
    return ParamSet(tuple(g.value for g in gs))


# ------------------------------------------------------------- factor capture

@dataclass(frozen=True)
class LayerFactors:
    A: np.ndarray  # E[a a^T] over the augmented layer input
    G: np.ndarray  # E[g g^T] over the pre-activation gradient


def capture_factors(net: Network, params: ParamSet, inputs, labels) -> list[LayerFactors]:
    """Kronecker factors of every layer for one batch.

    ``labels`` has either one entry per input row or ``r`` entries per row
    as an ``(n, r)`` array (several sampled labels per example); the G
    factor averages over all of them.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[0] == 0:
        raise InputError("empty batch")
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    n, r = labels.shape
    if n != x.shape[0]:
        raise InputError(f"{n} label rows for {x.shape[0]} inputs")

    params.check(net)
    vs = [Var(w, requires_grad=True) for w in params]
    ins = None
    gsum = [np.zeros((layer.output_dim, layer.output_dim)) for layer in net.layers]
    for j in range(r):
        trace = forward_trace(net, vs, x)
        if ins is None:
            ins = [a.value for a in trace.inputs]
        loss = nll(trace.logits, labels[:, j], reduction="sum")
        pre_grads = backward(loss, trace.preacts)
        for li, g in enumerate(pre_grads):
            gsum[li] += g.value.T @ g.value

    factors = []
    for li in range(len(net.layers)):
        A = ins[li].T @ ins[li] / n
        G = gsum[li] / (n * r)
        factors.append(LayerFactors(0.5 * (A + A.T), 0.5 * (G + G.T)))
    return factors
