"""Binary posterior checkpoints.

Layout, all integers and doubles little-endian::

    b"BOMLCKPT1"
    u8 len, method tag (ascii)
    u8 payload kind          0 = parameters, 1 = Laplace, 2 = mean-field
    u32 n_layers, then per layer: u32 input_dim, u32 output_dim, u8 activation
    u32 t                    completed datasets
    mean                     per layer, f64[out * (in + 1)] row-major
    kind 1: per layer diag f64[out * (in + 1)], u32 n_pairs,
            per pair f64 weight, f64[(in+1)^2] left, f64[out^2] right
    kind 2: per layer log_sigma f64[out * (in + 1)]

Nothing may follow the payload.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from ..bomla import KronPair, KroneckerPrecision, LaplacePosterior, LayerPrecision
from ..bomvi import MeanFieldPosterior
from ..diffcore import Layer, Network, ParamSet

MAGIC = b"BOMLCKPT1"
_ACT_CODES = {"relu": 0, "tanh": 1, "identity": 2}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}
_F64 = np.dtype("<f8")

State = Union[ParamSet, LaplacePosterior, MeanFieldPosterior]


class CheckpointFormatError(ValueError):
    """The file is not a readable checkpoint."""


class CheckpointCompatibilityError(ValueError):
    """The checkpoint's layer shapes do not match the expected network."""


@dataclass(frozen=True)
class Checkpoint:
    method: str
    net: Network
    t: int
    state: State

    @property
    def mean(self) -> ParamSet:
        s = self.state
        if isinstance(s, LaplacePosterior):
            return s.mean
        if isinstance(s, MeanFieldPosterior):
            return s.mu
        return s


def _arr(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype=_F64).tobytes()


def encode(method: str, net: Network, state: State, t: int | None = None) -> bytes:
    tag = method.encode("ascii")
    if len(tag) > 255:
        raise ValueError("method tag too long")
    if isinstance(state, LaplacePosterior):
        kind, mean, t = 1, state.mean, state.t if t is None else t
    elif isinstance(state, MeanFieldPosterior):
        kind, mean = 2, state.mu
    elif isinstance(state, ParamSet):
        kind, mean = 0, state
    else:
        raise TypeError(f"cannot checkpoint {type(state).__name__}")
    mean.check(net)
    out = [MAGIC, struct.pack("<B", len(tag)), tag, struct.pack("<BI", kind, len(net.layers))]
    for layer in net.layers:
        out.append(struct.pack("<IIB", layer.input_dim, layer.output_dim, _ACT_CODES[layer.activation]))
    out.append(struct.pack("<I", 0 if t is None else t))
    out.extend(_arr(w) for w in mean)
    if kind == 1:
        for lp in state.precision.layers:
            out.append(_arr(lp.diag))
            out.append(struct.pack("<I", len(lp.pairs)))
            for p in lp.pairs:
                out.append(struct.pack("<d", p.weight))
                out.append(_arr(p.left))
                out.append(_arr(p.right))
    elif kind == 2:
        out.extend(_arr(w) for w in state.log_sigma)
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype=_F64).astype(np.float64).reshape(shape)


def decode(data: bytes, expect: Network | None = None) -> Checkpoint:
    r = _Reader(data)
    if bytes(r.take(len(MAGIC))) != MAGIC:
        raise CheckpointFormatError("bad magic or unsupported version")
    (n_tag,) = r.unpack("<B")
    try:
        method = bytes(r.take(n_tag)).decode("ascii")
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError("method tag is not ascii") from exc
    kind, n_layers = r.unpack("<BI")
    if kind not in (0, 1, 2):
        raise CheckpointFormatError(f"unknown payload kind {kind}")
    if n_layers == 0 or n_layers > 4096:
        raise CheckpointFormatError(f"implausible layer count {n_layers}")
    layers = []
    for _ in range(n_layers):
        i, o, code = r.unpack("<IIB")
        if code not in _ACT_NAMES or i == 0 or o == 0:
            raise CheckpointFormatError("corrupt layer table")
        layers.append(Layer(i, o, _ACT_NAMES[code]))
    try:
        net = Network(tuple(layers))
    except ValueError as exc:
        raise CheckpointFormatError(f"corrupt layer table: {exc}") from exc
    if expect is not None and expect.shapes != net.shapes:
        raise CheckpointCompatibilityError(f"checkpoint shapes {net.shapes} != expected {expect.shapes}")
    (t,) = r.unpack("<I")
    mean = ParamSet(tuple(r.array(s) for s in net.shapes))
    if kind == 1:
        precs = []
        for (o, i) in net.shapes:
            diag = r.array((o, i))
            (n_pairs,) = r.unpack("<I")
            pairs = []
            for _ in range(n_pairs):
                (w,) = r.unpack("<d")
                pairs.append(KronPair(w, r.array((i, i)), r.array((o, o))))
            precs.append(LayerPrecision(diag, tuple(pairs)))
        state: State = LaplacePosterior(mean, KroneckerPrecision(tuple(precs)), t)
    elif kind == 2:
        state = MeanFieldPosterior(mean, ParamSet(tuple(r.array(s) for s in net.shapes)))
    else:
        state = mean
    if r.pos != len(r.data):
        raise CheckpointFormatError(f"{len(r.data) - r.pos} trailing bytes")
    return Checkpoint(method, net, t, state)


def save_posterior(path, method: str, net: Network, state: State, t: int | None = None) -> int:
    """Write atomically; returns the byte count."""
    data = encode(method, net, state, t)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return len(data)


def load_posterior(path, expect: Network | None = None) -> Checkpoint:
    return decode(Path(path).read_bytes(), expect)
