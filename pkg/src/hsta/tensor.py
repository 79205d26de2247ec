"""Dense float64 tensors with a reverse-mode gradient tape.

Every higher layer (attention blocks, embedder, trainer) is built from the
primitives in this module. All arithmetic is 64-bit. Matrix products run in
one of two modes:

* exact mode (default): products are evaluated with a fixed left-to-right
  accumulation over the inner index, bitwise reproducible against a naive
  triple loop on any machine;
* fast mode: products dispatch to BLAS. Still deterministic run-to-run on
  one machine, but the accumulation order is whatever BLAS picks, so exact
  mode is required wherever tests assert bitwise equality against a serial
  oracle. Enable fast mode only for bulk training (see ``set_fast_matmul``).

Recording: ops append (output, inputs, vjp) entries to the innermost active
``Tape``. Entries are appended in execution order, so walking the list in
reverse visits nodes in reverse topological order. Tensors are immutable;
gradients accumulate into ``Param.grad`` buffers when ``backward`` is called.
"""

from __future__ import annotations

import math
import struct
import threading
from typing import Callable

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Param",
    "Tape",
    "backward",
    "tensor",
    "zeros",
    "matmul",
    "transpose",
    "softmax_rows",
    "layer_norm",
    "concat_rows",
    "concat_cols",
    "split_rows",
    "take_rows",
    "add",
    "sub",
    "mul",
    "scale",
    "gelu",
    "sum_all",
    "mean_all",
    "finite_diff_grad",
    "set_fast_matmul",
    "fast_matmul_enabled",
    "save_tensor",
    "load_tensor",
]

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """Immutable dense float64 array of arbitrary rank."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @staticmethod
    def _wrap(arr: np.ndarray) -> "Tensor":
        # Internal fast path: takes ownership of a freshly allocated array.
        out = object.__new__(Tensor)
        arr.flags.writeable = False
        object.__setattr__(out, "data", arr)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def tensor(data) -> Tensor:
    """Build a tensor from nested lists/arrays, rejecting non-finite values."""
    out = Tensor(data)
    if not np.all(np.isfinite(out.data)):
        raise ContractError("tensor contains NaN or Inf")
    return out


def zeros(*shape: int) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=np.float64))


class Param:
    """Named learnable tensor with a same-shaped gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: Tensor):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value.data)

    def assign(self, value: Tensor) -> None:
        if value.shape != self.value.shape:
            raise DimensionError(
                f"param {self.name}: cannot assign shape {value.shape} "
                f"over {self.value.shape}"
            )
        self.value = value

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape})"


# --- gradient tape ---------------------------------------------------------

_TLS = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_TLS, "tape", None)


class Tape:
    """Wengert list of primitive applications, one training thread at a time.

    Use as a context manager; ops executed inside record themselves. Params
    participate through ``watch``, which returns the unique leaf node whose
    gradient flows into ``param.grad`` on ``backward``.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._watched: dict[int, tuple[Param, Tensor]] = {}

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise ContractError("tapes do not nest")
        _TLS.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TLS.tape = None

    def watch(self, param: Param) -> Tensor:
        entry = self._watched.get(id(param))
        if entry is None:
            entry = (param, param.value)
            self._watched[id(param)] = entry
        return entry[1]

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._entries.append((out, inputs, vjp))

    def __len__(self) -> int:
        return len(self._entries)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every watched param's grad buffer.

    Walks the tape in strict reverse order. Params not reached by the loss
    keep their current grad; repeated calls without zeroing add up.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, vjp in reversed(tape._entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None:
                continue
            key = id(inp)
            acc = grads.get(key)
            grads[key] = gi if acc is None else acc + gi
    for param, node in tape._watched.values():
        g = grads.get(id(node))
        if g is not None:
            param.grad += g


def _watch(tape: Tape | None, param: Param) -> Tensor:
    return param.value if tape is None else tape.watch(param)


# --- primitives -------------------------------------------------------------

_FAST_MATMUL = False


def set_fast_matmul(enabled: bool) -> None:
    """Toggle the BLAS product path. Off = serial-accumulation exact mode."""
    global _FAST_MATMUL
    _FAST_MATMUL = bool(enabled)


def fast_matmul_enabled() -> bool:
    return _FAST_MATMUL


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _FAST_MATMUL:
        return a @ b
    # einsum without optimization keeps the inner-index accumulation serial
    # and left-to-right; contiguity is required for that guarantee to hold.
    return np.einsum(
        "ij,jk->ik",
        np.ascontiguousarray(a),
        np.ascontiguousarray(b),
        optimize=False,
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with deterministic accumulation (see module docstring)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    out = Tensor._wrap(_mm(a.data, b.data))
    t = _active_tape()
    if t is not None:
        ad, bd = a.data, b.data

        def vjp(g):
            return _mm(g, bd.T), _mm(ad.T, g)

        t._record(out, (a, b), vjp)
    return out


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose: rank-2 tensor required, got {x.shape}")
    out = Tensor._wrap(np.ascontiguousarray(x.data.T))
    t = _active_tape()
    if t is not None:
        t._record(out, (x,), lambda g: (np.ascontiguousarray(g.T),))
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows: rank-2 tensor required, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor._wrap(y)
    t = _active_tape()
    if t is not None:

        def vjp(g):
            return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

        t._record(out, (x,), vjp)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Per-row mean/variance normalization followed by affine scale/shift.

    ``gamma`` and ``beta`` are rank-1 of width d; variance is the biased
    (population) estimate, matching the usual transformer convention.
    """
    if eps <= 0:
        raise ContractError(f"layer_norm: eps must be positive, got {eps}")
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm: rank-2 tensor required, got {x.shape}")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match width {d}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor._wrap(xhat * gamma.data + beta.data)
    t = _active_tape()
    if t is not None:
        gd = gamma.data

        def vjp(g):
            gg = g * gd
            dx = inv * (
                gg
                - gg.mean(axis=1, keepdims=True)
                - xhat * (gg * xhat).mean(axis=1, keepdims=True)
            )
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

        t._record(out, (x, gamma, beta), vjp)
    return out


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Stack two matrices vertically; widths must agree."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows: {a.shape} over {b.shape}")
    out = Tensor._wrap(np.concatenate((a.data, b.data), axis=0))
    t = _active_tape()
    if t is not None:
        p = a.shape[0]
        t._record(out, (a, b), lambda g: (g[:p], g[p:]))
    return out


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Stack two matrices side by side; row counts must agree."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: {a.shape} beside {b.shape}")
    out = Tensor._wrap(np.concatenate((a.data, b.data), axis=1))
    t = _active_tape()
    if t is not None:
        w = a.shape[1]
        t._record(out, (a, b), lambda g: (g[:, :w], g[:, w:]))
    return out


def take_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice ``x[start:stop]`` as its own graph node."""
    if x.data.ndim != 2:
        raise DimensionError(f"take_rows: rank-2 tensor required, got {x.shape}")
    if not (0 <= start <= stop <= x.shape[0]):
        raise DimensionError(
            f"take_rows: slice [{start}:{stop}] outside {x.shape[0]} rows"
        )
    out = Tensor._wrap(x.data[start:stop].copy())
    t = _active_tape()
    if t is not None:

        def vjp(g):
            dx = np.zeros_like(x.data)
            dx[start:stop] = g
            return (dx,)

        t._record(out, (x,), vjp)
    return out


def split_rows(x: Tensor, p: int) -> tuple[Tensor, Tensor]:
    """Inverse of concat_rows: first p rows and the rest, bitwise."""
    return take_rows(x, 0, p), take_rows(x, p, x.shape[0])


def _binary(op_name: str, a: Tensor, b: Tensor, fwd, vjp_factory) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"{op_name}: {a.shape} vs {b.shape}")
    out = Tensor._wrap(fwd(a.data, b.data))
    t = _active_tape()
    if t is not None:
        t._record(out, (a, b), vjp_factory(a.data, b.data))
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, np.add, lambda ad, bd: lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda ad, bd: lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda ad, bd: lambda g: (g * bd, g * ad))


def scale(x: Tensor, s: float) -> Tensor:
    out = Tensor._wrap(x.data * s)
    t = _active_tape()
    if t is not None:
        t._record(out, (x,), lambda g: (g * s,))
    return out


def gelu(x: Tensor) -> Tensor:
    """GELU in its tanh form: 0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(inner)
    out = Tensor._wrap(0.5 * xd * (1.0 + th))
    t = _active_tape()
    if t is not None:

        def vjp(g):
            dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * xd * xd)
            dy = 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner
            return (g * dy,)

        t._record(out, (x,), vjp)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(x.data.sum()))
    t = _active_tape()
    if t is not None:
        t._record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor._wrap(np.asarray(x.data.sum() / n))
    t = _active_tape()
    if t is not None:
        t._record(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))
    return out


# --- finite differences ------------------------------------------------------


def finite_diff_grad(f: Callable[[], float], param: Param, step: float) -> Tensor:
    """Central-difference estimate of d f / d param, one coordinate at a time.

    ``f`` is a zero-argument closure reading ``param.value``; the param is
    restored exactly before returning.
    """
    if step <= 0:
        raise ContractError(f"finite_diff_grad: step must be positive, got {step}")
    base = param.value
    flat = base.data.reshape(-1)
    grad = np.zeros_like(flat)

    def eval_at(i: int, delta: float) -> float:
        bumped = flat.copy()
        bumped[i] += delta
        param.value = Tensor._wrap(bumped.reshape(base.shape))
        return float(f())

    try:
        for i in range(flat.size):
            grad[i] = (eval_at(i, +step) - eval_at(i, -step)) / (2.0 * step)
    finally:
        param.value = base
    return Tensor._wrap(grad.reshape(base.shape))


# --- binary tensor file format ----------------------------------------------

_MAGIC = b"HSTA"
_VERSION = 1


def save_tensor(path, t: Tensor) -> None:
    """Write the bit-exact container: magic, version, rank, extents, LE f64."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", t.data.ndim))
        for extent in t.shape:
            fh.write(struct.pack("<I", extent))
        fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ContractError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ContractError(f"{path}: unsupported format version {version}")
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise ContractError(f"{path}: truncated payload")
        data = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return Tensor._wrap(data)
