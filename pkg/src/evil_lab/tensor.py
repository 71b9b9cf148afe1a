"""Dense float64 tensors with a single-pass reverse-mode tape.

Usage::

    with Tape() as tape:
        w = tape.watch(Tensor(w0))
        loss = softmax_cross_entropy(matmul(x, w), y)
    grads = tape.gradient(loss, {"w": w})

Operations record onto the innermost active tape only when one of their
inputs is tracked by it, so evaluation code outside a tape pays nothing.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import ContractError, DimensionError

_TAPES: list["Tape"] = []


class Tensor:
    """Immutable row-major float64 array."""

    __slots__ = ("data",)
    __array_priority__ = 100

    def __init__(self, data):
        # read-only view: the caller's array stays writable, no copy is made
        arr = np.asarray(data, dtype=np.float64).view()
        arr.setflags(write=False)
        self.data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={self.data!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Scatter:
    """Sparse cotangent: ``values`` placed at ``index`` of a zero array of ``shape``."""

    __slots__ = ("shape", "index", "values")

    def __init__(self, shape, index, values):
        self.shape = shape
        self.index = index
        self.values = values

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.index] = self.values
        return out


class _Node:
    __slots__ = ("out", "inputs", "vjps")

    def __init__(self, out, inputs, vjps):
        self.out = out
        self.inputs = inputs
        self.vjps = vjps


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in execution order, so iterating them in reverse is a
    valid reverse topological order. A tape is consumed by :meth:`gradient`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: set[int] = set()
        self._watched: list[Tensor] = []
        self._consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def watch(self, t) -> Tensor:
        t = as_tensor(t)
        self._watched.append(t)
        self._tracked.add(id(t))
        return t

    def is_tracked(self, t) -> bool:
        return isinstance(t, Tensor) and id(t) in self._tracked

    def _record(self, out: Tensor, inputs, vjps):
        self.nodes.append(_Node(out, inputs, vjps))
        self._tracked.add(id(out))

    def gradient(self, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` with respect to each tensor in ``params``.

        Parameters that the loss does not depend on get an all-zero gradient.
        """
        if self._consumed:
            raise ContractError("tape already consumed")
        if loss.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        if not self.is_tracked(loss):
            raise ContractError("loss was not produced under this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owned: set[int] = set()  # buffers allocated here, safe to accumulate into in place
        for node in reversed(self.nodes):
            key = id(node.out)
            g = grads.pop(key, None)
            owned.discard(key)
            if g is None:
                continue
            for inp, vjp in zip(node.inputs, node.vjps):
                if vjp is None or id(inp) not in self._tracked:
                    continue
                contrib = vjp(g)
                key = id(inp)
                if isinstance(contrib, _Scatter):
                    if key not in owned:
                        base = grads.get(key)
                        grads[key] = np.zeros(contrib.shape) if base is None else np.array(base, dtype=np.float64)
                        owned.add(key)
                    grads[key][contrib.index] += contrib.values
                    continue
                if key in owned:
                    grads[key] += contrib
                elif key in grads:
                    grads[key] = grads[key] + contrib
                    owned.add(key)
                else:
                    grads[key] = contrib
        self._consumed = True
        self.nodes = []
        out = {}
        for name, p in params.items():
            g = grads.get(id(p))
            out[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
        return out


def backward(tape: Tape, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return tape.gradient(loss, params)


def _emit(data: np.ndarray, inputs: tuple, vjps: tuple) -> Tensor:
    out = Tensor(data)
    if _TAPES:
        tape = _TAPES[-1]
        if any(tape.is_tracked(i) for i in inputs):
            tape._record(out, inputs, vjps)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _emit(
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _emit(
        a.data - b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _emit(
        a.data * b.data,
        (a, b),
        (lambda g: _unbroadcast(g * b.data, a.shape), lambda g: _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    return _emit(a.data @ b.data, (a, b), (lambda g: g @ b.data.T, lambda g: a.data.T @ g))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _emit(a.data * on, (a,), (lambda g: g * on,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data * a.data, (a,), (lambda g: 2.0 * a.data * g,))


def sum(a, axis=None) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return _emit(np.sum(a.data, axis=axis), (a,), (vjp,))


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data.reshape(shape), (a,), (lambda g: g.reshape(a.shape),))


def segment(flat, start: int, shape: tuple) -> Tensor:
    """View ``flat[start:start+prod(shape)]`` reshaped; backward scatters into zeros."""
    flat = as_tensor(flat)
    if flat.data.ndim != 1:
        raise DimensionError(f"segment expects a flat tensor, got {flat.shape}")
    stop = start + int(np.prod(shape))
    if stop > flat.size:
        raise DimensionError(f"segment [{start}, {stop}) exceeds length {flat.size}")

    def vjp(g):
        return _Scatter(flat.shape, slice(start, stop), g.reshape(-1))

    return _emit(flat.data[start:stop].reshape(shape), (flat,), (vjp,))


def rows(a, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of a 2-d tensor."""
    a = as_tensor(a)

    def vjp(g):
        return _Scatter(a.shape, slice(start, stop), g)

    return _emit(a.data[start:stop], (a,), (vjp,))


def split_rows(a, sizes) -> list[Tensor]:
    out, pos = [], 0
    for n in sizes:
        out.append(rows(a, pos, pos + n))
        pos += n
    return out


def stack(items) -> Tensor:
    """Stack scalar tensors into a vector."""
    items = [as_tensor(t) for t in items]
    data = np.array([t.data.reshape(()) for t in items], dtype=np.float64)
    vjps = tuple((lambda g, i=i, s=t.shape: np.reshape(g[i], s)) for i, t in enumerate(items))
    return _emit(data, tuple(items), vjps)


def softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return p * (g - (g * p).sum(axis=-1, keepdims=True))

    return _emit(p, (logits,), (vjp,))


def _check_labels(labels: np.ndarray, n: int, c: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != n:
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    labels = labels.astype(np.int64, copy=False)
    if n and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    return labels


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``, max-shifted."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be n x c, got {logits.shape}")
    n, c = logits.shape
    if n < 1:
        raise ContractError("cross-entropy over an empty batch")
    labels = _check_labels(labels, n, c)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return p * (float(g) / n)

    return _emit(np.array(loss), (logits,), (vjp,))


def identity(n: int) -> Tensor:
    return Tensor(np.eye(n))


def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
