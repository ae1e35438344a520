"""Dense-array tensors with reverse-mode differentiation.

Every primitive records itself on the graph when it runs.  ``backward`` collects
the ops reachable from the output and replays their adjoints in reverse
execution order (each op exactly once).  Only the handful of operations the
toy ViT and the compression losses need are provided.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()
_recording = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them (teacher passes, evaluation)."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


class Tensor:
    """A numpy array plus a lazily allocated gradient slot."""

    __slots__ = ("values", "grad", "parents", "backward_fn", "op", "order")

    def __init__(self, values, parents: Sequence["Tensor"] = (), backward_fn=None, op: str = "leaf"):
        self.values = np.asarray(values)
        self.grad: np.ndarray | None = None
        self.op = op
        if _recording and backward_fn is not None:
            self.parents = tuple(parents)
            self.backward_fn = backward_fn
        else:
            self.parents = ()
            self.backward_fn = None
        self.order = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.values.dtype, copy=True).reshape(self.values.shape)
        else:
            self.grad += g

    def item(self) -> float:
        return float(self.values.reshape(()))

    def backward(self, seed: np.ndarray | None = None) -> None:
        backward(self, seed)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    # operator sugar for the small expressions in the loss code
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

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # constants adopt the tensor operand's dtype so float32 graphs stay float32
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    return _lift(a, b), b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class ComputeGraph:
    """Ops reachable from an output, in execution order."""

    def __init__(self, output: Tensor):
        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen or t.backward_fn is None:
                continue
            seen[id(t)] = t
            stack.extend(t.parents)
        self.ops = sorted(seen.values(), key=lambda t: t.order)

    def __len__(self) -> int:
        return len(self.ops)

    def replay(self) -> Iterable[Tensor]:
        return reversed(self.ops)


def backward(output: Tensor, seed: np.ndarray | None = None) -> ComputeGraph:
    if seed is None:
        if output.values.size != 1:
            raise ShapeError(f"backward() needs a seed for non-scalar output {output.shape}")
        seed = np.ones_like(output.values)
    output.accumulate(np.asarray(seed, dtype=output.dtype))
    graph = ComputeGraph(output)
    for node in graph.replay():
        if node.grad is not None:
            node.backward_fn(node.grad)
    return graph


def custom_op(values: np.ndarray, parents: Sequence[Tensor], adjoint: Callable[[np.ndarray], None],
              op: str = "custom") -> Tensor:
    """Wrap a forward value with a hand-written adjoint.

    ``adjoint`` receives the output gradient and must call ``accumulate`` on the
    parents it wants to feed.
    """
    return Tensor(values, parents, adjoint, op)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_vals = a.values + b.values

    def adjoint(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    return Tensor(out_vals, (a, b), adjoint, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def adjoint(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(-g, b.shape))

    return Tensor(a.values - b.values, (a, b), adjoint, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a plain array (treated as constant)."""
    a = _lift(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)

        def adjoint_const(g):
            a.accumulate(_unbroadcast(g * c, a.shape))

        return Tensor(a.values * c, (a,), adjoint_const, "mul")

    def adjoint(g):
        a.accumulate(_unbroadcast(g * b.values, a.shape))
        b.accumulate(_unbroadcast(g * a.values, b.shape))

    return Tensor(a.values * b.values, (a, b), adjoint, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    def adjoint(g):
        x.accumulate(g * c)

    return Tensor(x.values * c, (x,), adjoint, "scale")


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.values
    v2 = v * v
    t = np.tanh(_GELU_K * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def adjoint(g):
        dinner = _GELU_K * (1.0 + 3 * 0.044715 * v2)
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
        x.accumulate(g * d)

    return Tensor(out, (x,), adjoint, "gelu")


def ste_ceil(x: Tensor) -> Tensor:
    """Ceiling forward, identity backward (straight-through)."""
    def adjoint(g):
        x.accumulate(g)

    return Tensor(np.ceil(x.values), (x,), adjoint, "ste_ceil")


# ---------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    def adjoint(g):
        x.accumulate(np.broadcast_to(g, x.shape))

    return Tensor(x.values.sum(), (x,), adjoint, "sum")


def sum_axis(x: Tensor, axis: int) -> Tensor:
    def adjoint(g):
        x.accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return Tensor(x.values.sum(axis=axis), (x,), adjoint, "sum_axis")


def mean_all(x: Tensor) -> Tensor:
    n = x.values.size

    def adjoint(g):
        x.accumulate(np.broadcast_to(g / n, x.shape))

    return Tensor(x.values.mean(), (x,), adjoint, "mean")


def sum_sq(x: Tensor) -> Tensor:
    def adjoint(g):
        x.accumulate(2.0 * g * x.values)

    return Tensor(np.sum(x.values * x.values), (x,), adjoint, "sum_sq")


# ---------------------------------------------------------------- structural

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    if a.values.ndim < 2 or b.values.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.values, b.values)

    def adjoint(g):
        a.accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.values, -1, -2)), a.shape))
        b.accumulate(_unbroadcast(np.matmul(np.swapaxes(a.values, -1, -2), g), b.shape))

    return Tensor(out, (a, b), adjoint, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    out = x.values @ w.values.T
    if b is not None:
        out = out + b.values

    def adjoint(g):
        x.accumulate(g @ w.values)
        g2 = g.reshape(-1, g.shape[-1])
        w.accumulate(g2.T @ x.values.reshape(-1, x.shape[-1]))
        if b is not None:
            b.accumulate(g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents, adjoint, "linear")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def adjoint(g):
        x.accumulate(g.reshape(x.shape))

    return Tensor(x.values.reshape(shape), (x,), adjoint, "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def adjoint(g):
        x.accumulate(np.transpose(g, inverse))

    return Tensor(np.transpose(x.values, axes), (x,), adjoint, "transpose")


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def adjoint(g):
        x.accumulate(_unbroadcast(g, x.shape))

    return Tensor(np.broadcast_to(x.values, shape).copy(), (x,), adjoint, "broadcast")


def getitem(x: Tensor, idx) -> Tensor:
    def adjoint(g):
        full = np.zeros_like(x.values)
        np.add.at(full, idx, g)
        x.accumulate(full)

    return Tensor(x.values[idx], (x,), adjoint, "getitem")


def slice_columns(x: Tensor, idx: Sequence[int]) -> Tensor:
    """Gather a set of indices along the last axis."""
    idx = np.asarray(idx, dtype=np.intp)
    n = x.shape[-1]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"slice_columns: index out of range for last axis of size {n}")

    def adjoint(g):
        full = np.zeros_like(x.values)
        np.add.at(full, (..., idx), g)
        x.accumulate(full)

    return Tensor(x.values[..., idx], (x,), adjoint, "slice_columns")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def adjoint(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            p.accumulate(g[tuple(sl)])

    return Tensor(np.concatenate([p.values for p in parts], axis=axis), tuple(parts), adjoint, "concat")


# ---------------------------------------------------------------- nn pieces

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    if x.values.ndim < 1:
        raise ShapeError("softmax_rows needs at least one axis")
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def adjoint(g):
        x.accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return Tensor(y, (x,), adjoint, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: gamma {gamma.shape}/beta {beta.shape} vs last dim {d}")
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.values + beta.values

    def adjoint(g):
        gx = g * gamma.values
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        x.accumulate(dx)
        flat = g.reshape(-1, d)
        gamma.accumulate((flat * xhat.reshape(-1, d)).sum(axis=0))
        beta.accumulate(flat.sum(axis=0))

    return Tensor(out, (x, gamma, beta), adjoint, "layernorm")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range for {c} classes")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(b), labels].mean()

    def adjoint(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        logits.accumulate(g * p / b)

    return Tensor(np.asarray(loss, dtype=logits.dtype), (logits,), adjoint, "cross_entropy")
