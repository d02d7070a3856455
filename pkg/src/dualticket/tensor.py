"""Small float64 tensor type with tape-based reverse-mode autodiff.

Only the operations needed by dense/conv networks are provided. Every op
output remembers its parents and a closure that pushes the output gradient
back to them; ``backward`` walks the recorded nodes in exact reverse creation
order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, InputError, NonFiniteError, UsageError

_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording graph nodes (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, *, _parents: tuple = (), _op: str = "leaf"):
        # user-supplied leaves get a private copy; op outputs are already fresh
        arr = np.array(data, dtype=np.float64) if _op == "leaf" else np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor produced by {_op!r}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = _op
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str,
          fn: Callable[[np.ndarray], None]) -> Tensor:
    live = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=live, _parents=tuple(parents) if live else (), _op=op)
    if live:
        out._backward = fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-D ``a`` (M x K) and 2-D ``b`` (K x N)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), "matmul", fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(out, (a, b), "add", fn)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a plain scalar or array constant."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), "mul", fn)


def masked(w: Tensor, keep: np.ndarray) -> Tensor:
    """``w`` with entries where ``keep`` is False replaced by +0.0.

    Unlike ``w * keep`` this never yields -0.0, so the result is bitwise equal
    to zeroing the weights up front.
    """
    if keep.shape != w.shape:
        raise InputError(f"mask shape {keep.shape} does not match parameter shape {w.shape}")
    keep = keep.astype(bool, copy=False)

    def fn(g):
        w._accumulate(np.where(keep, g, 0.0))

    return _node(np.where(keep, w.data, 0.0), (w,), "masked", fn)


def tensor_sum(x: Tensor) -> Tensor:
    x = as_tensor(x)

    def fn(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _node(np.array(x.data.sum()), (x,), "sum", fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def fn(g):
        x._accumulate(g.reshape(src))

    return _node(x.data.reshape(shape), (x,), "reshape", fn)


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def fn(g):
        x._accumulate(np.where(pos, g, 0.0))

    return _node(np.where(pos, x.data, 0.0), (x,), "relu", fn)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    if stride < 1:
        raise ConfigurationError(f"conv2d: stride must be >= 1, got {stride}")
    span = size + 2 * padding - k
    if span < 0:
        raise ConfigurationError(f"conv2d: kernel {k} larger than padded input {size + 2 * padding}")
    if span % stride:
        raise ConfigurationError(
            f"conv2d: (size {size} + 2*{padding} - {k}) is not divisible by stride {stride}")
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation.

    ``x`` is C_in x H x W or N x C_in x H x W; ``kernel`` is C_out x C_in x k x k.
    Each sample goes through its own equally-shaped GEMM, so a sample's output
    does not depend on where it sits in the batch.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d: expected (N,)C,H,W input and 4-D kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = xd.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels but kernel {kernel.shape} expects {ci}")
    if kh != kw:
        raise DimensionError(f"conv2d: only square kernels are supported, got {kernel.shape}")
    k = kh
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (n, c, ho, wo, k, k) -> (n, c*k*k, ho*wo)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)
    w2 = kernel.data.reshape(co, c * k * k)
    out = np.matmul(w2[None], cols).reshape(n, co, ho, wo)

    def fn(g):
        g2 = g.reshape(n, co, ho * wo)
        if kernel.requires_grad:
            kernel._accumulate(np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T[None], g2).reshape(n, c, k, k, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            x._accumulate(dx[0] if single else dx)

    return _node(out[0] if single else out, (x, kernel), "conv2d", fn)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be B x C, got {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise InputError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"label out of range [0, {c})")
    labels = labels.astype(np.int64)

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(b), labels].mean()

    def fn(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        logits._accumulate(g * p / b)

    return _node(np.array(loss), (logits,), "softmax_cross_entropy", fn)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires grad, then free the graph."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not attached to any tensor that requires grad")
    if loss.op != "leaf" and loss._backward is None:
        raise UsageError("graph was already consumed by a previous backward()")
    if loss.is_leaf:
        loss._accumulate(np.ones_like(loss.data))
        return

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes or t.is_leaf:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    loss.grad = np.ones_like(loss.data)
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        if t.grad is not None:
            t._backward(t.grad)
        # interior buffers are scratch; only leaves keep their gradient
        t.grad = None
        t._parents = ()
        t._backward = None
