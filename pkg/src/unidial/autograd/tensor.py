"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op stamps its output with a monotonically increasing
execution index. ``backward`` collects the reachable graph and replays it in
strictly decreasing index order, which is exactly reverse execution order;
gradients arriving at a shared input are summed.

Broadcasting is limited to prepending leading dimensions: an operand of
shape ``S`` combines with one of shape ``(..., *S)``. Anything else needs an
explicit reshape.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

_order = itertools.count()
_state = {"grad": True, "check_finite": True}


class GraphError(RuntimeError):
    """Raised for invalid backward calls (non-scalar loss, detached graph)."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def set_finite_check(enabled: bool) -> bool:
    """Toggle the per-op finiteness check; returns the previous setting."""
    prev = _state["check_finite"]
    _state["check_finite"] = bool(enabled)
    return prev


def _as_float(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_order", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_float(data, dtype)
        if _state["check_finite"] and not np.isfinite(self.data).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._order = next(_order)
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported; multiply by a constant")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _result(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    if _state["check_finite"] and not np.isfinite(data).all():
        raise NonFiniteError("op produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = backward_fn if track else None
    out._order = next(_order)
    return out


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else None))


# -- tape / backward --------------------------------------------------------
def tape(root: Tensor) -> list[Tensor]:
    """Differentiable nodes reachable from ``root`` in execution order."""
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._backward is not None:
            nodes.append(node)
            stack.extend(node._parents)
    nodes.sort(key=lambda n: n._order)
    return nodes


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss._backward is None:
        raise GraphError("loss is detached from every tensor that requires grad")
    nodes = tape(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(nodes):
        g = node.grad
        if g is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise GraphError(f"gradient shape {pg.shape} != tensor shape {parent.shape}")
            parent.grad = pg if parent.grad is None else parent.grad + pg
        node.grad = None  # intermediate buffers are not retained


# -- broadcasting helpers --------------------------------------------------
def _check_suffix(a: tuple, b: tuple) -> None:
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    if big[len(big) - len(small):] != small:
        raise ValueError(f"shapes {a} and {b} differ beyond leading dimensions")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape((-1,) + shape).sum(axis=0)


# -- elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _wrap(a)
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim:
            _check_suffix(a.shape, c.shape)
        return _result(a.data + c, (a,), lambda g: (_reduce_to(g, a.shape),))
    a = _wrap(a, b)
    _check_suffix(a.shape, b.shape)
    return _result(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    return add(a, neg(b) if isinstance(b, Tensor) else -np.asarray(b))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _wrap(a)
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim:
            _check_suffix(a.shape, c.shape)
        return _result(a.data * c, (a,), lambda g: (_reduce_to(g * c, a.shape),))
    a = _wrap(a, b)
    _check_suffix(a.shape, b.shape)

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """``x + c`` for a constant ``c`` broadcastable to ``x`` (numpy rules)."""
    out = x.data + c
    if out.shape != x.shape:
        raise ValueError("constant must not change the tensor's shape")
    return _result(out.astype(x.dtype, copy=False), (x,), lambda g: (g,))


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """``x * c`` for a constant ``c`` broadcastable to ``x`` (numpy rules)."""
    out = x.data * c
    if out.shape != x.shape:
        raise ValueError("constant must not change the tensor's shape")
    return _result(out.astype(x.dtype, copy=False), (x,), lambda g: ((g * c).astype(x.dtype, copy=False),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise ValueError("log of a non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def gelu(x: Tensor) -> Tensor:
    flat = np.ascontiguousarray(x.data).reshape(-1)
    y = kernels.gelu(flat).reshape(x.shape)
    return _result(y, (x,), lambda g: (kernels.gelu_backward(flat, np.ascontiguousarray(g).reshape(-1)).reshape(x.shape),))


# -- shape ops ---------------------------------------------------------------
def reshape(x: Tensor, shape: tuple) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(x.data[idx]), (x,), bw)


def take(x: Tensor, indices) -> Tensor:
    """Gather rows along axis 0 (embedding lookup). Output shape ``indices.shape + x.shape[1:]``."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError("gather index out of range")

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        return (full,)

    return _result(x.data[idx], (x,), bw)


embedding = take


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- reductions --------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), bw)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    p = e / s
    return _result(out, (x,), lambda g: (np.expand_dims(g, axis) * p,))


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    """Explicit numpy-style broadcast; gradients are summed back."""
    out = np.broadcast_to(x.data, shape)
    lead = len(shape) - x.ndim
    keep = tuple(i + lead for i, n in enumerate(x.shape) if n == 1 and shape[i + lead] != 1)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        if keep:
            g = g.sum(axis=tuple(k - lead for k in keep), keepdims=True)
        return (np.ascontiguousarray(g),)

    return _result(np.ascontiguousarray(out), (x,), bw)


def mean_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    """Masked mean over axis -2: ``x`` is (..., T, H), ``mask`` is (..., T) of 0/1."""
    m = np.asarray(mask, dtype=x.dtype)
    if m.shape != x.shape[:-1]:
        raise ValueError(f"mask shape {m.shape} does not match {x.shape[:-1]}")
    counts = m.sum(axis=-1, keepdims=True)
    if (counts == 0).any():
        raise ValueError("mean_pool over an empty span")
    w = m / counts
    out = np.einsum("...t,...th->...h", w, x.data)
    return _result(out, (x,), lambda g: (w[..., None] * g[..., None, :],))


# -- linear algebra ----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least two dimensions")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ValueError(f"batched matmul needs equal batch dims, got {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _result(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    k = weight.shape[0]
    if x.shape[-1] != k:
        raise ValueError(f"linear: input size {x.shape[-1]} != weight rows {k}")
    x2 = x.data.reshape(-1, k)
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        grads = [(g2 @ weight.data.T).reshape(x.shape), x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _result(out, parents, bw)


# -- normalisation / probability -------------------------------------------
def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def _to_rows(arr: np.ndarray, axis: int):
    moved = np.moveaxis(arr, axis, -1)
    return np.ascontiguousarray(moved).reshape(-1, moved.shape[-1]), moved.shape


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    if not np.isfinite(x.data).all():
        raise NonFiniteError("softmax input is not finite")
    rows, mshape = _to_rows(x.data, axis)
    y_rows = kernels.softmax_rows(rows)
    y = np.moveaxis(y_rows.reshape(mshape), -1, axis)

    def bw(g):
        g_rows, _ = _to_rows(g, axis)
        gx = kernels.softmax_rows_backward(y_rows, g_rows)
        return (np.moveaxis(gx.reshape(mshape), -1, axis),)

    return _result(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _result(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ValueError(f"layer_norm: gain/bias must have shape ({h},)")
    rows = np.ascontiguousarray(x.data).reshape(-1, h)
    g_ = np.ascontiguousarray(gain.data, dtype=x.dtype)
    b_ = np.ascontiguousarray(bias.data, dtype=x.dtype)
    out, xhat, rstd = kernels.layer_norm_rows(rows, g_, b_, float(eps))

    def bw(g):
        gx, gg, gb = kernels.layer_norm_rows_backward(np.ascontiguousarray(g).reshape(-1, h), xhat, rstd, g_)
        return gx.reshape(x.shape), gg.astype(gain.dtype, copy=False), gb.astype(bias.dtype, copy=False)

    return _result(out.reshape(x.shape), (x, gain, bias), bw)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity along the last axis; leading dims must match."""
    if u.shape != v.shape:
        raise ValueError(f"cosine_similarity shape mismatch {u.shape} vs {v.shape}")
    nu = np.sqrt((u.data * u.data).sum(axis=-1))
    nv = np.sqrt((v.data * v.data).sum(axis=-1))
    if (nu == 0).any() or (nv == 0).any():
        raise ValueError("cosine similarity of a zero-norm vector")
    dot = (u.data * v.data).sum(axis=-1)
    cos = dot / (nu * nv)

    def bw(g):
        g_ = g[..., None]
        gu = g_ * (v.data / (nu * nv)[..., None] - cos[..., None] * u.data / (nu * nu)[..., None])
        gv = g_ * (u.data / (nu * nv)[..., None] - cos[..., None] * v.data / (nv * nv)[..., None])
        return gu, gv

    return _result(np.asarray(cos), (u, v), bw)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Negative log-likelihood of integer ``targets`` under row-wise softmax of (N, V) logits.

    Without ``weights`` this is the mean over rows; with per-row ``weights``
    it is the weighted sum.
    """
    t = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or t.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    n = t.shape[0]
    if n == 0:
        raise ValueError("cross_entropy over zero rows")
    if t.min() < 0 or t.max() >= logits.shape[1]:
        raise IndexError("cross_entropy target out of range")
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError("cross_entropy: weights must have one entry per row")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[np.arange(n), t]
    out = np.asarray((w * nll).sum(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(shifted - logz[:, None])
        p[np.arange(n), t] -= 1.0
        return ((p * (g * w)[:, None]).astype(logits.dtype, copy=False),)

    return _result(out, (logits,), bw)


def soft_cross_entropy(logits: Tensor, target_probs: np.ndarray) -> Tensor:
    """Mean over rows of ``-sum_j q_j log softmax(z)_j`` with a fixed target distribution ``q``."""
    q = np.asarray(target_probs, dtype=logits.dtype)
    if q.shape != logits.shape or logits.ndim != 2:
        raise ValueError(f"soft_cross_entropy: logits {logits.shape} vs targets {q.shape}")
    n = q.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = np.asarray(-(q * logp).sum(axis=1).mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        return ((p * q.sum(axis=1, keepdims=True) - q) * (g / n),)

    return _result(out, (logits,), bw)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 labels."""
    y = np.asarray(labels, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ValueError("bce_with_logits: label shape mismatch")
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    return _result(np.asarray(loss.mean(), dtype=z.dtype), (logits,), lambda g: ((p - y) * (g / n),))


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ValueError("mse: target shape mismatch")
    d = pred.data - t
    n = d.size
    return _result(np.asarray((d * d).mean(), dtype=pred.dtype), (pred,), lambda g: (d * (2.0 * g / n),))


# -- attention / regularisation --------------------------------------------
def attention(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray | None = None):
    """Scaled dot-product attention over the last two axes.

    ``q`` is (..., Tq, d), ``k``/``v`` are (..., Tk, d). ``bias`` is an additive
    constant broadcastable to (..., Tq, Tk); use a large negative value to mask.
    Returns the output tensor and the attention probabilities (numpy).
    """
    d = q.shape[-1]
    scale = 1.0 / np.sqrt(d)
    kt = np.swapaxes(k.data, -1, -2)
    scores = np.matmul(q.data, kt) * q.dtype.type(scale)
    if bias is not None:
        scores = scores + bias.astype(q.dtype, copy=False)
    rows = np.ascontiguousarray(scores).reshape(-1, scores.shape[-1])
    p = kernels.softmax_rows(rows).reshape(scores.shape)
    out = np.matmul(p, v.data)

    def bw(g):
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gv = np.matmul(np.swapaxes(p, -1, -2), g)
        gs = kernels.softmax_rows_backward(
            np.ascontiguousarray(p).reshape(rows.shape), np.ascontiguousarray(gp).reshape(rows.shape)
        ).reshape(scores.shape) * q.dtype.type(scale)
        return np.matmul(gs, k.data), np.matmul(np.swapaxes(gs, -1, -2), q.data), gv

    return _result(out, (q, k, v), bw), p


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return mul_const(x, keep)


def zeros_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
