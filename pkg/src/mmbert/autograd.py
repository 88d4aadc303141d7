"""Dense-tensor reverse-mode automatic differentiation.

Tensors store float32 data by default (float64 is supported and used by the
finite-difference oracle). Every differentiable operation links its output to
its inputs with a backward rule; ``backward`` replays those links in reverse
creation order, which is a valid topological order because an operation's
inputs always exist before its output.

Reductions (sum, mean, softmax denominators, layer-norm statistics)
accumulate in float64 regardless of storage dtype.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, StateError

DEFAULT_DTYPE = np.float32
_ALLOWED_DTYPES = (np.float32, np.float64)

_node_ids = itertools.count()
_grad_enabled = True
_check_finite = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracle evals)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_check_finite(enabled: bool) -> None:
    """Toggle checked mode: every op output is scanned for NaN/Inf."""
    global _check_finite
    _check_finite = bool(enabled)


class Tensor:
    """A dense float array that can participate in reverse-mode autodiff.

    ``tape_id`` is the node's position in creation order; sorting reachable
    nodes by it recovers the forward tape.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape_id", "retains_grad",
                 "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if arr.dtype.type not in _ALLOWED_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_id = next(_node_ids)
        self.retains_grad = False
        self._parents: tuple[Tensor, ...] | None = None
        self._backward: Callable[[np.ndarray], tuple] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def is_leaf(self) -> bool:
        return self._parents is None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def retain_grad(self) -> "Tensor":
        self.retains_grad = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, _as_tensor(1.0 / float(other), self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


class Tape:
    """Topologically ordered view of the graph feeding a root tensor.

    Nodes are sorted by creation id, so every operation's inputs precede it.
    """

    def __init__(self, root: Tensor):
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            if node._parents is not None:
                stack.extend(node._parents)
        nodes.sort(key=lambda t: t.tape_id)
        self.nodes = nodes

    def validate(self) -> None:
        position = {id(n): i for i, n in enumerate(self.nodes)}
        for i, node in enumerate(self.nodes):
            for parent in node._parents or ():
                if position[id(parent)] >= i:
                    raise StateError("tape order violated: input recorded after its consumer")


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients accumulate additively across fan-out. Non-leaf grads are
    discarded unless the tensor called ``retain_grad()``. The graph is
    consumed afterwards; a second backward through it raises ``StateError``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and (node.is_leaf() or node.retains_grad):
            node.grad = g if node.grad is None else node.grad + g
        if node._parents is None:
            continue
        if node._backward is None:
            raise StateError("backward called twice through the same tape")
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._backward = None


# -- construction helpers ----------------------------------------------------

def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype), dtype=dtype)


def _result_dtype(*tensors: Tensor):
    return np.float64 if any(t.data.dtype == np.float64 for t in tensors) else np.float32


def _coerce(t: Tensor, dtype) -> np.ndarray:
    return t.data if t.data.dtype == dtype else t.data.astype(dtype)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced in checked mode")
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _check_suffix_broadcast(sa: tuple, sb: tuple) -> tuple:
    """Only leading-dimension broadcasting is allowed: the smaller shape must
    equal the trailing suffix of the larger one."""
    if sa == sb:
        return sa
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        raise ShapeError(f"shapes {sa} and {sb} do not broadcast (leading dims only)")
    return big


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra)), dtype=np.float64).astype(grad.dtype)


# -- elementwise and structural ops -----------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix_broadcast(a.shape, b.shape)
    dtype = _result_dtype(a, b)
    data = _coerce(a, dtype) + _coerce(b, dtype)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix_broadcast(a.shape, b.shape)
    dtype = _result_dtype(a, b)
    data = _coerce(a, dtype) - _coerce(b, dtype)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix_broadcast(a.shape, b.shape)
    dtype = _result_dtype(a, b)
    ad, bd = _coerce(a, dtype), _coerce(b, dtype)
    data = ad * bd

    def back(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _node(data, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    _check_suffix_broadcast(a.shape[:-2], b.shape[:-2])
    dtype = _result_dtype(a, b)
    ad, bd = _coerce(a, dtype), _coerce(b, dtype)
    data = np.matmul(ad, bd)

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(data, (a, b), back)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"default transpose needs >=2-d input, got {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def back(g):
        return (np.transpose(g, inverse),)

    return _node(data, (a,), back)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)
    original = a.shape

    def back(g):
        return (g.reshape(original),)

    return _node(data, (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty list")
    dtype = _result_dtype(*tensors)
    data = np.concatenate([_coerce(t, dtype) for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        pieces = []
        for i in range(len(sizes)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(index)])
        return tuple(pieces)

    return _node(data, tuple(tensors), back)


def take(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing with gradient scatter."""
    data = a.data[key]
    shape = a.shape

    def back(g):
        buf = np.zeros(shape, dtype=g.dtype)
        buf[key] = g
        return (buf,)

    return _node(np.ascontiguousarray(data), (a,), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup with scatter-add backward (duplicate ids accumulate)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range for table of {table.shape[0]} rows")
    data = table.data[ids] if ids.size else np.zeros(ids.shape + table.shape[1:], dtype=table.data.dtype)

    def back(g):
        buf = np.zeros(table.shape, dtype=g.dtype)
        if ids.size:
            np.add.at(buf, ids, g)
        return (buf,)

    return _node(data, (table,), back)


# -- reductions ---------------------------------------------------------------

def _restore_axes(g: np.ndarray, axis, keepdims: bool, shape: tuple) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)
    shape = a.shape

    def back(g):
        return (_restore_axes(g, axis, keepdims, shape).astype(g.dtype),)

    return _node(np.asarray(data), (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)
    shape = a.shape
    count = a.data.size if axis is None else a.shape[axis]

    def back(g):
        return ((_restore_axes(g, axis, keepdims, shape) / count).astype(g.dtype),)

    return _node(np.asarray(data), (a,), back)


# -- nonlinearities and losses -------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    p = (e / z).astype(x.data.dtype)

    def back(g):
        inner = (g * p).sum(axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
        return (p * (g - inner),)

    return _node(p, (x,), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (keeps gradcheck tolerances consistent)."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    data = 0.5 * xd * (1.0 + t)

    def back(g):
        dt = (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _node(data.astype(xd.dtype), (x,), back)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def back(g):
        return (g * (1.0 - t ** 2),)

    return _node(t, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Zero mean / unit variance over the last dimension, then affine."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},), got {gamma.shape}/{beta.shape}")
    dtype = _result_dtype(x, gamma, beta)
    xd = _coerce(x, dtype)
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64)
    centered = xd - mu
    var = np.mean(centered.astype(np.float64) ** 2, axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(dtype)
    xhat = (centered * inv).astype(dtype)
    gd, bd = _coerce(gamma, dtype), _coerce(beta, dtype)
    data = xhat * gd + bd

    def back(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes, dtype=np.float64).astype(g.dtype)
        dbeta = g.sum(axis=reduce_axes, dtype=np.float64).astype(g.dtype)
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True, dtype=np.float64).astype(g.dtype)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(g.dtype)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _node(data, (x, gamma, beta), back)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    dtype = _result_dtype(pred, target)
    diff = _coerce(pred, dtype) - _coerce(target, dtype)
    n = diff.size
    data = np.asarray(np.mean(diff.astype(np.float64) ** 2)).astype(dtype)

    def back(g):
        base = (2.0 / n) * diff * g
        return base, -base

    return _node(data, (pred, target), back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax at the label index.

    Accepts a single logit vector with an int label, or a batch ``[B, C]``
    with an int array of length ``B``.
    """
    squeeze = logits.ndim == 1
    ld = logits.data[None, :] if squeeze else logits.data
    if ld.ndim != 2:
        raise ShapeError(f"cross_entropy expects [C] or [B, C] logits, got {logits.shape}")
    batch, n_classes = ld.shape
    labels_arr = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels_arr.shape != (batch,):
        raise ValueError(f"expected {batch} labels, got shape {labels_arr.shape}")
    if labels_arr.size and (labels_arr.min() < 0 or labels_arr.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    shifted = (ld - ld.max(axis=-1, keepdims=True)).astype(np.float64)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = shifted[np.arange(batch), labels_arr]
    data = np.asarray((lse - picked).mean()).astype(logits.data.dtype)
    probs = np.exp(shifted - lse[:, None]).astype(logits.data.dtype)

    def back(g):
        grad = probs.copy()
        grad[np.arange(batch), labels_arr] -= 1.0
        grad *= g / batch
        return (grad[0] if squeeze else grad,)

    return _node(data, (logits,), back)


# -- finite-difference oracle --------------------------------------------------

def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor], *,
                      step: float = 1e-3, max_coords_per_param: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    tensor. Parameters are temporarily promoted to float64 so the oracle's
    accumulation noise stays far below the 1e-3 tolerance. Returns the max
    over perturbed coordinates of ``|analytic - numeric| / max(|analytic|,
    |numeric|, 1e-8)``.
    """
    params = list(params)
    saved = [p.data for p in params]
    saved_grads = [p.grad for p in params]
    if max_coords_per_param is not None and rng is None:
        raise ValueError("coordinate sampling requires an rng")
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
        loss = f()
        backward(loss)
        analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

        worst = 0.0
        with no_grad():
            for p, ana in zip(params, analytic):
                flat = p.data.reshape(-1)
                coords = np.arange(flat.size)
                if max_coords_per_param is not None and flat.size > max_coords_per_param:
                    coords = rng.choice(flat.size, size=max_coords_per_param, replace=False)
                for idx in coords:
                    original = flat[idx]
                    flat[idx] = original + step
                    up = float(f().data)
                    flat[idx] = original - step
                    down = float(f().data)
                    flat[idx] = original
                    numeric = (up - down) / (2.0 * step)
                    a = float(ana.reshape(-1)[idx])
                    err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                    if err > worst:
                        worst = err
        return worst
    finally:
        for p, data, grad in zip(params, saved, saved_grads):
            p.data = data
            p.grad = grad
