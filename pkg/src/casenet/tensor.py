"""Dense float64 tensors with tape-style reverse-mode differentiation.

Every operation returns a fresh :class:`Tensor`. When any input requires a
gradient, the result records its parents and a backward closure; the
monotonically increasing ``node_id`` doubles as a topological order, so
:func:`backward` simply walks reachable nodes from newest to oldest.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes, a Python scalar, or an operand of the same rank whose extents are
either equal or 1 (keepdims style, e.g. a per-channel ``[B, D, 1]`` gate
against ``[B, D, L]``). Everything else needs an explicit :func:`reshape`.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

MASK_VALUE = -1e30
_MASK_THRESHOLD = -1e29

_ids = itertools.count()


class Tensor:
    """An n-dimensional float64 array participating in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, _op: str = "leaf",
                 _parents: tuple = (), _backward: Optional[Callable] = None, _copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=True) if _copy else data
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_ids)
        self._op = _op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

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
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output; ``grad_fn(g)`` returns one gradient per parent."""
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op, _copy=False)
    return Tensor(data, requires_grad=True, _op=op, _parents=tuple(parents),
                  _backward=grad_fn, _copy=False)


@dataclass
class Graph:
    """Nodes reachable from a root, in insertion (= topological) order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        seen = {root.node_id: root}
        stack = [root]
        while stack:
            node = stack.pop()
            for p in node._parents:
                if p.requires_grad and p.node_id not in seen:
                    seen[p.node_id] = p
                    stack.append(p)
        return cls(nodes=[seen[k] for k in sorted(seen)])


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers; call ``zero_grad``
    (or build fresh leaves) between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph.from_root(loss)
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg


# ---------------------------------------------------------------- elementwise

def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if a == () or b == ():
        return a or b
    if len(a) == len(b) and all(x == y or x == 1 or y == 1 for x, y in zip(a, b)):
        return tuple(max(x, y) for x, y in zip(a, b))
    raise DimensionError(f"shapes {a} and {b} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    return _result(ad * bd, "mul", (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape) if ra else None,
                              _unbroadcast(g * ad, bd.shape) if rb else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, "div", (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, "scale", (x,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _result(np.where(on, x.data, 0.0), "relu", (x,), lambda g: (g * on,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, "sqrt", (x,), lambda g: (g * 0.5 / out,))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    keep = x.data >= lo
    return _result(np.where(keep, x.data, lo), "clamp_min", (x,), lambda g: (g * keep,))


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or no generator is given."""
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions and shape

def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def reduce_sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is None:
        return _result(np.asarray(x.data.sum()), "sum", (x,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = _check_axis(x, axis)
    out = x.data.sum(axis=ax, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, "sum", (x,), grad_fn)


def reduce_mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[_check_axis(x, axis)]
    return scale(reduce_sum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape).copy()
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _result(out, "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), "transpose", (x,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = _check_axis(tensors[0], axis)
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _result(out, "concat", tensors, lambda g: tuple(np.split(g, cuts, axis=ax)))


def pad_time(x: Tensor, left: int, right: int = 0) -> Tensor:
    """Zero-pad the last axis."""
    if left == 0 and right == 0:
        return x
    width = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    n = x.shape[-1]
    return _result(np.pad(x.data, width), "pad", (x,),
                   lambda g: (g[..., left:left + n].copy(),))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy-style broadcasting of leading extents."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            if ad.ndim == 2 and g.ndim > 2 and bd.ndim == g.ndim:
                # shared matrix against a batch: contract batch and column axes in one gemm
                axes = [i for i in range(g.ndim) if i != g.ndim - 2]
                ga = np.tensordot(g, bd, axes=(axes, axes))
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and g.ndim > 2 and ad.ndim == g.ndim:
                axes = list(range(g.ndim - 1))
                gb = np.tensordot(ad, g, axes=(axes, axes))
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _result(out, "matmul", (a, b), grad_fn)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
    """Valid 1-D cross-correlation; ``x`` is ``[C_in, L]`` or ``[B, C_in, L]``.

    ``y[c, t] = b[c] + sum_{c', i} w[c, c', i] * x[c', t*stride + i*dilation]``.
    """
    if stride < 1 or dilation < 1:
        raise ContractError(f"stride and dilation must be >= 1, got {stride}, {dilation}")
    if w.ndim != 3 or b.shape != (w.shape[0],):
        raise DimensionError(f"conv1d weight {w.shape} / bias {b.shape} malformed")
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3 or xd.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d input {x.shape} incompatible with weight {w.shape}")
    c_out, c_in, k = w.shape
    span = (k - 1) * dilation + 1
    n_in = xd.shape[2]
    if n_in < span:
        raise DimensionError(f"conv1d input length {n_in} < receptive span {span} "
                             f"(k={k}, dilation={dilation})")
    n_out = (n_in - span) // stride + 1
    idx = np.arange(k)[:, None] * dilation + np.arange(n_out)[None, :] * stride
    cols = xd[:, :, idx].reshape(xd.shape[0], c_in * k, n_out)
    w2 = w.data.reshape(c_out, c_in * k)
    out = np.matmul(w2, cols) + b.data[None, :, None]
    if unbatched:
        out = out[0]

    def grad_fn(g):
        g3 = g[None] if unbatched else g
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3).reshape(g3.shape[0], c_in, k, n_out)
            gx3 = np.zeros_like(xd)
            for i in range(k):
                gx3[:, :, idx[i]] += gcols[:, :, i, :]
            gx = gx3[0] if unbatched else gx3
        if w.requires_grad:
            gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if b.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return gx, gw, gb

    return _result(out, "conv1d", (x, w, b), grad_fn)


def masked_softmax(scores: Tensor, mask: Tensor) -> Tensor:
    """Row softmax of ``scores + mask`` over the last axis.

    ``mask`` is ``[L, L]`` with 0 for visible and :data:`MASK_VALUE` (or -inf)
    for hidden entries; hidden entries come out as exact zeros.
    """
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if m.shape != scores.shape[-2:]:
        raise DimensionError(f"mask {m.shape} does not match scores {scores.shape}")
    hidden = m < _MASK_THRESHOLD
    if hidden.all(axis=-1).any():
        raise ContractError("masked_softmax: a row is fully masked")
    z = scores.data + np.where(hidden, MASK_VALUE, m)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z) * ~hidden
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, "masked_softmax", (scores,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _result(out, "log_softmax", (x,),
                   lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = 1, eps: float = 1e-5) -> Tensor:
    """Normalize over one axis, then apply per-feature gain and bias (1-D along ``axis``)."""
    ax = _check_axis(x, axis)
    n = x.shape[ax]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm params {gain.shape}/{bias.shape} vs extent {n}")
    bshape = [1] * x.ndim
    bshape[ax] = n
    gd = gain.data.reshape(bshape)
    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=ax, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gd + bias.data.reshape(bshape)
    others = tuple(i for i in range(x.ndim) if i != ax)

    def grad_fn(g):
        gg = g * gd
        gx = inv * (gg - gg.mean(axis=ax, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=ax, keepdims=True))
        return gx, (g * xhat).sum(axis=others), g.sum(axis=others)

    return _result(out, "layer_norm", (x, gain, bias), grad_fn)


# ---------------------------------------------------------------- gradient oracle

def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between ``backward`` and central differences of ``f`` at ``x``.

    Relative error per element is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    if not np.isfinite(out.data).all():
        raise NumericalError("finite_diff_check: f(x) is not finite")
    backward(out)
    analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad
    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(base)).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(base)).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"finite_diff_check: NaN/inf at element "
                                 f"{np.unravel_index(i, base.shape)}")
        num_flat[i] = (fp - fm) / (2.0 * eps)
    if not np.isfinite(analytic).all():
        bad = np.argwhere(~np.isfinite(analytic))[0]
        raise NumericalError(f"finite_diff_check: non-finite analytic gradient at {tuple(bad)}")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
