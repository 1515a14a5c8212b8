"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a closure that maps the output
gradient to the input gradients. ``Tensor.backward`` walks the recorded
graph in reverse topological order, visiting each node once and summing
contributions from every path.

Broadcasting is deliberately narrow: two operands must have identical
shapes, or the shape of one must equal the trailing dimensions of the
other (broadcast over leading batch axes only). Anything else raises
:class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "topological_order",
    "grad_check",
    "grad_check_many",
    "add",
    "mul",
    "neg",
    "div",
    "matmul",
    "abs",
    "exp",
    "log",
    "sum",
    "mean",
    "concat",
    "slice_last",
    "take",
    "reshape",
    "transpose",
    "broadcast_to",
    "softmax",
    "log_softmax",
    "logsumexp",
    "sigmoid",
    "silu",
    "tanh",
    "softplus",
    "layer_norm",
    "conv1d_causal",
    "conv2d",
    "mean_pool2d",
    "max_pool2d",
    "embedding",
    "apply_mask",
    "l2_normalize",
    "cosine_similarity",
    "feature_scale",
    "selective_scan",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, step: int):
        self.step = step
        super().__init__(f"{op}: non-finite value at step {step}")


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection --------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- backward -------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every requires_grad ancestor.

        Gradients accumulate across calls; reset them with ``zero_grad``.
        """
        if self.data.size != 1:
            raise ShapeError("backward", self.shape, detail="loss must be a scalar")
        if not self.requires_grad:
            raise RuntimeError("backward: tensor does not require grad (no recorded graph)")
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None) -> "Tensor":
        return sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)

    def abs(self) -> "Tensor":
        return abs(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every parent before its children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


# -- broadcasting ------------------------------------------------------------

def _check_bcast(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) < len(b) and (len(a) == 0 or b[len(b) - len(a):] == a):
        return b
    if len(b) < len(a) and (len(b) == 0 or a[len(a) - len(b):] == b):
        return a
    raise ShapeError(op, a, b, detail="broadcasting only over leading batch axes")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_bcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_bcast("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(ad * bd, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def div(a, b) -> Tensor:
    """Elementwise ``a / b``; ``b`` may be a scalar or a tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_bcast("div", a.shape, b.shape)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward, "div")


def abs(a: Tensor) -> Tensor:
    # sign(0) == 0: the subgradient at the kink is taken as zero
    sign = np.sign(a.data)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: argument must be strictly positive")
    ad = a.data
    return Tensor._result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return Tensor._result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = expit(x)
    return Tensor._result(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),), "silu")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return Tensor._result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._result(np.logaddexp(0.0, x), (a,), lambda g: (g * expit(x),), "softplus")


def apply_mask(a: Tensor, mask) -> Tensor:
    """Multiply by a constant 0/1 vector along the last axis."""
    m = np.asarray(mask, dtype=np.float64)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("apply_mask: mask must be binary")
    _check_bcast("apply_mask", a.shape, m.shape)
    return Tensor._result(a.data * m, (a,), lambda g: (_unbroadcast(g * m, a.shape),), "mask")


# -- reductions and shape ops ------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return Tensor._result(a.data.sum(axis=axes), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, shape).copy(),)

    return Tensor._result(a.data.mean(axis=axes), (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    """Swap the last two axes, or apply an explicit permutation."""
    if axes is None:
        if a.ndim < 2:
            return a
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if shape[len(shape) - a.ndim:] != a.shape:
        raise ShapeError("broadcast_to", a.shape, shape, detail="only leading axes may be added")
    src = a.shape
    return Tensor._result(np.broadcast_to(a.data, shape).copy(), (a,),
                          lambda g: (_unbroadcast(g, src),), "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        s0 = tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]
        s1 = t.shape[:ax] + t.shape[ax + 1:]
        if t.ndim != nd or s0 != s1:
            raise ShapeError("concat", tensors[0].shape, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * nd
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """``a[..., start:stop]``."""
    n = a.shape[-1]
    if not 0 <= start <= stop <= n:
        raise ShapeError("slice_last", a.shape, detail=f"slice {start}:{stop} out of range")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return Tensor._result(a.data[..., start:stop], (a,), backward, "slice")


def _getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(np.array(a.data[idx]), (a,), backward, "getitem")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array."""
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    size = a.shape[ax]
    if idx.size and (idx.min() < -size or idx.max() >= size):
        raise IndexError(f"take: index out of range for axis of size {size}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        # move the gathered axis block to the front for add.at
        gm = np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim)))
        fm = np.moveaxis(full, ax, 0)
        np.add.at(fm, idx, gm)
        return (full,)

    return Tensor._result(np.take(a.data, idx, axis=ax), (a,), backward, "take")


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``."""
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape, detail="table must be 2-D")
    return take(table, indices, axis=0)


def feature_scale(x: Tensor, w: Tensor) -> Tensor:
    """``out[..., i, :] = x[..., i] * w[i, :]`` for x (..., n) and w (n, d)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2 or x.shape[-1:] != w.shape[:1]:
        raise ShapeError("feature_scale", x.shape, w.shape)
    xd, wd = x.data, w.data

    def backward(g):
        gx = (g * wd).sum(axis=-1) if x.requires_grad else None
        gw = _unbroadcast(g * xd[..., None], wd.shape) if w.requires_grad else None
        return gx, gw

    return Tensor._result(xd[..., None] * wd, (x, w), backward, "feature_scale")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product. ``b`` is 1-D, 2-D, or has the same leading axes as ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", a.shape, b.shape, detail="scalars not allowed")
    if a.shape[-1] != b.shape[-2 if b.ndim >= 2 else 0]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    if b.ndim > 2 and (a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]):
        raise ShapeError("matmul", a.shape, b.shape, detail="batch axes differ")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if b.ndim == 1:
            if a.requires_grad:
                ga = g[..., None] * bd
            if b.requires_grad:
                gb = (ad * g[..., None]).reshape(-1, bd.shape[0]).sum(axis=0)
            return ga, gb
        if a.ndim == 1:
            if a.requires_grad:
                ga = bd @ g
            if b.requires_grad:
                gb = np.outer(ad, g)
            return ga, gb
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if b.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._result(ad @ bd, (a, b), backward, "matmul")


# -- normalisation and softmax family ----------------------------------------

def softmax(a: Tensor) -> Tensor:
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._result(s, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    x = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=-1, keepdims=True))
    out = x - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return Tensor._result(out, (a,), backward, "log_softmax")


def logsumexp(a: Tensor, mask=None) -> Tensor:
    """log-sum-exp over the last axis, optionally over entries where ``mask`` is true."""
    x = a.data
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not m.any(axis=-1).all():
            raise DomainError("logsumexp: a row has no included entries")
        x = np.where(m, x, -np.inf)
    mx = x.max(axis=-1, keepdims=True)
    e = np.exp(x - mx)
    tot = e.sum(axis=-1, keepdims=True)
    out = (np.log(tot) + mx)[..., 0]
    w = e / tot

    def backward(g):
        return (g[..., None] * w,)

    return Tensor._result(out, (a,), backward, "logsumexp")


def _mean_last(x: np.ndarray) -> np.ndarray:
    # matmul is much faster than a ufunc reduction over a short trailing axis
    d = x.shape[-1]
    return (x @ np.full(d, 1.0 / d))[..., None]


def layer_norm(a: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    x = a.data
    d = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (d,):
            raise ShapeError("layer_norm", a.shape, p.shape)
    mu = _mean_last(x)
    xc = x - mu
    inv = 1.0 / np.sqrt(_mean_last(xc * xc) + eps)
    xhat = xc * inv
    gd = gamma.data if gamma is not None else None
    out = xhat * gd if gd is not None else xhat.copy()
    if beta is not None:
        out = out + beta.data
    parents = [a] + [p for p in (gamma, beta) if p is not None]

    def backward(g):
        dxhat = g * gd if gd is not None else g
        ga = inv * (dxhat - _mean_last(dxhat) - xhat * _mean_last(dxhat * xhat))
        grads = [ga]
        g2 = g.reshape(-1, d)
        if gamma is not None:
            grads.append(np.ones(g2.shape[0]) @ (g2 * xhat.reshape(-1, d)))
        if beta is not None:
            grads.append(np.ones(g2.shape[0]) @ g2)
        return tuple(grads)

    return Tensor._result(out, parents, backward, "layer_norm")


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    x = a.data
    n = np.maximum(np.sqrt((x * x).sum(axis=-1, keepdims=True)), eps)
    y = x / n

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return Tensor._result(y, (a,), backward, "l2_normalize")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity over the last axis."""
    if a.shape != b.shape:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    return sum(mul(l2_normalize(a), l2_normalize(b)), axis=-1)


# -- convolution and pooling -------------------------------------------------

def conv1d_causal(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Depthwise causal convolution along axis -2.

    x: (..., L, C), w: (K, C), b: (C,). Output position t sees inputs t-K+1..t.
    """
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError("conv1d_causal", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("conv1d_causal", w.shape, b.shape)
    K = w.shape[0]
    L = x.shape[-2]
    pad = [(0, 0)] * x.ndim
    pad[-2] = (K - 1, 0)
    xp = np.pad(x.data, pad)
    wd = w.data
    out = np.zeros(x.shape)
    for k in range(K):
        out += xp[..., k:k + L, :] * wd[k]
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gxp = np.zeros(xp.shape)
        gw = np.zeros(wd.shape)
        flat_g = g.reshape(-1, g.shape[-1])
        for k in range(K):
            gxp[..., k:k + L, :] += g * wd[k]
            gw[k] = (xp[..., k:k + L, :].reshape(-1, g.shape[-1]) * flat_g).sum(axis=0)
        grads = [gxp[..., K - 1:, :], gw]
        if b is not None:
            grads.append(flat_g.sum(axis=0))
        return tuple(grads)

    return Tensor._result(out, parents, backward, "conv1d_causal")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution. x: (B, H, W, Cin), w: (kh, kw, Cin, Cout)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[-1] != w.shape[2]:
        raise ShapeError("conv2d", x.shape, w.shape)
    kh, kw, cin, cout = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d", w.shape, detail="kernel sizes must be odd")
    if b is not None and b.shape != (cout,):
        raise ShapeError("conv2d", w.shape, b.shape)
    B, H, W_, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # (B, H, W, Cin, kh, kw) -> (B*H*W, kh*kw*Cin)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W_, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(B, H, W_, cout)
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gf = g.reshape(-1, cout)
        grads = []
        if x.requires_grad:
            gcols = (gf @ wmat.T).reshape(B, H, W_, kh, kw, cin)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + H, j:j + W_, :] += gcols[:, :, :, i, j, :]
            grads.append(gxp[:, ph:ph + H, pw:pw + W_, :])
        else:
            grads.append(None)
        grads.append((cols.T @ gf).reshape(w.shape))
        if b is not None:
            grads.append(gf.sum(axis=0))
        return tuple(grads)

    return Tensor._result(out, parents, backward, "conv2d")


def _pool_view(x: np.ndarray, k: int) -> tuple[np.ndarray, int, int]:
    B, H, W, C = x.shape
    Ho, Wo = H // k, W // k
    if Ho == 0 or Wo == 0:
        raise ShapeError("pool2d", x.shape, detail=f"spatial size smaller than window {k}")
    return x[:, :Ho * k, :Wo * k, :].reshape(B, Ho, k, Wo, k, C), Ho, Wo


def mean_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k mean pooling on (B, H, W, C); trailing rows/cols are cropped."""
    if x.ndim != 4:
        raise ShapeError("mean_pool2d", x.shape)
    v, Ho, Wo = _pool_view(x.data, k)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        exp_g = np.broadcast_to(g[:, :, None, :, None, :] / (k * k), v.shape)
        full[:, :Ho * k, :Wo * k, :] = exp_g.reshape(shape[0], Ho * k, Wo * k, shape[3])
        return (full,)

    return Tensor._result(v.mean(axis=(2, 4)), (x,), backward, "mean_pool2d")


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("max_pool2d", x.shape)
    v, Ho, Wo = _pool_view(x.data, k)
    out = v.max(axis=(2, 4))
    hit = v == out[:, :, None, :, None, :]
    share = hit / hit.sum(axis=(2, 4), keepdims=True)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, :Ho * k, :Wo * k, :] = (share * g[:, :, None, :, None, :]).reshape(
            shape[0], Ho * k, Wo * k, shape[3])
        return (full,)

    return Tensor._result(out, (x,), backward, "max_pool2d")


# -- selective state-space scan ----------------------------------------------

def selective_scan(u: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, C: Tensor,
                   D: Tensor) -> Tensor:
    """Input-dependent diagonal SSM recurrence, run left to right.

    Shapes: u, delta (..., L, Din); A (Din, S); Bm, C (..., L, S); D (Din,).
    Per channel d and state s::

        h_t = exp(delta_t[d] A[d,s]) h_{t-1} + delta_t[d] Bm_t[s] u_t[d],  h_0 = 0
        y_t[d] = sum_s C_t[s] h_t[d,s] + D[d] u_t[d]
    """
    if u.shape != delta.shape or u.ndim < 2:
        raise ShapeError("selective_scan", u.shape, delta.shape)
    din, S = A.shape
    if u.shape[-1] != din or D.shape != (din,):
        raise ShapeError("selective_scan", u.shape, A.shape, D.shape)
    if Bm.shape != u.shape[:-1] + (S,) or C.shape != Bm.shape:
        raise ShapeError("selective_scan", Bm.shape, C.shape, detail=f"expected {u.shape[:-1] + (S,)}")
    lead = u.shape[:-2]
    L = u.shape[-2]
    # time-major copies so each step reads a contiguous slab
    ud = np.ascontiguousarray(np.moveaxis(u.data.reshape(-1, L, din), 1, 0))   # (L, nb, din)
    dd = np.ascontiguousarray(np.moveaxis(delta.data.reshape(-1, L, din), 1, 0))
    bd = np.ascontiguousarray(np.moveaxis(Bm.data.reshape(-1, L, S), 1, 0))     # (L, nb, S)
    cd = np.ascontiguousarray(np.moveaxis(C.data.reshape(-1, L, S), 1, 0))
    Ad, Dd = A.data, D.data
    nb = ud.shape[1]

    dA = np.exp(dd[..., None] * Ad)                          # (L, nb, din, S)
    du = dd * ud
    hs = du[..., None] * bd[:, :, None, :]                   # dBu, overwritten by h in place
    for t in range(1, L):
        hs[t] += dA[t] * hs[t - 1]
    if not np.isfinite(hs).all():
        bad = ~np.isfinite(hs).reshape(L, -1).all(axis=1)
        raise NonFiniteError("selective_scan", int(np.argmax(bad)))
    y = (hs @ cd[..., None])[..., 0] + Dd * ud               # (L, nb, din)

    def backward(g):
        gy = np.ascontiguousarray(np.moveaxis(g.reshape(nb, L, din), 1, 0))
        gC = (gy[:, :, None, :] @ hs)[:, :, 0]              # (L, nb, S)
        gh_all = gy[..., None] * cd[:, :, None, :]
        for t in range(L - 2, -1, -1):
            gh_all[t] += gh_all[t + 1] * dA[t + 1]
        g_dA = np.zeros_like(hs)                             # d/d(delta*A)
        g_dA[1:] = gh_all[1:] * hs[:-1] * dA[1:]
        g_A = (g_dA * dd[..., None]).sum(axis=(0, 1))
        g_delta = (g_dA[..., None, :] @ Ad[..., None])[..., 0, 0]
        gB = (du[:, :, None, :] @ gh_all)[:, :, 0]           # dBu = delta * u * B
        g_du = (gh_all @ bd[..., None])[..., 0]              # d/d(delta*u)
        g_delta = g_delta + g_du * ud
        g_u = g_du * dd + gy * Dd
        g_D = (gy * ud).sum(axis=(0, 1))

        def back(a, last):
            return np.moveaxis(a, 0, 1).reshape(lead + (L, last))

        return (back(g_u, din), back(g_delta, din), g_A, back(gB, S), back(gC, S), g_D)

    y = np.moveaxis(y, 0, 1)
    return Tensor._result(y.reshape(lead + (L, din)), (u, delta, A, Bm, C, D), backward,
                          "selective_scan")


# -- gradient checking -------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``x`` must be a requires_grad tensor that ``f`` reads (directly or via a
    closure). Error per coordinate is ``|a - n| / max(1, |n|)``.
    """
    if not x.requires_grad:
        raise ValueError("grad_check: x must require grad")
    saved = x.grad
    x.grad = None
    loss = f(x)
    loss.backward()
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    x.grad = saved
    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
    err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def grad_check_many(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """``grad_check`` over several tensors read by a closure; returns the max error."""
    worst = 0.0
    for p in params:
        worst = max(worst, grad_check(lambda _p: f(), p, eps))
    return worst
