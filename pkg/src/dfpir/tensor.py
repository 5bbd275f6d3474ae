"""Minimal dense tensor with reverse-mode differentiation.

Only the operations the restoration network needs are provided. Layout is
always batch x channels x height x width for image tensors. Every op checks
its output for non-finite values and raises ``FloatingPointError`` instead of
letting NaN/Inf propagate silently.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from . import _kernels

DTYPES = {"f32": np.float32, "f64": np.float64}

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Ops inside this block record nothing (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not 0 <= arr.ndim <= 4:
            raise ShapeError(f"rank must be <= 4, got {arr.ndim}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    dtype = parents[0].dtype
    if data.dtype != dtype:
        data = data.astype(dtype)
    total = float(np.add.reduce(data, axis=None)) if data.size else 0.0
    if not math.isfinite(total) and not np.isfinite(data).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_dtypes(*ts: Tensor) -> None:
    d = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != d:
            raise TypeError(f"dtype mismatch: {d} vs {t.dtype}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# tape

@dataclass
class Tape:
    """Topologically ordered record of the nodes reachable from a root."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            g = g.astype(node.dtype, copy=True)
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, "mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx of x*Phi(x)."""
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with Phi from erf."""
    xd = x.data
    out = 0.5 * xd * (1.0 + erf(xd / _SQRT2))
    return _result(out, "gelu", (x,), lambda g: (g * gelu_grad(xd),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def abs_(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return _result(np.abs(x.data), "abs", (x,), lambda g: (g * s,))


# ---------------------------------------------------------------------------
# reductions

def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), "sum", (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _result(np.asarray(x.data.mean()), "mean", (x,),
                   lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; subgradient 0 where pred == target."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shape mismatch {pred.shape} vs {target.shape}")
    _check_dtypes(pred, target)
    diff = pred.data - target.data
    n = diff.size
    s = np.sign(diff)

    def bw(g):
        gp = s * (g / n)
        return gp, -gp

    return _result(np.asarray(np.abs(diff).mean()), "l1_loss", (pred, target), bw)


# ---------------------------------------------------------------------------
# shape ops

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose_last(x: Tensor) -> Tensor:
    return _result(np.swapaxes(x.data, -1, -2), "transpose", (x,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def concat(ts: Sequence[Tensor], axis: int = 1) -> Tensor:
    _check_dtypes(*ts)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in ts], axis=axis), "concat", tuple(ts),
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not cover axis of length {x.shape[axis]}")
    outs = []
    start = 0
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + n)
        sl = tuple(sl)
        shape = x.shape

        def bw(g, sl=sl, shape=shape):
            full = np.zeros(shape, dtype=g.dtype)
            full[sl] = g
            return (full,)

        outs.append(_result(np.ascontiguousarray(x.data[sl]), "split", (x,), bw))
        start += n
    return outs


def pixel_unshuffle(x: Tensor, r: int = 2) -> Tensor:
    """Space-to-depth: B x C x H x W -> B x C*r*r x H/r x W/r."""
    b, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"pixel_unshuffle needs H, W divisible by {r}; got {h}x{w}")
    out = x.data.reshape(b, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    out = out.reshape(b, c * r * r, h // r, w // r)

    def bw(g):
        gi = g.reshape(b, c, r, r, h // r, w // r).transpose(0, 1, 4, 2, 5, 3)
        return (gi.reshape(b, c, h, w),)

    return _result(out, "pixel_unshuffle", (x,), bw)


def pixel_shuffle(x: Tensor, r: int = 2) -> Tensor:
    """Depth-to-space, exact inverse of pixel_unshuffle."""
    b, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle needs channels divisible by {r * r}; got {c}")
    co = c // (r * r)
    out = x.data.reshape(b, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    out = out.reshape(b, co, h * r, w * r)

    def bw(g):
        gi = g.reshape(b, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
        return (gi.reshape(b, c, h, w),)

    return _result(out, "pixel_shuffle", (x,), bw)


def _as_perm_rows(perm, batch: int, n: int) -> np.ndarray:
    p = np.asarray(perm, dtype=np.int64)
    if p.ndim == 1:
        p = np.broadcast_to(p, (batch, n))
    if p.shape != (batch, n):
        raise ShapeError(f"permutation shape {p.shape} does not match ({batch}, {n})")
    if not (np.sort(p, axis=1) == np.arange(n)).all():
        raise ValueError("permutation is not a bijection")
    return p


def permute_channels(x: Tensor, perm) -> Tensor:
    """Output channel i = input channel perm[i]. ``perm`` may be per-sample (B x C)."""
    b, c = x.shape[:2]
    p = _as_perm_rows(perm, b, c)
    rows = np.arange(b)[:, None]
    out = x.data[rows, p]

    def bw(g):
        gi = np.empty_like(g)
        gi[rows, p] = g
        return (gi,)

    return _result(out, "permute_channels", (x,), bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """x: B x N, idx: B x K -> out[b, k] = x[b, idx[b, k]]."""
    rows = np.arange(x.shape[0])[:, None]
    shape = x.shape

    def bw(g):
        gi = np.zeros(shape, dtype=g.dtype)
        np.add.at(gi, (rows, idx), g)
        return (gi,)

    return _result(x.data[rows, idx], "gather_rows", (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (..., k, n); leading dims broadcast."""
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, "matmul", (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x: N x in, w: out x in, b: out."""
    _check_dtypes(x, w)
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear expects input width {w.shape[1]}, got {x.shape[-1]}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ wd
        gw = g.T @ xd
        return (gx, gw) if b is None else (gx, gw, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, "linear", parents, bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; every slice along ``axis`` sums to 1."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, "softmax", (x,), bw)


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1, allow_empty: bool = False) -> Tensor:
    """Softmax over entries where mask == 1; masked entries get exactly 0.

    Equivalent to adding -inf at masked positions, but never materializes
    non-finite values. A slice with no kept entries raises, or becomes all
    zeros (with zero gradient) when ``allow_empty`` is set.
    """
    keep = np.broadcast_to(mask, x.shape).astype(bool)
    nonempty = keep.any(axis=axis, keepdims=True)
    if not allow_empty and not nonempty.all():
        raise ValueError("masked_softmax: a slice has no kept entries")
    z = np.where(keep, x.data, -np.inf)
    z = z - np.where(nonempty, z.max(axis=axis, keepdims=True), 0.0)
    e = np.where(keep, np.exp(np.where(keep, z, 0.0)), 0.0)
    total = e.sum(axis=axis, keepdims=True)
    y = e / np.where(nonempty, total, 1.0)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, "masked_softmax", (x,), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / max(||x||, eps) along ``axis``."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom
    clipped = norm < eps

    def bw(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        gx = np.where(clipped, g, g - y * proj) / denom
        return (gx,)

    return _result(y, "l2_normalize", (x,), bw)


# ---------------------------------------------------------------------------
# convolutions and normalization

def conv_pointwise(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution. x: B x C x H x W, weight: C' x C, bias: C'."""
    b, c, h, w = x.shape
    if weight.shape[1] != c:
        raise ShapeError(f"conv_pointwise: weight expects {weight.shape[1]} channels, input has {c}")
    parents = (x, weight) if bias is None else (x, weight, bias)
    _check_dtypes(*parents)
    co = weight.shape[0]
    xf = x.data.reshape(b, c, h * w)
    wd = weight.data
    out = wd @ xf
    if bias is not None:
        out += bias.data[:, None]

    def bw(g):
        gf = g.reshape(b, co, h * w)
        gx = (wd.T @ gf).reshape(b, c, h, w) if x.requires_grad else None
        gw = np.einsum("bop,bcp->oc", gf, xf, optimize=True) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, gf.sum(axis=(0, 2))

    return _result(out.reshape(b, co, h, w), "conv_pointwise", parents, bw)


def conv_depthwise3x3(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 3x3 correlation with zero padding 1. weight: C x 3 x 3."""
    b, c, h, w = x.shape
    if weight.shape != (c, 3, 3):
        raise ShapeError(f"conv_depthwise3x3: weight shape {weight.shape} does not match C={c}")
    parents = (x, weight) if bias is None else (x, weight, bias)
    _check_dtypes(*parents)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    wd = np.ascontiguousarray(weight.data)
    out = np.zeros((b, c, h, w), dtype=x.dtype)
    _kernels.depthwise3x3_forward(xp, wd, out)
    if bias is not None:
        out += bias.data[:, None, None]

    def bw(g):
        g = np.ascontiguousarray(g)
        gw = np.empty_like(wd)
        _kernels.depthwise3x3_grad_weight(xp, g, gw)
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            _kernels.depthwise3x3_grad_input(g, wd, gxp)
            gx = gxp[:, :, 1:-1, 1:-1]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, "conv_depthwise3x3", parents, bw)


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Dense 3x3 convolution, zero padding 1. weight: C' x C x 3 x 3."""
    b, c, h, w = x.shape
    co = weight.shape[0]
    if weight.shape[1:] != (c, 3, 3):
        raise ShapeError(f"conv3x3: weight shape {weight.shape} does not match C={c}")
    parents = (x, weight) if bias is None else (x, weight, bias)
    _check_dtypes(*parents)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, 9, h, w), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, 3 * i + j] = xp[:, :, i:i + h, j:j + w]
    cols = cols.reshape(b, c * 9, h * w)
    w2 = weight.data.reshape(co, c * 9)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]

    def bw(g):
        gf = g.reshape(b, co, h * w)
        gw = np.einsum("bop,bkp->ok", gf, cols, optimize=True).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ gf).reshape(b, c, 9, h, w)
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i:i + h, j:j + w] += gcols[:, :, 3 * i + j]
            gx = gxp[:, :, 1:-1, 1:-1]
        if bias is None:
            return gx, gw
        return gx, gw, gf.sum(axis=(0, 2))

    return _result(out.reshape(b, co, h, w), "conv3x3", parents, bw)


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize every pixel across the channel axis, then apply gamma/beta."""
    _check_dtypes(x, gamma, beta)
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return gx, ggamma, gbeta

    return _result(out, "layer_norm_channels", (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# discrete selections (no gradient)

def topk_indices(v, k: int) -> list[int]:
    """Indices of the k largest entries, descending; ties go to the lower index."""
    arr = np.asarray(v.data if isinstance(v, Tensor) else v).ravel()
    n = arr.size
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    order = np.argsort(-arr, kind="stable")
    return [int(i) for i in order[:k]]


# ---------------------------------------------------------------------------
# verification oracle

def finite_diff_grad(f: Callable[[], float], x: Tensor, h: float = 1e-5,
                     indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the entries of ``x`` (perturbed in place).

    ``f`` takes no arguments and must read ``x.data`` when called. If
    ``indices`` is given, only those flat positions are evaluated; the rest
    of the returned array is zero.
    """
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)
