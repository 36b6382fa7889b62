"""Dense tensors with reverse-mode automatic differentiation.

Every array-valued quantity in the models is a :class:`Tensor`.  Operations
build a graph of parent links and backward closures; :func:`backward` walks
that graph once in reverse topological order.

Only two implicit broadcasts exist: adding a bias-like tensor whose shape
equals the trailing shape of the other operand, and multiplying by a Python
scalar.  Any other shape disagreement raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True
# When not None, nonsmooth ops append their branch decisions here so that a
# finite-difference checker can tell whether a perturbation crossed a kink.
_kink_trace: list | None = None


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def trace_kinks():
    """Collect the branch decisions (relu masks, pooling argmaxes) of a forward."""
    global _kink_trace
    prev = _kink_trace
    _kink_trace = []
    try:
        yield _kink_trace
    finally:
        _kink_trace = prev


def _record_kink(arr: np.ndarray) -> None:
    if _kink_trace is not None:
        _kink_trace.append(arr.copy())


class Tensor:
    """N-dimensional array that optionally participates in gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


# -- reverse pass ---------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(
    loss: Tensor, params: Sequence[Tensor] | None = None, retain_graph: bool = True
) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Gradients are accumulated into ``.grad`` of every leaf that requires
    grad.  The returned mapping covers ``params`` when given (unreachable ones
    get zeros), otherwise every reached leaf.  With ``retain_graph=False``
    each node's saved activations are released as soon as it has been swept,
    which bounds peak memory but leaves the graph unusable afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: list[Tensor] = []
    order = _topo_order(loss)
    while order:
        node = order.pop()
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves.append(node)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"internal: gradient shape {pg.shape} for operand {parent.shape}")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        if not retain_graph:
            node._backward, node._parents = None, ()
            node.requires_grad = False
    if params is None:
        return {leaf: leaf.grad for leaf in leaves}
    out = {}
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out[p] = p.grad
    return out


def grad(loss: Tensor, params: Sequence[Tensor], retain_graph: bool = True) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``params`` without leaving state behind."""
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    try:
        result = backward(loss, params, retain_graph)
        return [result[p] for p in params]
    finally:
        for p, s in zip(params, saved):
            p.grad = s


# -- elementwise and structural ops ----------------------------------------

def _check_trailing(a_shape, b_shape, op):
    n = len(b_shape)
    if n > len(a_shape) or tuple(a_shape[len(a_shape) - n:]) != tuple(b_shape):
        raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} are incompatible")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        scalar = float(b)
        return _make(a.data + a.data.dtype.type(scalar), (a,), lambda g: (g,))
    if a.ndim < b.ndim:
        a, b = b, a
    _check_trailing(a.shape, b.shape, "add")
    bshape = b.shape
    return _make(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, bshape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = a.data.dtype.type(float(b))
        return _make(a.data * s, (a,), lambda g: (g * s,))
    if a.ndim < b.ndim:
        a, b = b, a
    _check_trailing(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return g * bd, _reduce_to(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw)


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    """Collapse everything but the leading batch axis."""
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(a.data[idx]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def broadcast_leading(a: Tensor, lead: tuple[int, ...]) -> Tensor:
    """Explicitly tile ``a`` over new leading axes (e.g. a class token per sample)."""
    shape = a.shape
    data = np.broadcast_to(a.data, tuple(lead) + shape).copy()
    return _make(data, (a,), lambda g: (_reduce_to(g, shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either 2-D (a weight shared
    across the batch) or has exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents disagree for {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes disagree for {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


# -- nonlinearities ---------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _record_kink(mask)
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return (g * d,)

    return _make(out.astype(xd.dtype), (x,), bw)


def pointwise(x: Tensor, fn: str) -> Tensor:
    if fn == "relu":
        return relu(x)
    if fn == "gelu":
        return gelu(x)
    raise ValueError(f"unknown pointwise function {fn!r}")


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layernorm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layernorm: gain/shift must be ({d},), got {gain.shape} and {shift.shape}")
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + shift.data

    def bw(g):
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dshift = g.sum(axis=axes)
        gh = g * gd
        dx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dshift

    return _make(out.astype(xd.dtype), (x, gain, shift), bw)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    scale = x.dtype.type(1.0 / (1.0 - rate))
    m = keep.astype(x.dtype) * scale
    return _make(x.data * m, (x,), lambda g: (g * m,))


# -- spatial ops (NHWC) -------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, pad: int = 0) -> int:
    return (n + 2 * pad - k) // stride + 1


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected H x W x C or B x H x W x C input, got {x.shape}")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation; kernels are laid out k x k x C_in x C_out."""
    if stride < 1:
        raise ValueError(f"conv2d stride must be positive, got {stride}")
    if pad < 0:
        raise ValueError(f"conv2d padding must be non-negative, got {pad}")
    xb, squeeze = _as_batch(x)
    B, H, W, C = xb.shape
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise ShapeError(f"conv2d kernels must be k x k x C_in x C_out, got {kernels.shape}")
    k, _, cin, cout = kernels.shape
    if cin != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernels expect {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if k > Hp or k > Wp:
        raise ShapeError(f"conv2d: kernel {k}x{k} larger than padded input {Hp}x{Wp}")
    Ho, Wo = conv_output_size(H, k, stride, pad), conv_output_size(W, k, stride, pad)

    xd = xb.data
    if pad:
        xd = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xd, (k, k), axis=(1, 2))
    win = win[:, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # win: B, Ho, Wo, C, k, k  ->  rows of (ky, kx, c) to match the kernel layout
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, k * k * C)
    wmat = kernels.data.reshape(k * k * C, cout)
    out = (cols @ wmat + bias.data).reshape(B, Ho, Wo, cout)

    def bw(g):
        g2 = g.reshape(B * Ho * Wo, cout)
        dw = (cols.T @ g2).reshape(kernels.shape)
        db = g2.sum(axis=0)
        dcols = (g2 @ wmat.T).reshape(B, Ho, Wo, k, k, C)
        dxp = np.zeros((B, Hp, Wp, C), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, pad : pad + H, pad : pad + W, :] if pad else dxp
        return dx, dw, db

    res = _make(out.astype(xd.dtype), (xb, kernels, bias), bw)
    return reshape(res, res.shape[1:]) if squeeze else res


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Per-channel sliding maximum; ties route the gradient to the first cell in row-major order."""
    if window < 1 or stride < 1:
        raise ValueError("maxpool2d window and stride must be positive")
    xb, squeeze = _as_batch(x)
    B, H, W, C = xb.shape
    if window > H or window > W:
        raise ShapeError(f"maxpool2d: window {window} exceeds input {H}x{W}")
    Ho, Wo = conv_output_size(H, window, stride), conv_output_size(W, window, stride)
    win = np.lib.stride_tricks.sliding_window_view(xb.data, (window, window), axis=(1, 2))
    win = win[:, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    flat = win.reshape(B, Ho, Wo, C, window * window)
    arg = flat.argmax(axis=-1)
    _record_kink(arg)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dx = np.zeros((B, H, W, C), dtype=g.dtype)
        for i in range(window):
            for j in range(window):
                hit = arg == i * window + j
                dx[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += g * hit
        return (dx,)

    res = _make(out, (xb,), bw)
    return reshape(res, res.shape[1:]) if squeeze else res
