"""Dense arrays with reverse-mode differentiation.

A `Tensor` wraps a float32 or float64 numpy array together with an optional
gradient buffer. Operations build a dynamic tape (each result node keeps a
closure that routes its upstream gradient to its parents); `backward` walks
the tape in reverse topological order and accumulates into `.grad`. Node
closures are released after backward, so the tape lives for exactly one
forward/backward cycle, while leaf gradients persist until `zero_grad`.

Only the operations the color-propagation networks need are provided:
elementwise arithmetic with numpy broadcasting, relu/abs/sqrt, reductions,
concatenation, 2D convolution (replicate or zero padding, stride, dilation),
2x average pooling, 2x bilinear upsampling, softmax, per-channel affine maps,
padding/cropping, and instance normalization composed from the primitives.

Images and features ride through in NHWC layout throughout.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError

FLOAT_DTYPES = (np.float32, np.float64)

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Suspend tape recording; forward passes inside produce plain constants."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in FLOAT_DTYPES:
        return arr.astype(np.float32)
    return arr


class Tensor:
    """A numpy array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Create a graph node; constants short-circuit so inference records nothing."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar loss into every reachable grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    visited = {id(loss)}
    stack: list[tuple[Tensor, Iterable[Tensor]]] = [(loss, iter(loss._parents))]
    while stack:
        node, it = stack[-1]
        for parent in it:
            if parent.requires_grad and id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                break
        else:
            topo.append(node)
            stack.pop()

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)
            # release the tape; leaf grads survive
            node._backward_fn = None
            node._parents = ()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.data.shape).astype(a.dtype, copy=False))
        b._accumulate(_unbroadcast(g, b.data.shape).astype(b.dtype, copy=False))

    return _node(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.data.shape).astype(a.dtype, copy=False))
        b._accumulate(-_unbroadcast(g, b.data.shape).astype(b.dtype, copy=False))

    return _node(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)

    def bwd(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape).astype(a.dtype, copy=False))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape).astype(b.dtype, copy=False))

    return _node(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)

    def bwd(g):
        a._accumulate(_unbroadcast(g / b.data, a.data.shape).astype(a.dtype, copy=False))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape).astype(b.dtype, copy=False))

    return _node(a.data / b.data, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        x._accumulate(g * mask)

    return _node(np.where(mask, x.data, 0), (x,), bwd)


def absolute(x: Tensor) -> Tensor:
    # subgradient at 0 is 0, so sign() is exactly right
    sign = np.sign(x.data)

    def bwd(g):
        x._accumulate(g * sign)

    return _node(np.abs(x.data), (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    root = np.sqrt(x.data)

    def bwd(g):
        x._accumulate(g * (0.5 / root))

    return _node(root, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bwd(g):
        x._accumulate(g * (1.0 - y * y))

    return _node(y, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------

def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(gg, x.data.shape).copy())

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), bwd)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.data.shape[a] for a in axes]))

    def bwd(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g / count, x.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(gg / count, x.data.shape).copy())

    return _node(x.data.mean(axis=axis, keepdims=keepdims), (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        index = [slice(None)] * g.ndim
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index[axis] = slice(lo, hi)
            t._accumulate(g[tuple(index)])

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def take_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the trailing channel axis."""

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        x._accumulate(gx)

    return _node(x.data[..., start:stop].copy(), (x,), bwd)


def crop2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Crop rows [top:bottom) and columns [left:right) of an NHWC tensor."""

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, top:bottom, left:right, :] = g
        x._accumulate(gx)

    return _node(x.data[:, top:bottom, left:right, :].copy(), (x,), bwd)


def _fold_padding(gp: np.ndarray, pt: int, pb: int, pl: int, pr: int) -> np.ndarray:
    """Adjoint of replicate padding: fold margin gradients onto edge pixels."""
    h = gp.shape[1] - pt - pb
    w = gp.shape[2] - pl - pr
    rows = gp[:, pt:pt + h].copy()
    if pt:
        rows[:, 0] += gp[:, :pt].sum(axis=1)
    if pb:
        rows[:, h - 1] += gp[:, pt + h:].sum(axis=1)
    out = rows[:, :, pl:pl + w].copy()
    if pl:
        out[:, :, 0] += rows[:, :, :pl].sum(axis=2)
    if pr:
        out[:, :, w - 1] += rows[:, :, pl + w:].sum(axis=2)
    return out


def pad2d_replicate(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    def bwd(g):
        x._accumulate(_fold_padding(g, top, bottom, left, right))

    padded = np.pad(x.data, ((0, 0), (top, bottom), (left, right), (0, 0)), mode="edge")
    return _node(padded, (x,), bwd)


# ---------------------------------------------------------------------------
# structured ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: str = "replicate") -> Tensor:
    """Cross-correlate NHWC input with a (kh, kw, cin, cout) kernel.

    Odd kernel extents only; same-padding at stride 1. The loop runs one GEMM
    per kernel tap, which keeps peak memory at a single input-sized slice.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ContractError("conv2d expects NHWC input and (kh,kw,cin,cout) weights")
    kh, kw, cin, cout = w.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError(f"kernel extents must be odd, got {kh}x{kw}")
    if x.data.shape[3] != cin:
        raise ContractError(f"input has {x.data.shape[3]} channels, weights expect {cin}")
    if padding not in ("replicate", "zero"):
        raise ContractError(f"unknown padding mode {padding!r}")
    if stride < 1 or dilation < 1:
        raise ContractError("stride and dilation must be >= 1")

    n, h, wd, _ = x.data.shape
    ph = dilation * (kh - 1) // 2
    pw = dilation * (kw - 1) // 2
    mode = "edge" if padding == "replicate" else "constant"
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)), mode=mode)
    ho = (h + 2 * ph - (dilation * (kh - 1) + 1)) // stride + 1
    wo = (wd + 2 * pw - (dilation * (kw - 1) + 1)) // stride + 1

    def tap_slice(arr, i, j):
        return arr[:, i * dilation: i * dilation + stride * (ho - 1) + 1: stride,
                   j * dilation: j * dilation + stride * (wo - 1) + 1: stride, :]

    out = np.zeros((n, ho, wo, cout), dtype=xp.dtype)
    flat = out.reshape(-1, cout)
    for i in range(kh):
        for j in range(kw):
            flat += tap_slice(xp, i, j).reshape(-1, cin) @ w.data[i, j]
    if b is not None:
        out += b.data

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gm = g.reshape(-1, cout)
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    gw[i, j] = tap_slice(xp, i, j).reshape(-1, cin).T @ gm
            w._accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    tap_slice(gxp, i, j)[...] += (gm @ w.data[i, j].T).reshape(n, ho, wo, cin)
            if padding == "replicate":
                x._accumulate(_fold_padding(gxp, ph, ph, pw, pw))
            else:
                x._accumulate(gxp[:, ph:ph + h, pw:pw + wd, :])
        if b is not None:
            b._accumulate(g.sum(axis=(0, 1, 2)))

    return _node(out, parents, bwd)


def avg_pool2x(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial extents must be even."""
    n, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ContractError(f"avg_pool2x needs even extents, got {h}x{w}")
    d = x.data
    out = 0.25 * (d[:, ::2, ::2] + d[:, 1::2, ::2] + d[:, ::2, 1::2] + d[:, 1::2, 1::2])

    def bwd(g):
        gx = np.empty_like(x.data)
        q = 0.25 * g
        gx[:, ::2, ::2] = q
        gx[:, 1::2, ::2] = q
        gx[:, ::2, 1::2] = q
        gx[:, 1::2, 1::2] = q
        x._accumulate(gx)

    return _node(out, (x,), bwd)


def _up1d(a: np.ndarray, axis: int) -> np.ndarray:
    # factor-2 bilinear with half-pixel centers: taps 0.75/0.25, clamped ends
    a = np.moveaxis(a, axis, 1)
    prev = np.concatenate([a[:, :1], a[:, :-1]], axis=1)
    nxt = np.concatenate([a[:, 1:], a[:, -1:]], axis=1)
    out = np.empty((a.shape[0], 2 * a.shape[1]) + a.shape[2:], dtype=a.dtype)
    out[:, ::2] = 0.75 * a + 0.25 * prev
    out[:, 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, 1, axis)


def _up1d_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, 1)
    ge, go = g[:, ::2], g[:, 1::2]
    out = 0.75 * (ge + go)
    out[:, :-1] += 0.25 * ge[:, 1:]
    out[:, 0] += 0.25 * ge[:, 0]
    out[:, 1:] += 0.25 * go[:, :-1]
    out[:, -1] += 0.25 * go[:, -1]
    return np.moveaxis(out, 1, axis)


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling of an NHWC tensor (half-pixel centers)."""

    def bwd(g):
        x._accumulate(_up1d_adjoint(_up1d_adjoint(g, 2), 1))

    return _node(_up1d(_up1d(x.data, 1), 2), (x,), bwd)


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ContractError(f"axis {axis} out of bounds for shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        x._accumulate(y * (g - inner))

    return _node(y, (x,), bwd)


def channel_affine(x: Tensor, matrix: np.ndarray, offset: np.ndarray | None = None) -> Tensor:
    """Fixed linear map over the trailing channel axis: y = x @ matrix.T + offset."""
    m = np.asarray(matrix, dtype=x.dtype)
    out = x.data @ m.T
    if offset is not None:
        out += np.asarray(offset, dtype=x.dtype)

    def bwd(g):
        x._accumulate(g @ m)

    return _node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# composed helpers
# ---------------------------------------------------------------------------

INSTANCE_NORM_EPS = 1e-5


def instance_norm(x: Tensor, eps: float = INSTANCE_NORM_EPS) -> tuple[Tensor, Tensor, Tensor]:
    """Normalize each (sample, channel) plane of an NHWC tensor to zero mean, unit sd.

    Returns (normalized, mean, sd) where mean/sd have shape (N,1,1,C); sd is
    sqrt(var + eps), so `normalized * sd + mean` reconstructs x exactly.
    """
    if x.data.ndim != 4:
        raise ContractError("instance_norm expects an NHWC tensor")
    if x.data.shape[1] * x.data.shape[2] < 2:
        raise ContractError("instance_norm needs at least 2 spatial samples")
    mean = tensor_mean(x, axis=(1, 2), keepdims=True)
    centered = sub(x, mean)
    var = tensor_mean(mul(centered, centered), axis=(1, 2), keepdims=True)
    sd = sqrt(add(var, eps))
    return div(centered, sd), mean, sd


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over every sample."""
    if a.data.shape != b.data.shape:
        raise ContractError(f"l1_loss shapes differ: {a.data.shape} vs {b.data.shape}")
    return tensor_mean(absolute(sub(a, b)))


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
               dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def numeric_gradient(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5,
                     max_entries: int | None = None,
                     rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central finite differences of scalar f() with respect to entries of t.

    Returns (indices, gradients) for the checked flat entries; checks all of
    them unless max_entries subsamples. Use float64 tensors for tight bounds.
    """
    flat = t.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.size, size=max_entries, replace=False)
    grads = np.zeros(idx.size, dtype=np.float64)
    for pos, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        grads[pos] = (fp - fm) / (2.0 * h)
    return idx, grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(f: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
                    max_entries: int | None = 64,
                    rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and finite-difference gradients."""
    for t in tensors:
        t.zero_grad()
    backward(f())
    worst = 0.0
    for t in tensors:
        analytic_full = t.grad if t.grad is not None else np.zeros_like(t.data)
        idx, numeric = numeric_gradient(f, t, h=h, max_entries=max_entries, rng=rng)
        analytic = analytic_full.reshape(-1)[idx].astype(np.float64)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst
