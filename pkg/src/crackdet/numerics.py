"""Minimal dense-array autodiff engine.

Tensors wrap numpy arrays and record the ops applied to them; calling
``backward()`` on a scalar result replays the recorded graph in reverse and
accumulates gradients additively into every tensor created with
``requires_grad=True``. Shapes are strict: elementwise ops accept equal shapes
or a python scalar, nothing else broadcasts. All parameterized layers
(conv1x1, batchnorm, positional bias, head mixing) spell out their own
backward rules instead.

The default dtype is float64; float32 can be requested per tensor for speed.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError, ShapeError


class _Mode(threading.local):
    """Per-thread engine flags, so independent graphs can run concurrently."""

    def __init__(self):
        self.grad_enabled = True
        self.bn_stats_enabled = True
        self.check_finite = False


_mode = _Mode()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev, _mode.grad_enabled = _mode.grad_enabled, False
    try:
        yield
    finally:
        _mode.grad_enabled = prev


@contextlib.contextmanager
def frozen_bn_stats():
    """Suspend running-statistic updates so repeated evals are side-effect free."""
    prev, _mode.bn_stats_enabled = _mode.bn_stats_enabled, False
    try:
        yield
    finally:
        _mode.bn_stats_enabled = prev


@contextlib.contextmanager
def finite_checks():
    """Validate every op output for NaN/inf, raising NumericsError naming the op."""
    prev, _mode.check_finite = _mode.check_finite, True
    try:
        yield
    finally:
        _mode.check_finite = prev


class Tensor:
    """A dense array plus an optional gradient and the op that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        data = np.asarray(data)
        self.data = data if data.dtype.kind == "f" else data.astype(np.float64)
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse pass from a scalar; gradients accumulate into .grad fields."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] += pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, e):
        return power(self, e)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x, like=None):
    """Wrap a constant; tensors pass through untouched."""
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, op, parents, backward):
    if _mode.check_finite and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite output in op '{op}'")
    if _mode.grad_enabled and any(p.requires_grad or p._parents for p in parents):
        return Tensor(data, op=op, parents=parents, backward=backward)
    return Tensor(data, op=op)


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _is_scalar(x):
    return not isinstance(x, Tensor) and np.ndim(x) == 0


# -- elementwise ---------------------------------------------------------


def add(a, b):
    if _is_scalar(b):
        a = as_tensor(a)
        return _make(a.data + b, "add_const", (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b):
    if _is_scalar(b):
        return add(a, -b)
    if _is_scalar(a):
        return add(neg(b), a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b):
    if _is_scalar(b):
        a = as_tensor(a)
        return _make(a.data * b, "mul_const", (a,), lambda g: (g * b,))
    if _is_scalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b):
    if _is_scalar(b):
        return mul(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "div")
    out = a.data / b.data
    return _make(out, "div", (a, b), lambda g: (g / b.data, -g * out / b.data))


def power(a, e):
    a = as_tensor(a)
    e = float(e)
    out = a.data ** e
    return _make(out, "pow", (a,), lambda g: (g * e * a.data ** (e - 1.0),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return _make(out, "log", (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def _sigmoid_np(x):
    """Overflow-safe logistic on a raw array."""
    z = np.exp(-np.abs(x))
    return np.where(np.asarray(x) >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    """log(1 + exp(x)), computed stably; derivative is sigmoid(x)."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _make(out, "softplus", (a,), lambda g: (g * _sigmoid_np(a.data),))


def silu(a):
    """x * sigmoid(x) — smooth everywhere, so finite differences stay honest."""
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return _make(a.data * s, "silu", (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b if isinstance(b, Tensor) else np.full_like(a.data, b))
    _same_shape(a, b, "maximum")
    mask = a.data >= b.data
    return _make(np.where(mask, a.data, b.data), "maximum", (a, b),
                 lambda g: (g * mask, g * ~mask))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b if isinstance(b, Tensor) else np.full_like(a.data, b))
    _same_shape(a, b, "minimum")
    mask = a.data <= b.data
    return _make(np.where(mask, a.data, b.data), "minimum", (a, b),
                 lambda g: (g * mask, g * ~mask))


# -- reductions and reshaping --------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward(g):
        if axis is None:
            return (np.full_like(a.data, 1.0) * g,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), "reshape", (a,),
                 lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), "transpose", (a,),
                 lambda g: (g.transpose(inv),))


def concat(parts, axis):
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), "concat",
                 tuple(parts), backward)


def index_axis(a, i, axis):
    """Select one slice along an axis (the axis is dropped)."""
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = i

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[tuple(idx)] = g
        return (ga,)

    return _make(a.data[tuple(idx)], "index_axis", (a,), backward)


def take(a, indices, axis=0):
    """Gather slices along an axis; backward scatter-adds (indices may repeat)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (slice(None),) * axis + (indices,), g)
        return (ga,)

    return _make(np.take(a.data, indices, axis=axis), "take", (a,), backward)


# -- contractions ---------------------------------------------------------


def matmul_tokens(a, b):
    """Batched matrix product: (..., m, k) @ (..., k, n) with equal leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul_tokens: operands must have rank >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul_tokens: inner dims {a.data.shape} vs {b.data.shape}")
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"matmul_tokens: leading dims {a.data.shape} vs {b.data.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (ga, gb)

    return _make(a.data @ b.data, "matmul_tokens", (a, b), backward)


def conv1x1(x, w, b=None):
    """Pointwise conv: x (B,Ci,H,W), w (Co,Ci), optional bias (Co,) -> (B,Co,H,W)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4:
        raise ShapeError(f"conv1x1: input must be 4-D, got {x.data.shape}")
    if w.data.ndim != 2 or w.data.shape[1] != x.data.shape[1]:
        raise ShapeError(f"conv1x1: weight {w.data.shape} incompatible with input {x.data.shape}")
    out = np.einsum("oi,bihw->bohw", w.data, x.data, optimize=True)
    if b is None:
        def backward(g):
            gx = np.einsum("oi,bohw->bihw", w.data, g, optimize=True)
            gw = np.einsum("bohw,bihw->oi", g, x.data, optimize=True)
            return (gx, gw)

        return _make(out, "conv1x1", (x, w), backward)
    b = as_tensor(b)
    if b.data.shape != (w.data.shape[0],):
        raise ShapeError(f"conv1x1: bias shape {b.data.shape} != ({w.data.shape[0]},)")

    def backward(g):
        gx = np.einsum("oi,bohw->bihw", w.data, g, optimize=True)
        gw = np.einsum("bohw,bihw->oi", g, x.data, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    return _make(out + b.data[None, :, None, None], "conv1x1", (x, w, b), backward)


def conv3x3s2(x, w, b=None):
    """3x3 conv, stride 2, pad 1: x (B,Ci,H,W) even H,W; w (Co,Ci,3,3) -> (B,Co,H/2,W/2)."""
    x, w = as_tensor(x), as_tensor(w)
    B, Ci, H, W = x.data.shape
    if w.data.shape[1] != Ci or w.data.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3s2: weight {w.data.shape} incompatible with input {x.data.shape}")
    if H % 2 or W % 2:
        raise ShapeError(f"conv3x3s2: spatial size {(H, W)} must be even")
    Ho, Wo = H // 2, W // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # patches[b, i, dy, dx, y, x] = xp[b, i, 2y+dy, 2x+dx]
    patches = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::2, ::2]
    out = np.einsum("oiuv,biyxuv->boyx", w.data, patches, optimize=True)

    def grad_x(g):
        gxp = np.zeros_like(xp)
        for dy in range(3):
            for dx in range(3):
                contrib = np.einsum("oi,boyx->biyx", w.data[:, :, dy, dx], g, optimize=True)
                gxp[:, :, dy:dy + 2 * Ho:2, dx:dx + 2 * Wo:2] += contrib
        return gxp[:, :, 1:H + 1, 1:W + 1]

    def grad_w(g):
        return np.einsum("boyx,biyxuv->oiuv", g, patches, optimize=True)

    if b is None:
        return _make(out, "conv3x3s2", (x, w), lambda g: (grad_x(g), grad_w(g)))
    b = as_tensor(b)
    return _make(out + b.data[None, :, None, None], "conv3x3s2", (x, w, b),
                 lambda g: (grad_x(g), grad_w(g), g.sum(axis=(0, 2, 3))))


def upsample2x(x):
    """Nearest-neighbor doubling of H and W."""
    x = as_tensor(x)

    def backward(g):
        B, C, H2, W2 = g.shape
        return (g.reshape(B, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5)),)

    return _make(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3), "upsample2x", (x,), backward)


def avgpool2x2(x):
    """2x2 stride-2 average pooling; requires even spatial size."""
    x = as_tensor(x)
    B, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avgpool2x2: spatial size {(H, W)} must be even")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, "avgpool2x2", (x,), backward)


def softmax_lastdim(x):
    """Row softmax along the last axis, stabilized by max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, "softmax_lastdim", (x,), backward)


def head_mix(x, t):
    """Mix the head axis: out[b,g,i,j] = sum_h t[g,h] * x[b,h,i,j]."""
    x, t = as_tensor(x), as_tensor(t)
    h = x.data.shape[1]
    if t.data.shape != (h, h):
        raise ShapeError(f"head_mix: mixing matrix {t.data.shape} != ({h}, {h})")
    out = np.einsum("gh,bhij->bgij", t.data, x.data, optimize=True)

    def backward(g):
        gx = np.einsum("gh,bgij->bhij", t.data, g, optimize=True)
        gt = np.einsum("bgij,bhij->gh", g, x.data, optimize=True)
        return (gx, gt)

    return _make(out, "head_mix", (x, t), backward)


def add_posbias(x, bias):
    """Add a per-head (h,i,j) bias to logits (b,h,i,j)."""
    x, bias = as_tensor(x), as_tensor(bias)
    if x.data.shape[1:] != bias.data.shape:
        raise ShapeError(f"add_posbias: bias {bias.data.shape} vs logits {x.data.shape}")
    return _make(x.data + bias.data[None], "add_posbias", (x, bias),
                 lambda g: (g, g.sum(axis=0)))


# -- batch normalization ---------------------------------------------------


def batchnorm(x, gamma, beta, state, eps=1e-5, momentum=0.1, training=True):
    """Per-channel normalization of (B,C,H,W) over the (B,H,W) slice.

    Train mode normalizes with batch statistics and nudges ``state`` (running
    mean/var) by an exponential moving average; eval mode normalizes with the
    stored running statistics. Differentiable w.r.t. x, gamma, beta.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    B, C, H, W = x.data.shape
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeError(f"batchnorm: gamma/beta must be ({C},)")
    if eps <= 0:
        raise ShapeError("batchnorm: eps must be > 0")
    n = B * H * W
    if n == 0:
        raise ShapeError("batchnorm: channel slices are empty")
    if training:
        m = x.data.mean(axis=(0, 2, 3))
        v = x.data.var(axis=(0, 2, 3))
        if _mode.bn_stats_enabled:
            unbiased = v * (n / max(1, n - 1))
            state.mean += momentum * (m - state.mean)
            state.var += momentum * (unbiased - state.var)
    else:
        m, v = state.mean, state.var
    istd = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - m[None, :, None, None]) * istd[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            gx = (istd[None, :, None, None] / n) * (
                n * gxhat
                - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        else:
            gx = gxhat * istd[None, :, None, None]
        return (gx, ggamma, gbeta)

    return _make(out, "batchnorm", (x, gamma, beta), backward)


@dataclass
class BNState:
    """Running statistics for one batchnorm layer (not trainable)."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels, dtype=np.float64):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def copy(self):
        return BNState(self.mean.copy(), self.var.copy())


@dataclass(frozen=True)
class BNSettings:
    """eps / running-momentum pair threaded from the run config into every layer."""

    eps: float = 1e-5
    momentum: float = 0.1


BN_DEFAULTS = BNSettings()


class BatchNorm:
    """Parameter bundle (gamma, beta, running stats) for one normalized layer."""

    def __init__(self, channels, eps=None, momentum=None, dtype=np.float64, bn=None):
        bn = bn or BN_DEFAULTS
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.state = BNState.fresh(channels, dtype)
        self.eps = bn.eps if eps is None else eps
        self.momentum = bn.momentum if momentum is None else momentum

    def __call__(self, x, training=True):
        return batchnorm(x, self.gamma, self.beta, self.state,
                         eps=self.eps, momentum=self.momentum, training=training)

    def params(self, prefix):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def states(self, prefix):
        yield f"{prefix}.running_mean", self.state.mean
        yield f"{prefix}.running_var", self.state.var


@dataclass
class Param:
    """A named trainable grid; names are unique within a model."""

    name: str
    value: Tensor
    trainable: bool = True


def collect_params(named) -> list[Param]:
    """Materialize (name, tensor) pairs into Params, enforcing unique names."""
    out, seen = [], set()
    for name, tensor in named:
        if name in seen:
            raise NumericsError(f"duplicate parameter name '{name}'")
        seen.add(name)
        out.append(Param(name, tensor))
    return out


def zero_grads(params):
    for p in params:
        (p.value if isinstance(p, Param) else p).zero_grad()


# -- gradient checking ------------------------------------------------------


def finite_diff_check(f, params, h=1e-5, max_coords=None, rng=None):
    """Compare analytic gradients of the scalar ``f()`` against central differences.

    ``params`` is a sequence of tensors (or Params) that f closes over. Returns
    the max over checked coordinates of |analytic - numeric| / max(1, |analytic|).
    With ``max_coords`` set, a seeded subset of coordinates across all parameters
    is checked instead of every scalar (mandatory for big composites; fresh
    draws per call spread coverage across repeated checks). Running BN stats
    are frozen throughout so f is evaluated as a pure function. Any non-finite
    intermediate raises NumericsError naming the offending op.
    """
    tensors = [(p.value if isinstance(p, Param) else p) for p in params]
    with frozen_bn_stats():
        for t in tensors:
            t.zero_grad()
        with finite_checks():
            out = f()
        if not isinstance(out, Tensor):
            raise NumericsError("finite_diff_check: f must return a Tensor scalar")
        out.backward()
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

        coords = [(pi, ci) for pi, t in enumerate(tensors) for ci in range(t.data.size)]
        if max_coords is not None and len(coords) > max_coords:
            rng = rng or np.random.default_rng(0)
            picks = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(picks)]

        def eval_scalar():
            with no_grad():
                val = float(f().data)
            if not np.isfinite(val):
                with finite_checks(), no_grad():
                    f()
                raise NumericsError("non-finite value of f during finite differencing")
            return val

        max_err = 0.0
        for pi, ci in coords:
            flat = tensors[pi].data.reshape(-1)
            orig = flat[ci]
            flat[ci] = orig + h
            fp = eval_scalar()
            flat[ci] = orig - h
            fm = eval_scalar()
            flat[ci] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[pi].reshape(-1)[ci]
            max_err = max(max_err, abs(a - numeric) / max(1.0, abs(a)))
    return max_err
