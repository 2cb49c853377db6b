"""Dense tensors with reverse-mode automatic differentiation on top of numpy.

Every differentiable op produces a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
``Tensor.backward`` walks that trace once in reverse topological order;
the trace is consumed afterwards, so a second call without a fresh forward
pass raises.
"""

from __future__ import annotations

import functools
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True
_DEBUG = False
DEFAULT_DTYPE = np.float32


def set_debug(flag: bool) -> None:
    """Check every op output for NaN/Inf (slow; off by default)."""
    global _DEBUG
    _DEBUG = bool(flag)


class no_grad:
    """Context manager that stops ops from recording a trace."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _consumed(_grad):
    raise RuntimeError("backward() called twice on the same trace; run a new forward pass first")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_done")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._done = False

    # -- construction of interior nodes -------------------------------------------------
    @staticmethod
    def from_op(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Wrap an op result.

        ``backward(grad)`` must return one gradient (or None) per parent, each
        shaped like that parent's data.
        """
        if _DEBUG and not np.all(np.isfinite(data)):
            raise FloatingPointError("non-finite values produced by an op")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._done = False
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties ---------------------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------------------
    def _trace(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

    def backward(self, grad: np.ndarray | None = None) -> None:
        if self._done:
            _consumed(grad)
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = self._trace()
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = _consumed
        self._done = True

    # -- operator sugar -----------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor.from_op(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(ad * bd, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,))


def tabs(x: Tensor) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    sign = np.sign(x.data)
    return Tensor.from_op(np.abs(x.data), (x,), lambda g: (g * sign,))


# -- reductions and shape -----------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# -- linear algebra -----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``a @ b``."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return Tensor.from_op(ad @ bd, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fully connected layer ``x @ w.T + b`` with ``w`` of shape (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return Tensor.from_op(out, parents, backward)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"conv output size ({size}+2*{pad}-{kernel})/{stride}+1 is not a positive integer"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(N, C, Hp, Wp) padded input -> (N, C*kh*kw, oh*ow) patch matrix."""
    n, c = xp.shape[:2]
    if kh == kw == 1 and stride == 1:
        return xp.reshape(n, c, oh * ow)
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _pad_hw(a: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return a
    n, c, h, w = a.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=a.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = a
    return out


# below this many input pixels, im2col and its adjoint run as one matmul with a 0/1 matrix
_SELECT_MAX_PIXELS = 36


@functools.lru_cache(maxsize=64)
def _selection(h: int, w: int, kh: int, kw: int, stride: int, pad: int, oh: int, ow: int,
               dtype: str) -> np.ndarray:
    """(h*w, kh*kw*oh*ow) matrix with ``x.reshape(-1, h*w) @ P`` = zero-padded patches."""
    sel = np.zeros((h, w, kh, kw, oh, ow), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            for a in range(oh):
                r = a * stride + i - pad
                if not 0 <= r < h:
                    continue
                for b in range(ow):
                    q = b * stride + j - pad
                    if 0 <= q < w:
                        sel[r, q, i, j, a, b] = 1.0
    sel = sel.reshape(h * w, -1)
    sel.flags.writeable = False
    return sel


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,kh,kw) via im2col."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    n, c, h, wd_ = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(wd_, kw, stride, pad)
    pointwise = kh == kw == 1 and stride == 1 and pad == 0
    sel = None
    if pointwise:
        cols = x.data.reshape(n, c, h * wd_)
    elif h * wd_ <= _SELECT_MAX_PIXELS:
        sel = _selection(h, wd_, kh, kw, stride, pad, oh, ow, x.data.dtype.str)
        cols = (x.data.reshape(n * c, h * wd_) @ sel).reshape(n, c * kh * kw, oh * ow)
    else:
        cols = _im2col(_pad_hw(x.data, pad), kh, kw, stride, oh, ow)
    wmat = w.data.reshape(o, -1)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, o, oh, ow)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g3 = g.reshape(n, o, oh * ow)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            if pointwise:
                gx = np.matmul(wmat.T, g3).reshape(n, c, h, wd_)
            elif sel is not None:
                dcols = np.matmul(wmat.T, g3).reshape(n * c, -1)
                gx = (dcols @ sel.T).reshape(n, c, h, wd_)
            elif stride == 1 and kh == kw and pad <= kh - 1:
                # full correlation of the padded gradient with the flipped kernel
                wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
                gx = np.matmul(wflip, _im2col(_pad_hw(g, kh - 1 - pad), kh, kw, 1, h, wd_))
                gx = gx.reshape(n, c, h, wd_)
            else:
                dcols = np.matmul(wmat.T, g3).reshape(n, c, kh, kw, oh, ow)
                dxp = np.zeros((n, c, h + 2 * pad, wd_ + 2 * pad), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
                gx = dxp[:, :, pad:pad + h, pad:pad + wd_] if pad else dxp
        if b is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    return Tensor.from_op(out, parents, backward)


def conv2d_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int = 1,
                     pad: int = 0) -> np.ndarray:
    """Direct nested-loop convolution. Slow; kept as an independent oracle."""
    n, c, h, wdt = x.shape
    o, _, kh, kw = w.shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(wdt, kw, stride, pad)
    xp = np.zeros((n, c, h + 2 * pad, wdt + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + wdt] = x
    out = np.zeros((n, o, oh, ow), dtype=x.dtype)
    for s in range(n):
        for oc in range(o):
            for r in range(oh):
                for q in range(ow):
                    acc = 0.0 if b is None else float(b[oc])
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[s, ic, r * stride + i, q * stride + j] * w[oc, ic, i, j]
                    out[s, oc, r, q] = acc
    return out


# -- per-channel ops ----------------------------------------------------------------------

def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def channel_sum(a: np.ndarray) -> np.ndarray:
    """Sum over every axis except the channel axis 1."""
    if a.ndim == 2:
        return a.sum(axis=0)
    return np.einsum("ncp->c", a.reshape(a.shape[0], a.shape[1], -1))


def channel_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-channel ``sum(a * b)`` over batch and spatial axes."""
    if a.ndim == 2:
        return np.einsum("nc,nc->c", a, b)
    n, c = a.shape[:2]
    return np.einsum("ncp,ncp->c", a.reshape(n, c, -1), b.reshape(n, c, -1))


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor | None = None) -> Tensor:
    """``x * scale[c] + shift[c]`` broadcast over batch and spatial axes (channel axis 1)."""
    if x.ndim < 2 or scale.ndim != 1 or scale.shape[0] != x.shape[1]:
        raise ValueError(f"per-channel scale of shape {scale.shape} does not match input {x.shape}")
    if shift is not None and shift.shape != scale.shape:
        raise ValueError("per-channel shift and scale differ in length")
    nd = x.ndim
    sv = _channel_view(scale.data, nd)
    out = x.data * sv
    if shift is not None:
        out = out + _channel_view(shift.data, nd)
    xd = x.data
    parents = (x, scale) if shift is None else (x, scale, shift)

    def backward(g):
        gx = g * sv if x.requires_grad else None
        gs = channel_dot(g, xd) if scale.requires_grad else None
        if shift is None:
            return gx, gs
        return gx, gs, channel_sum(g) if shift.requires_grad else None

    return Tensor.from_op(out, parents, backward)


def scale_per_channel(x: Tensor, s: Tensor) -> Tensor:
    return channel_affine(x, s)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Normalize with minibatch statistics (biased variance).

    Returns the output tensor together with the batch mean and variance as
    plain arrays so callers can update running statistics.
    """
    if x.shape[0] < 2:
        raise ValueError("batch norm in train mode needs a batch of at least 2 samples")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(f"batch norm parameters do not match {x.shape[1]} channels")
    nd = x.ndim
    xd = x.data
    m = xd.size // xd.shape[1]
    mu = channel_sum(xd) / m
    xc = xd - _channel_view(mu, nd)
    var = channel_dot(xc, xc) / m
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * _channel_view(inv, nd)
    gv = _channel_view(gamma.data, nd)
    out = xhat * gv + _channel_view(beta.data, nd)

    def backward(g):
        gb = channel_sum(g)
        gg = channel_dot(g, xhat)
        gx = None
        if x.requires_grad:
            dxhat = g * gv
            s1 = gb * gamma.data
            s2 = gg * gamma.data
            gx = _channel_view(inv / m, nd) * (
                m * dxhat - _channel_view(s1, nd) - xhat * _channel_view(s2, nd)
            )
        return gx, (gg if gamma.requires_grad else None), (gb if beta.requires_grad else None)

    return Tensor.from_op(out, (x, gamma, beta), backward), mu, var


# -- pooling ------------------------------------------------------------------------------

def avg_pool2d(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d: spatial size {h}x{w} not divisible by {k}")
    xd = x.data
    out = xd[:, :, 0::k, 0::k].copy()
    for i in range(k):
        for j in range(k):
            if i or j:
                out += xd[:, :, i::k, j::k]
    out *= 1.0 / (k * k)

    def backward(g):
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (up / (k * k),)

    return Tensor.from_op(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.einsum("ncp->nc", x.data.reshape(n, c, h * w)) * (1.0 / (h * w))

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).copy(),)

    return Tensor.from_op(out, (x,), backward)


# -- softmax ------------------------------------------------------------------------------

def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite {what}")


def softmax_np(logits: np.ndarray, T: float = 1.0) -> np.ndarray:
    if T <= 0:
        raise ValueError("temperature must be positive")
    _check_finite(logits, "logits")
    z = logits / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_np(logits: np.ndarray, T: float = 1.0) -> np.ndarray:
    if T <= 0:
        raise ValueError("temperature must be positive")
    _check_finite(logits, "logits")
    z = logits / T
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: Tensor, T: float = 1.0) -> Tensor:
    """Row-wise ``softmax(logits / T)`` with max subtraction."""
    y = softmax_np(logits.data, T)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)) / T,)

    return Tensor.from_op(y, (logits,), backward)


# -- gradient checking -------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` recomputes a scalar loss from the current contents of ``params``.
    The error of one element is ``|g_ad - g_fd| / (1e-8 + |g_ad| + |g_fd|)``.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check needs float64 parameters")
        p.grad = None
    loss = f()
    _check_finite(loss.data, "loss")
    if loss.requires_grad:
        loss.backward()
    worst = 0.0
    for p in params:
        g_ad = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                up = f().data
                flat[i] = orig - step
                down = f().data
            flat[i] = orig
            _check_finite(up, "intermediate")
            _check_finite(down, "intermediate")
            g_fd = float((up - down).sum()) / (2.0 * step)
            ga = float(g_ad.reshape(-1)[i])
            err = abs(ga - g_fd) / (1e-8 + abs(ga) + abs(g_fd))
            worst = max(worst, err)
    return worst
