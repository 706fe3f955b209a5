"""Dense float64 tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their parents and a backward closure; :func:`backward` walks
the recorded nodes in reverse creation order. Nothing is recorded inside
:func:`no_grad` or when no input requires gradients, which is how frozen
teacher passes stay cheap.

Broadcasting in the elementwise ops is limited to scalar-with-tensor.
"""

import contextlib
import itertools

import numpy as np

from . import kernels

_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._id = next(_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out, parents, backward_fn, op):
    """Wrap ``out``; attach to the tape only if some parent needs a gradient."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(out, True, parents, backward_fn, op)
    return Tensor(out, _op=op)


def backward(root):
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable tensor ``t``
    that requires gradients.

    Propagation uses fresh per-call buffers, so repeated calls add exactly
    one more copy of each gradient.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    nodes = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    grads = {root._id: np.ones_like(root.data)}
    for key in sorted(nodes, reverse=True):
        t = nodes[key]
        g = grads.pop(key, None)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
        if t._backward is None:
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------- elementwise


def _check_pair(a, b, name):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g, like):
    if g.shape == like.shape:
        return g
    return np.asarray(g.sum()).reshape(like.shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "add")

    def bw(g):
        return _reduce_to(g, a.data), _reduce_to(g, b.data)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "sub")

    def bw(g):
        return _reduce_to(g, a.data), _reduce_to(-g, b.data)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "mul")

    def bw(g):
        return _reduce_to(g * b.data, a.data), _reduce_to(g * a.data, b.data)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a, c):
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def absolute(a):
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    x = a.data
    out = x.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a):
    n = a.data.size
    return _make(a.data.mean(), (a,), lambda g: (np.full(a.shape, g / n),), "mean")


def mse_mean(a, b):
    """Mean of squared differences. Either side may be a plain array."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse_mean: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return _make(np.mean(diff * diff), (a, b), bw, "mse_mean")


def dot_const(a, c):
    """``sum(a * c)`` for a constant array ``c`` of the same shape."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.shape:
        raise ValueError(f"dot_const: incompatible shapes {a.shape} and {c.shape}")
    return _make(np.sum(a.data * c), (a,), lambda g: (g * c,), "dot_const")


# ---------------------------------------------------------------- softmax


def _check_temperature(T):
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")


def softmax_t(logits, T=1.0):
    """Temperature softmax along the last axis, max-stabilized."""
    _check_temperature(T)
    z = logits.data / T
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / T,)

    return _make(p, (logits,), bw, "softmax_t")


def log_softmax_t(logits, T=1.0):
    _check_temperature(T)
    z = logits.data / T
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / T,)

    return _make(out, (logits,), bw, "log_softmax_t")


# ---------------------------------------------------------------- shape ops


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes):
    inv = np.argsort(axes)
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
        "transpose",
    )


def concat(tensors, axis=0):
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def slice_last(a, start, stop):
    """``a[..., start:stop]``."""

    def bw(g):
        out = np.zeros(a.shape)
        out[..., start:stop] = g
        return (out,)

    return _make(a.data[..., start:stop], (a,), bw, "slice")


def take(a, idx):
    """Rows ``a[idx]`` along the first axis."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw, "take")


def upsample2x(a, channels_last=False):
    """Nearest-neighbour 2x upsampling of ``[N, C, H, W]`` (or ``[N, H, W, C]``)."""
    if channels_last:
        n, h, w, c = a.shape
        out = a.data.repeat(2, axis=1).repeat(2, axis=2)
        return _make(out, (a,), lambda g: (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),), "upsample2x")
    n, c, h, w = a.shape
    out = a.data.repeat(2, axis=2).repeat(2, axis=3)
    return _make(out, (a,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample2x")


# ---------------------------------------------------------------- convolution


def _check_conv(x_shape, cin, kernel, bias, stride, pad, h, w):
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: bad stride/pad ({stride}, {pad})")
    if kernel.ndim != 4 or kernel.shape[1] != cin or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"conv2d: input shape {x_shape} incompatible with kernel shape {kernel.shape}")
    k = kernel.shape[2]
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ValueError(f"conv2d: kernel shape {kernel.shape} larger than padded input shape {x_shape}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match kernel shape {kernel.shape}")


def conv2d_nhwc(x, kernel, bias=None, stride=1, pad=0):
    """Channels-last convolution: ``x[N, H, W, C_in]`` -> ``[N, Ho, Wo, C_out]``.

    ``kernel`` keeps the ``[C_out, C_in, k, k]`` layout used by :func:`conv2d`.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d: input shape {x.shape} incompatible with kernel shape {kernel.shape}")
    n, h, w, cin = x.shape
    _check_conv(x.shape, cin, kernel, bias, stride, pad, h, w)
    cout, _, k, _ = kernel.shape
    ho = kernels.conv_out_size(h, k, stride, pad)
    wo = kernels.conv_out_size(w, k, stride, pad)
    cols = kernels.im2col(x.data, k, stride, pad)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(cout, -1)  # rows ordered (ki, kj, c)
    y = cols @ wmat.T
    if bias is not None:
        y += bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gk = None
        if kernel.requires_grad:
            gk = (g2.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        gx = kernels.col2im(g2 @ wmat, x.shape, k, stride, pad) if x.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    return _make(y.reshape(n, ho, wo, cout), parents, bw, "conv2d")


def conv2d(x, kernel, bias=None, stride=1, pad=0):
    """2-D cross-correlation.

    ``x`` is ``[C_in, H, W]`` or batched ``[N, C_in, H, W]``; ``kernel`` is
    ``[C_out, C_in, k, k]``; ``bias`` (optional) is ``[C_out]``.
    """
    if x.ndim not in (3, 4):
        raise ValueError(f"conv2d: input shape {x.shape} incompatible with kernel shape {kernel.shape}")
    unbatched = x.ndim == 3
    _check_conv(x.shape, x.shape[-3], kernel, bias, stride, pad, x.shape[-2], x.shape[-1])
    xb = reshape(x, (1,) + x.shape) if unbatched else x
    y = transpose(conv2d_nhwc(transpose(xb, (0, 2, 3, 1)), kernel, bias, stride, pad), (0, 3, 1, 2))
    return reshape(y, y.shape[1:]) if unbatched else y


# ---------------------------------------------------------------- checking


def finite_diff_check(f, x, eps=1e-6):
    """Largest relative disagreement between autodiff and central differences.

    ``f`` maps a Tensor to a scalar Tensor. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    backward(f(xt))
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad
    flat = base.reshape(-1)
    numeric = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(base.copy())).item()
            flat[i] = orig - eps
            fm = f(Tensor(base.copy())).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a)))) if a.size else 0.0
