"""A small reverse-mode autodiff core over numpy arrays.

Tensors wrap an ``ndarray`` and, when they take part in a differentiable
computation, remember their parents plus a closure mapping the output
gradient to parent gradients. :meth:`Tensor.backward` walks the graph in
reverse topological order.

Gradients *accumulate* into ``leaf.grad``; callers reset them explicitly
(see :func:`zero_grad`).

Image tensors are channels-last ``(N, H, W, C)``.
"""
from __future__ import annotations

import contextlib

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Incompatible operand shapes."""


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
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None,
                 _parents=(), _backward=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- introspection -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- graph ----------------------------------------------------------------
    def backward(self):
        """Backpropagate from this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype, copy=True)
                else:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
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
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    # constants take the dtype of the tensor operand so float32 graphs stay float32
    if isinstance(a, Tensor):
        return a, _as_tensor(b, like=a)
    return _as_tensor(a, like=b), b


def _result(data, parents, backward):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        # constant operand: skip wrapping so python scalars stay weakly typed
        c = b

        def backward_c(g):
            return (_unbroadcast(g * c, a.shape),)

        return _result(a.data * c, (a,), backward_c)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def exp(x):
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x):
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip_min(x, lo):
    """``max(x, lo)``; gradient is blocked where the floor is active."""
    keep = x.data > lo
    return _result(np.where(keep, x.data, lo).astype(x.dtype, copy=False), (x,),
                   lambda g: (g * keep,))


def relu(x):
    # subgradient 0 at 0
    keep = x.data > 0
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def reshape(x, shape):
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, key):
    def backward(g):
        out = np.zeros_like(x.data)
        out[key] = g
        return (out,)

    return _result(x.data[key], (x,), backward)


def concat(tensors, axis=-1):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take_last(x, index):
    """Gather ``x[..., index]`` along the last axis (``index`` has x.shape[:-1])."""
    idx = np.asarray(index)[..., None].astype(np.intp)
    if idx.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"index shape {index.shape} does not match {x.shape[:-1]}")

    def backward(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, idx, g[..., None], axis=-1)
        return (out,)

    return _result(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), backward)


# ---------------------------------------------------------------------------
# network ops


class NonFiniteError(ValueError):
    pass


def softmax(x, axis=-1):
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("softmax received non-finite logits")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation. ``x``: (N,H,W,Cin) or (H,W,Cin); ``w``: (kh,kw,Cin,Cout)."""
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), w, b, stride, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, kcin, cout = w.shape
    if cin != kcin:
        raise ShapeError(f"input has {cin} channels but kernel expects {kcin}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.reshape(-1, cin)
    else:
        xp = x.data
        if padding:
            xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        cols = _kernels.im2col(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)
        cols = cols.reshape(-1, kh * kw * cin)
    wmat = w.data.reshape(-1, cout)
    out = cols @ wmat
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ wmat.T
            if pointwise:
                gx = gcols.reshape(x.shape)
            else:
                gcols = gcols.reshape(n, ho, wo, kh, kw, cin)
                gxp = _kernels.col2im(gcols, hp, wp, stride)
                gx = gxp[:, padding:padding + h, padding:padding + wd, :] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


def maxpool2d(x):
    """2x2 max pooling with stride 2 on an NHWC tensor."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even extents, got {h}x{w}")
    out, idx = _kernels.maxpool2(np.ascontiguousarray(x.data))
    return _result(out, (x,), lambda g: (_kernels.maxpool2_backward(np.ascontiguousarray(g), idx),))


def upsample2x(x):
    """Nearest-neighbour 2x upsampling on an NHWC tensor."""
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _result(out, (x,), backward)


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Per-channel batch norm over (N, H, W). Running buffers are updated in place."""
    c = x.shape[-1]
    x2 = np.ascontiguousarray(x.data).reshape(-1, c)
    m = x2.shape[0]
    if training:
        mu, var = _kernels.channel_moments(x2)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat2 = (x2 - mu) * invstd
    out = (xhat2 * gamma.data + beta.data).reshape(x.shape)

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(-1, c)
        if training:
            gx, gg, gb = _kernels.bn_backward(g2, xhat2, gamma.data, invstd)
        else:
            gx = g2 * (gamma.data * invstd)
            gg = (g2 * xhat2).sum(axis=0)
            gb = g2.sum(axis=0)
        return gx.reshape(x.shape), gg, gb

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)
