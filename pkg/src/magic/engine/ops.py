"""Differentiable operations over Tensors.

Broadcasting is deliberately narrow: equal shapes, python/0-d scalars, or
a per-channel vector against a [B,C,H,W] batch. Anything else is rejected
so shape bugs surface instead of silently reshaping.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, register


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check_dtypes(*tensors):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed dtypes {sorted(d.name for d in dtypes)}")


def _channel_view(b_shape, a_shape):
    """Return the broadcast view shape for b against a, or None if invalid."""
    if b_shape == a_shape:
        return b_shape
    if b_shape == () or (len(b_shape) == 1 and b_shape[0] == 1):
        return ()
    if len(a_shape) == 4:
        c = a_shape[1]
        if b_shape == (c,) or b_shape == (1, c, 1, 1):
            return (1, c, 1, 1)
    return None


def _reduce_to(grad, orig_shape, view_shape):
    if view_shape == orig_shape and grad.shape == orig_shape:
        return grad
    if view_shape == ():
        return np.asarray(grad.sum(), dtype=grad.dtype).reshape(orig_shape)
    # per-channel view (1,C,1,1)
    g = grad.sum(axis=(0, 2, 3), keepdims=True)
    return g.reshape(orig_shape)


def _binary(a, b, fwd, bwd_a, bwd_b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_dtypes(a, b)
    view = _channel_view(b.shape, a.shape)
    if view is None:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")
    bb = b.data.reshape(view) if view != b.shape else b.data
    out = fwd(a.data, bb)

    def backward(g):
        ga = bwd_a(g, a.data, bb)
        gb = bwd_b(g, a.data, bb)
        if gb is not None:
            gb = _reduce_to(gb, b.shape, view)
        return ga, gb

    return register(out, (a, b), backward)


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(a, s: float):
    a = _as_tensor(a)
    s = a.dtype.type(s)
    return register(a.data * s, (a,), lambda g: (g * s,))


def square(a):
    a = _as_tensor(a)
    return register(a.data * a.data, (a,), lambda g: (g * (2 * a.data),))


def relu(a):
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)
    return register(out, (a,), lambda g: (g * (a.data > 0),))


def silu(a):
    a = _as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    sig = sig.astype(a.dtype)
    out = a.data * sig

    def backward(g):
        return (g * (sig * (1 + a.data * (1 - sig))),)

    return register(out, (a,), backward)


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return register(out, (a,), lambda g: (g * out,))


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive values")
    return register(np.log(a.data), (a,), lambda g: (g / a.data,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "silu": silu,
    "relu": relu,
    "square": square,
}


def elementwise(op_kind, a, b=None):
    """Dispatch an elementwise op by name; unary kinds reject a second arg."""
    if op_kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    fn = _ELEMENTWISE[op_kind]
    if op_kind in ("add", "sub", "mul", "scale"):
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return fn(a, b)
    if b is not None:
        raise ValueError(f"{op_kind} is unary")
    return fn(a)


def sum_all(a):
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return register(out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def mean_all(a):
    a = _as_tensor(a)
    n = a.dtype.type(a.size)
    out = np.asarray(a.data.sum() / n, dtype=a.dtype)
    return register(
        out, (a,), lambda g: ((np.broadcast_to(g, a.shape) / n).astype(a.dtype),)
    )


def linear(x, weight, bias=None):
    """Affine map: x[B,N] @ weight[M,N]^T + bias[M]."""
    _check_dtypes(*(t for t in (x, weight, bias) if t is not None))
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shapes {x.shape} x {weight.shape} do not agree")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return register(out, inputs, backward)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of x[B,Cin,H,W] with weight[Cout,Cin,k,k]."""
    _check_dtypes(*(t for t in (x, weight, bias) if t is not None))
    b, cin, h, w = x.shape
    cout, cin_w, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd extent, got {weight.shape}")
    if cin != cin_w:
        raise ShapeError(f"input channels {cin} != kernel channels {cin_w}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if (h + 2 * padding - k) % stride or (w + 2 * padding - k) % stride:
        raise ShapeError(
            f"non-integral output extent for input {x.shape}, k={k}, "
            f"stride={stride}, padding={padding}"
        )
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    xp = np.ascontiguousarray(
        np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    )
    cols = kernels.im2col(xp, k, stride, out_h, out_w)
    wm = weight.data.reshape(cout, cin * k * k)
    out = np.matmul(wm, cols).reshape(b, cout, out_h, out_w)
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
        out = out + bias.data.reshape(1, cout, 1, 1)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.reshape(b, cout, out_h * out_w)
        gcols = np.matmul(wm.T, gm)
        gxp = kernels.col2im(
            np.ascontiguousarray(gcols), cin, k, stride, h + 2 * padding, w + 2 * padding, out_h, out_w
        )
        gx = gxp[:, :, padding : padding + h, padding : padding + w]
        gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return register(out, inputs, backward)


def normalize_channels(x, gain, bias, groups, eps=1e-5):
    """Group normalization over (group-channels, H, W) plus per-channel affine."""
    _check_dtypes(x, gain, bias)
    if eps <= 0:
        raise ValueError("eps must be positive")
    b, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"{c} channels not divisible by {groups} groups")
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"gain/bias must be ({c},), got {gain.shape}/{bias.shape}")
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = ((xg - mu) * inv).reshape(b, c, h, w)
    gview = gain.data.reshape(1, c, 1, 1)
    out = xhat * gview + bias.data.reshape(1, c, 1, 1)

    def backward(g):
        n = xg.shape[2]
        gxhat = (g * gview).reshape(b, groups, n)
        xh = xhat.reshape(b, groups, n)
        m1 = gxhat.mean(axis=2, keepdims=True)
        m2 = (gxhat * xh).mean(axis=2, keepdims=True)
        gx = (inv * (gxhat - m1 - xh * m2)).reshape(b, c, h, w).astype(x.dtype)
        ggain = (g * xhat).sum(axis=(0, 2, 3))
        gbias = g.sum(axis=(0, 2, 3))
        return gx, ggain, gbias

    return register(out, (x, gain, bias), backward)


def resample(x, direction):
    """2x nearest-neighbor resampling; down keeps the top-left of each block."""
    x = _as_tensor(x)
    b, c, h, w = x.shape
    if direction == "down":
        if h % 2 or w % 2:
            raise ShapeError(f"odd spatial extent {h}x{w} cannot be downsampled")
        out = np.ascontiguousarray(x.data[:, :, ::2, ::2])

        def backward(g):
            gx = np.zeros_like(x.data)
            gx[:, :, ::2, ::2] = g
            return (gx,)

        return register(out, (x,), backward)
    if direction == "up":
        out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

        def backward(g):
            return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return register(out, (x,), backward)
    raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")


def concat_channels(tensors):
    _check_dtypes(*tensors)
    if len({(t.shape[0],) + t.shape[2:] for t in tensors}) != 1:
        raise ShapeError(f"concat extents disagree: {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return register(out, tuple(tensors), backward)


def global_mean_pool(x):
    """Spatial mean: [B,C,H,W] -> [B,C]."""
    b, c, h, w = x.shape
    n = x.dtype.type(h * w)
    out = x.data.sum(axis=(2, 3)) / n

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / n, x.shape).astype(x.dtype),)

    return register(out, (x,), backward)


def embedding(table, ids):
    """Row lookup table[K,D] by integer ids[B], with scatter-add gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"ids must be a vector, got shape {ids.shape}")
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise ValueError("embedding id out of range")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return register(out, (table,), backward)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of logits[B,K] against integer labels[B]."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} != ({b},)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(b), labels] - np.log(ez.sum(axis=1)))
    out = np.asarray(nll.sum() / b, dtype=logits.dtype)

    def backward(g):
        gl = probs.copy()
        gl[np.arange(b), labels] -= 1
        return ((g * gl / logits.dtype.type(b)).astype(logits.dtype),)

    return register(out, (logits,), backward)


def mse(a, b):
    """Mean squared error, the per-element noise-prediction objective."""
    return mean_all(square(sub(a, b)))


def sum_sq_diff(a, b):
    """Sum of squared differences over all elements."""
    return sum_all(square(sub(a, b)))
