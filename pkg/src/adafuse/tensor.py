"""Dense real tensor with reverse-mode automatic differentiation.

The engine is a tape of closures: every operation records its parents and
a backward rule, ``backward()`` on a scalar loss walks the tape in reverse
topological order and accumulates gradients (sum over all paths) into the
``grad`` field of each leaf that has ``requires_grad`` set.

Only the operations the fusion network needs are implemented.  Elementwise
ops require equal shapes or a python scalar; matmul additionally supports
one shared leading batch dimension.  Anything fancier is rejected so every
backward rule stays auditable.
"""

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf as _erf

from .config import default_dtype

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (inference / metric evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")


class Tensor:
    """N-dimensional real array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_done")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=default_dtype())
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._done = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False):
        return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False):
        return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- graph mechanics ------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar node.

        Populates ``grad`` on every reachable tensor that requires grad.
        A second sweep from the same node is rejected; rebuild the graph
        (re-run the forward pass) instead.
        """
        if self.size != 1:
            raise RuntimeError("backward() requires a scalar loss tensor")
        if self._done:
            raise RuntimeError("backward() already called on this graph; rebuild the forward pass")

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            node._done = True
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                # leaf parameter/input: accumulate
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg

    # -- operator sugar -------------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward):
    """Create a graph node; drops the tape when grad tracking is off."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._done = False
    out._op = op
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _binary_prep(a, b, op):
    a = _as_tensor(a)
    scalar = not isinstance(b, Tensor) and np.isscalar(b)
    if scalar:
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    elif not isinstance(b, Tensor):
        b = Tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _unbroadcast(g, shape):
    # only scalar-vs-array mixing is allowed, so either shapes match or
    # the operand is a scalar that absorbs the full sum
    if g.shape == tuple(shape):
        return g
    return g.sum().reshape(shape)


# -- elementwise --------------------------------------------------------------


def add(a, b):
    a, b = _binary_prep(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b):
    a, b = _binary_prep(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b):
    a, b = _binary_prep(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a, b):
    a, b = _binary_prep(a, b, "div")

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), "div", bw)


def texp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def bw(g):
        return (g * out_data,)

    return _make(out_data, (a,), "exp", bw)


def tlog(a):
    a = _as_tensor(a)

    def bw(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), "log", bw)


def tlog1p(a):
    a = _as_tensor(a)

    def bw(g):
        return (g / (1.0 + a.data),)

    return _make(np.log1p(a.data), (a,), "log1p", bw)


def tsqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def bw(g):
        # subgradient 0 at exactly zero keeps the zero-loss cases clean
        denom = 2.0 * out_data
        safe = np.where(denom == 0.0, 1.0, denom)
        return (np.where(denom == 0.0, 0.0, g / safe),)

    return _make(out_data, (a,), "sqrt", bw)


def tabs(a):
    a = _as_tensor(a)

    def bw(g):
        return (g * np.sign(a.data),)

    return _make(np.abs(a.data), (a,), "abs", bw)


def sigmoid(a):
    a = _as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        return (g * out_data * (1.0 - out_data),)

    return _make(out_data, (a,), "sigmoid", bw)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact-erf GELU: x * Phi(x)."""
    a = _as_tensor(a)
    phi = 0.5 * (1.0 + _erf(a.data * _INV_SQRT2))

    def bw(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (phi + a.data * pdf),)

    return _make(a.data * phi, (a,), "gelu", bw)


# -- reductions & shape ops ---------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.data.dtype),)

    return _make(np.asarray(out_data), (a,), "sum", bw)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, *shape):
    a = _as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), "reshape", bw)


def transpose(a, *axes):
    a = _as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    inv = np.argsort(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), "transpose", bw)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.ascontiguousarray(p.squeeze(axis))
                     for p in np.split(g, len(tensors), axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, "stack", bw)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    """Matrix product; 2D x 2D or stacked 3D with equal leading batch dim."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3) or a.ndim != b.ndim:
        raise ValueError(f"matmul: unsupported ranks {a.ndim} x {b.ndim}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree {a.shape} x {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ValueError(f"matmul: batch dimensions disagree {a.shape} x {b.shape}")

    def bw(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(np.matmul(a.data, b.data), (a, b), "matmul", bw)


def linear(x, w, b=None):
    """x @ w + b with a broadcast bias row; x is (..., n), w is (n, m)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: {x.shape} x {w.shape}")
    out_data = np.matmul(x.data, w.data)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        out_data = out_data + b.data
        parents.append(b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        grads = (np.matmul(g, np.swapaxes(w.data, 0, 1)), np.matmul(x2.T, g2))
        if b is not None:
            grads = grads + (g2.sum(axis=0),)
        return grads

    return _make(out_data, parents, "linear", bw)


# -- normalization & attention primitives -------------------------------------


def softmax(x, axis=-1):
    """Stable softmax along one axis; rows sum to 1."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _make(out_data, (x,), "softmax", bw)


def layernorm(x, gain, bias, eps=1e-5):
    """Zero-mean unit-variance over the last axis, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layernorm: affine shape {gain.shape}/{bias.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bw(g):
        gh = g * gain.data
        # d xhat / d x backward, standard layernorm rule
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gh - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out_data, (x, gain, bias), "layernorm", bw)


# -- spatial ops --------------------------------------------------------------


def conv2d(x, w, b=None, padding="same"):
    """Cross-correlation of (C,H,W) with (Cout,C,k,k) kernels, stride 1.

    "same" zero-pads by (k-1)/2 so the spatial size is preserved; "valid"
    shrinks by k-1.  Kernel must be odd and square.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ValueError(f"conv2d: ranks {x.ndim}/{w.ndim}, expected 3/4")
    c_out, c_in, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be odd and square, got {kh}x{kw}")
    if x.shape[0] != c_in:
        raise ValueError(f"conv2d: input channels {x.shape[0]} != kernel channels {c_in}")
    if padding not in ("same", "valid"):
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    k = kh
    pad = (k - 1) // 2 if padding == "same" else 0
    _, h, wd = x.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    oh, ow = xp.shape[1] - k + 1, xp.shape[2] - k + 1
    if oh <= 0 or ow <= 0:
        raise ValueError("conv2d: kernel larger than input")
    # im2col: (C*k*k, oh*ow)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * k * k, oh * ow)
    wmat = w.data.reshape(c_out, c_in * k * k)
    out_data = np.matmul(wmat, cols).reshape(c_out, oh, ow)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (c_out,):
            raise ValueError(f"conv2d: bias shape {b.shape} != ({c_out},)")
        out_data = out_data + b.data[:, None, None]
        parents.append(b)

    def bw(g):
        gmat = g.reshape(c_out, oh * ow)
        dw = np.matmul(gmat, cols.T).reshape(w.shape)
        dcols = np.matmul(wmat.T, gmat).reshape(c_in, k, k, oh, ow)
        dxp = np.zeros_like(xp)
        for dy in range(k):
            for dx_ in range(k):
                dxp[:, dy:dy + oh, dx_:dx_ + ow] += dcols[:, dy, dx_]
        dx = dxp[:, pad:pad + h, pad:pad + wd] if pad else dxp
        grads = (dx, dw)
        if b is not None:
            grads = grads + (g.sum(axis=(1, 2)),)
        return grads

    return _make(out_data, parents, "conv2d", bw)


def maxpool2d(x, window=2):
    """Non-overlapping max pooling; ties route gradient to the first
    window element in row-major order."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ValueError("maxpool2d: expected (C,H,W)")
    c, h, w = x.shape
    if h % window or w % window:
        raise ValueError(f"maxpool2d: spatial size {h}x{w} not divisible by {window}")
    oh, ow = h // window, w // window
    patches = x.data.reshape(c, oh, window, ow, window).transpose(0, 1, 3, 2, 4)
    flat = patches.reshape(c, oh, ow, window * window)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        return (dflat.reshape(c, oh, ow, window, window)
                .transpose(0, 1, 3, 2, 4).reshape(c, h, w),)

    return _make(np.ascontiguousarray(out_data), (x,), "maxpool2d", bw)


def _bilinear_axis_indices(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0f = np.floor(src)
    t = src - i0f
    i0 = np.clip(i0f.astype(np.int64), 0, n_in - 1)
    i1 = np.clip(i0f.astype(np.int64) + 1, 0, n_in - 1)
    return i0, i1, t


def upsample2x(x):
    """Bilinear 2x upsampling, align_corners disabled."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ValueError("upsample2x: expected (C,H,W)")
    c, h, w = x.shape
    ri0, ri1, rt = _bilinear_axis_indices(h, 2 * h)
    ci0, ci1, ct = _bilinear_axis_indices(w, 2 * w)
    rt_ = rt[None, :, None]
    ct_ = ct[None, None, :]
    rows = (1.0 - rt_) * x.data[:, ri0, :] + rt_ * x.data[:, ri1, :]
    out_data = (1.0 - ct_) * rows[:, :, ci0] + ct_ * rows[:, :, ci1]

    def bw(g):
        drows = np.zeros((c, 2 * h, w), dtype=g.dtype)
        np.add.at(drows, (slice(None), slice(None), ci0), g * (1.0 - ct_))
        np.add.at(drows, (slice(None), slice(None), ci1), g * ct_)
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), ri0, slice(None)), drows * (1.0 - rt_))
        np.add.at(dx, (slice(None), ri1, slice(None)), drows * rt_)
        return (dx,)

    return _make(out_data.astype(x.data.dtype), (x,), "upsample2x", bw)


def pad_reflect2d(x, pad):
    """Reflect-pad the two trailing spatial axes of a (C,H,W) tensor."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ValueError("pad_reflect2d: expected (C,H,W)")
    c, h, w = x.shape
    ri = np.pad(np.arange(h), pad, mode="reflect")
    ci = np.pad(np.arange(w), pad, mode="reflect")
    out_data = x.data[:, ri[:, None], ci[None, :]]

    def bw(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), ri[:, None], ci[None, :]), g)
        return (dx,)

    return _make(np.ascontiguousarray(out_data), (x,), "pad_reflect2d", bw)


# -- test oracle --------------------------------------------------------------


def finite_difference_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function of one tensor.

    Per-element step is h * max(1, |x_i|).  Evaluates in the tensor's own
    dtype; callers wanting oracle accuracy should pass float64 data.
    """
    x = _as_tensor(x)
    base = x.data.copy()
    grad = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        step = h * max(1.0, abs(float(flat[i])))
        orig = flat[i]
        flat[i] = orig + step
        with no_grad():
            fp = float(f(Tensor(base)).data)
        flat[i] = orig - step
        with no_grad():
            fm = float(f(Tensor(base)).data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return Tensor(grad)
