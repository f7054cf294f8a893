"""Minimal reverse-mode tensor core.

Dense float64 arrays plus the handful of differentiable ops the encoder and
prediction head need: matmul, masked softmax, layer norm, gelu, convolution,
gather/scatter and elementwise arithmetic. Gradients are propagated over a
tape built during the forward pass. Every op checks its output for NaN/Inf
and raises instead of propagating.

Not a general autodiff system; ops outside this set are intentionally absent.
"""
from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf as _erf

from .errors import FlowPolicyError, NumericsError, ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (forward values unchanged)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr):
    if not np.all(np.isfinite(arr)):
        raise NumericsError("operation produced non-finite values")
    return arr


class Tensor:
    """A dense float64 array with an optional gradient slot.

    Values are treated as immutable once the tensor participates in an op;
    gradient accumulation mutates only ``.grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

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
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff --------------------------------------------------------

    def backward(self, seed=None):
        """Backpropagate from this tensor.

        Without a seed the tensor must be scalar (loss). Gradients accumulate
        into ``.grad`` of every tensor on the tape that requires gradients.
        """
        if seed is None:
            if self.data.size != 1:
                raise NumericsError("backward() without seed requires a scalar")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ShapeError("seed shape must match tensor shape")

        order = []
        seen = set()
        stack = [(self, False)]
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

        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + seed

        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _index(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        if self.data.ndim != 2:
            raise ShapeError("T is defined for 2-D tensors only")
        return transpose(self, (1, 0))

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp):
    """Build an op result, attaching tape links only when gradients can flow."""
    _check_finite(data)
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = req
    out._parents = tuple(parents) if req else ()
    out._vjp = vjp if req else None
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), vjp)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), vjp)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if np.any(b.data == 0.0):
        raise NumericsError("division by zero")
    data = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), vjp)


def exp(x):
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        data = np.exp(x.data)
    return _make(data, (x,), lambda g: (g * data,))


def log(x):
    x = _as_tensor(x)
    if np.any(x.data <= 0.0):
        raise NumericsError("log of non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def abs_(x):
    x = _as_tensor(x)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


def maximum(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data >= b.data

    def vjp(g):
        return (_unbroadcast(np.where(take_a, g, 0.0), a.data.shape),
                _unbroadcast(np.where(take_a, 0.0, g), b.data.shape))

    return _make(np.maximum(a.data, b.data), (a, b), vjp)


def minimum(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data <= b.data

    def vjp(g):
        return (_unbroadcast(np.where(take_a, g, 0.0), a.data.shape),
                _unbroadcast(np.where(take_a, 0.0, g), b.data.shape))

    return _make(np.minimum(a.data, b.data), (a, b), vjp)


def clamp(x, lo, hi):
    """Clip values to [lo, hi]; gradient is passed only where unclipped."""
    x = _as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,),
                 lambda g: (np.where(inside, g, 0.0),))


def relu(x):
    x = _as_tensor(x)
    pos = x.data > 0.0
    return _make(np.where(pos, x.data, 0.0), (x,),
                 lambda g: (np.where(pos, g, 0.0),))


def sigmoid(x):
    # exp overflow on large negatives saturates to exactly 0, which is fine
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        data = 1.0 / (1.0 + np.exp(-x.data))
    return _make(data, (x,), lambda g: (g * data * (1.0 - data),))


def gelu(x):
    """Gaussian-error linear unit, exact erf form (not the tanh approximation)."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    data = x.data * cdf

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(data, (x,), vjp)


# -- shape ops -----------------------------------------------------------


def reshape(x, shape):
    x = _as_tensor(x)
    old = x.data.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tensors, vjp)


def _index(x, idx):
    x = _as_tensor(x)
    data = x.data[idx]
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data, dtype=np.float64)

    def vjp(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(data.copy(), (x,), vjp)


def gather_rows(x, indices):
    """Select rows of a 2-D tensor; duplicate indices accumulate on backward."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("gather_rows expects a 2-D tensor")
    indices = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(x.data)
        np.add.at(out, indices, g)
        return (out,)

    return _make(x.data[indices].copy(), (x,), vjp)


def scatter_rows(x, indices, n_total):
    """Place rows of a 2-D tensor at ``indices`` in a zero-filled [n_total, d] tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("scatter_rows expects a 2-D tensor")
    indices = np.asarray(indices, dtype=np.intp)
    if len(np.unique(indices)) != len(indices):
        raise ShapeError("scatter_rows indices must be distinct")
    if indices.size and (indices.min() < 0 or indices.max() >= n_total):
        raise ShapeError("scatter_rows index out of range")
    data = np.zeros((n_total, x.data.shape[1]), dtype=np.float64)
    data[indices] = x.data

    def vjp(g):
        return (g[indices].copy(),)

    return _make(data, (x,), vjp)


def reduce_sum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, x.data.shape).copy(),)

    return _make(np.asarray(data, dtype=np.float64), (x,), vjp)


def reduce_mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    n = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- core neural ops -----------------------------------------------------


def matmul(a, b):
    """Matrix product of 2-D tensors, or stacked product of 3-D tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim == 2 and b.data.ndim == 2:
        if a.data.shape[1] != b.data.shape[0]:
            raise ShapeError(
                f"matmul inner dims differ: {a.data.shape} x {b.data.shape}")

        def vjp(g):
            return g @ b.data.T, a.data.T @ g

    elif a.data.ndim == 3 and b.data.ndim == 3:
        if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
            raise ShapeError(
                f"batched matmul dims differ: {a.data.shape} x {b.data.shape}")

        def vjp(g):
            return (g @ b.data.transpose(0, 2, 1),
                    a.data.transpose(0, 2, 1) @ g)

    else:
        raise ShapeError("matmul supports 2-D x 2-D or 3-D x 3-D only")
    return _make(a.data @ b.data, (a, b), vjp)


def masked_softmax(scores, allowed):
    """Row softmax over the last axis restricted to ``allowed`` entries.

    Blocked entries are exactly zero in the output and receive no gradient;
    allowed entries normalise to 1 per row. The zeroing happens after
    exponentiation over the allowed set, which is mathematically identical
    to forcing blocked scores to -inf but never materialises infinities.

    A row with no allowed entry signals a malformed flow policy and raises.
    """
    scores = _as_tensor(scores)
    allowed = np.asarray(allowed, dtype=bool)
    allowed = np.broadcast_to(allowed, scores.data.shape)
    if not np.all(allowed.any(axis=-1)):
        raise FlowPolicyError("attention row with every key blocked")

    shifted = scores.data - np.max(np.where(allowed, scores.data, -np.inf),
                                   axis=-1, keepdims=True)
    e = np.zeros_like(scores.data)
    np.exp(shifted, where=allowed, out=e)
    denom = e.sum(axis=-1, keepdims=True)
    p = e / denom

    def vjp(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner),)

    return _make(p, (scores,), vjp)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalise the last axis to zero mean / unit variance, then affine."""
    if eps <= 0.0:
        raise NumericsError("layer_norm eps must be positive")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError("gamma/beta must match the feature dimension")

    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gamma.data * xhat + beta.data

    def vjp(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        reduce_axes = tuple(range(x.data.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        return dx, dgamma, dbeta

    return _make(data, (x, gamma, beta), vjp)


def instance_norm(x, gamma, beta, eps=1e-6):
    """Normalise each channel of a [C, H, W] map over its spatial extent."""
    if eps <= 0.0:
        raise NumericsError("instance_norm eps must be positive")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 3:
        raise ShapeError("instance_norm expects a [C, H, W] map")
    c = x.data.shape[0]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("gamma/beta must match the channel count")

    mu = x.data.mean(axis=(1, 2), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g3 = gamma.data[:, None, None]
    data = g3 * xhat + beta.data[:, None, None]

    def vjp(g):
        dxhat = g * g3
        dx = inv * (dxhat - dxhat.mean(axis=(1, 2), keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=(1, 2), keepdims=True))
        dgamma = (g * xhat).sum(axis=(1, 2))
        dbeta = g.sum(axis=(1, 2))
        return dx, dgamma, dbeta

    return _make(data, (x, gamma, beta), vjp)


def conv2d(x, w, b, padding=0):
    """2-D convolution, stride 1, zero padding.

    x: [c_in, H, W], w: [c_out, c_in, kh, kw], b: [c_out].
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError("conv2d expects x[c,H,W] and w[o,c,kh,kw]")
    cin, H, W = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w or b.data.shape != (cout,):
        raise ShapeError("conv2d channel mismatch")
    p = int(padding)
    xpad = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    Ho, Wo = H + 2 * p - kh + 1, W + 2 * p - kw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d kernel larger than padded input")
    # windows: [c_in, Ho, Wo, kh, kw]
    cols = np.lib.stride_tricks.sliding_window_view(xpad, (kh, kw), axis=(1, 2))
    data = np.einsum("ockl,chwkl->ohw", w.data, cols) + b.data[:, None, None]

    def vjp(g):
        dw = np.einsum("ohw,chwkl->ockl", g, cols)
        db = g.sum(axis=(1, 2))
        dxpad = np.zeros_like(xpad)
        for dy in range(kh):
            for dx in range(kw):
                dxpad[:, dy:dy + Ho, dx:dx + Wo] += np.einsum(
                    "oc,ohw->chw", w.data[:, :, dy, dx], g)
        dx_full = dxpad[:, p:p + H, p:p + W] if p else dxpad
        return dx_full, dw, db

    return _make(data, (x, w, b), vjp)


# -- parameters ----------------------------------------------------------


class ParamStore:
    """Named parameters with accumulated gradient slots.

    Names are unique; iteration follows insertion order, which makes
    checkpoints and SGD updates deterministic.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name, values, requires_grad=True):
        if name in self._params:
            raise ShapeError(f"duplicate parameter name: {name}")
        if any(ch.isspace() for ch in name):
            raise ShapeError(f"parameter name may not contain whitespace: {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=requires_grad)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def sgd_step(self, lr):
        """Plain gradient-descent update on every trainable parameter."""
        for t in self._params.values():
            if t.requires_grad and t.grad is not None:
                t.data -= lr * t.grad

    def n_values(self):
        return sum(t.data.size for t in self._params.values())

    def clone_arrays(self):
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_arrays(self, arrays):
        for name, t in self._params.items():
            if name not in arrays:
                raise ShapeError(f"checkpoint missing parameter: {name}")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"checkpoint shape mismatch for {name}: "
                                 f"{arr.shape} vs {t.data.shape}")
            t.data = arr.copy()
        extra = set(arrays) - set(self._params)
        if extra:
            raise ShapeError(f"checkpoint has unknown parameters: {sorted(extra)}")


_CKPT_MAGIC = "flowtrack-checkpoint 1"
_DTYPES = {"float64": "<f8", "float32": "<f4"}


def save_checkpoint(path, store):
    """Write a named-tensor container: text header, then raw little-endian data."""
    with open(path, "wb") as fh:
        lines = [_CKPT_MAGIC, str(len(store))]
        for name, t in store.items():
            dims = " ".join(str(d) for d in t.data.shape)
            lines.append(f"{name} float64 {t.data.ndim} {dims}".rstrip())
        lines.append("data")
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for _, t in store.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint file back into a name -> array dict."""
    with open(path, "rb") as fh:
        raw = fh.read()
    header_end = raw.find(b"data\n")
    if header_end < 0:
        raise NumericsError("checkpoint missing data marker")
    header = raw[:header_end].decode("ascii").splitlines()
    if not header or header[0] != _CKPT_MAGIC:
        raise NumericsError("not a flowtrack checkpoint")
    n = int(header[1])
    specs = []
    for line in header[2:2 + n]:
        parts = line.split()
        name, dtype, ndim = parts[0], parts[1], int(parts[2])
        dims = tuple(int(d) for d in parts[3:3 + ndim])
        if dtype not in _DTYPES:
            raise NumericsError(f"unsupported checkpoint dtype: {dtype}")
        specs.append((name, dtype, dims))
    out = {}
    offset = header_end + len(b"data\n")
    for name, dtype, dims in specs:
        np_dtype = np.dtype(_DTYPES[dtype])
        count = int(np.prod(dims)) if dims else 1
        nbytes = count * np_dtype.itemsize
        arr = np.frombuffer(raw, dtype=np_dtype, count=count, offset=offset)
        out[name] = arr.astype(np.float64).reshape(dims)
        offset += nbytes
    return out


# -- gradient verification ----------------------------------------------

# Gradient components smaller than this are compared absolutely, not
# relatively, to keep the check meaningful near zero. The floor is raised
# with the loss magnitude because central-difference roundoff noise scales
# like |f|*ulp/eps; without this, exactly-zero gradients (e.g. the key bias,
# which softmax shift-invariance cancels) would fail on pure noise.
_REL_FLOOR = 1e-6


def grad_check(model_fn, store, eps):
    """Compare analytic gradients with central finite differences.

    ``model_fn(store)`` must return a scalar Tensor. Returns the maximum
    relative error over every component of every trainable parameter.
    Frozen parameters (requires_grad=False) are skipped.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise NumericsError(f"grad_check eps out of range: {eps}")

    store.zero_grad()
    loss = model_fn(store)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise NumericsError("model_fn must return a scalar Tensor")
    floor = max(_REL_FLOOR, 1e-5 * abs(loss.item()))
    loss.backward()

    analytic = {}
    for name, t in store.items():
        if t.requires_grad:
            analytic[name] = (t.grad.copy() if t.grad is not None
                              else np.zeros_like(t.data))

    max_rel = 0.0
    with no_grad():
        for name, t in store.items():
            if not t.requires_grad:
                continue
            flat = t.data.reshape(-1)
            ana = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = model_fn(store).item()
                flat[i] = orig - eps
                f_minus = model_fn(store).item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                denom = max(abs(ana[i]), abs(numeric), floor)
                rel = abs(ana[i] - numeric) / denom
                if rel > max_rel:
                    max_rel = rel
    return max_rel
