"""Minimal reverse-mode automatic differentiation over dense float32 tensors.

A Tape records operations in topological order; backward() replays them in
exact reverse order. Shapes must match explicitly except for a trailing-shape
broadcast in add/mul (bias and per-feature scale), which keeps silent
broadcasting bugs out. All values are float32 and must stay finite.
"""

import math

import numpy as np
from scipy.special import erf

from .errors import NumericalError, ValidationError

DTYPE = np.float32
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Handle to a node on a tape. Immutable data; gradients live on the tape."""

    __slots__ = ("data", "tape", "idx")

    def __init__(self, data, tape, idx):
        self.data = data
        self.tape = tape
        self.idx = idx

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, idx={self.idx})"


class Tape:
    """Single-owner operation record. Not safe to share across threads."""

    def __init__(self):
        self.parents = []
        self.vjps = []
        self.shapes = []
        self.grads = None

    def leaf(self, data):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 0 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        return self._record(arr, (), None)

    def _record(self, data, parent_idx, vjp):
        if not np.all(np.isfinite(data)):
            raise NumericalError("non-finite value produced on tape")
        idx = len(self.parents)
        self.parents.append(tuple(parent_idx))
        self.vjps.append(vjp)
        self.shapes.append(data.shape)
        return Tensor(data, self, idx)

    def backward(self, loss, seed=None):
        """Reverse sweep from `loss`. Without `seed` the loss must be scalar;
        with `seed` (an array matching the loss shape) the sweep starts from
        that cotangent instead, allowing non-scalar roots."""
        if loss.tape is not self:
            raise ValidationError("loss tensor does not belong to this tape")
        if seed is None:
            if loss.data.shape != ():
                raise ValidationError(
                    f"backward requires a scalar loss, got shape {loss.data.shape}")
            seed = np.ones((), dtype=DTYPE)
        else:
            seed = np.asarray(seed, dtype=DTYPE)
            if seed.shape != loss.data.shape:
                raise ValidationError(
                    f"seed shape {seed.shape} does not match loss shape "
                    f"{loss.data.shape}")
        grads = [None] * len(self.parents)
        grads[loss.idx] = seed
        for i in range(loss.idx, -1, -1):
            g = grads[i]
            if g is None or self.vjps[i] is None:
                continue
            parent_grads = self.vjps[i](g)
            for pi, pg in zip(self.parents[i], parent_grads):
                if pg is None:
                    continue
                pg = pg.astype(DTYPE, copy=False)
                if grads[pi] is None:
                    grads[pi] = pg.copy()
                else:
                    grads[pi] += pg
        self.grads = grads

    def grad(self, tensor):
        """Gradient of the last backward() loss wrt `tensor` (zeros if unreached)."""
        if self.grads is None:
            raise ValidationError("backward has not been run on this tape")
        g = self.grads[tensor.idx]
        if g is None:
            return np.zeros(self.shapes[tensor.idx], dtype=DTYPE)
        return g


def _same_tape(*tensors):
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValidationError("operands come from different tapes")
    return tape


def _check_elementwise(a, b, opname):
    """Exact match, or b broadcasting up to a's shape (never the reverse)."""
    if a.data.shape == b.data.shape:
        return False
    sa, sb = a.data.shape, b.data.shape
    if len(sb) <= len(sa):
        tail = sa[len(sa) - len(sb):]
        if all(x == y or x == 1 for x, y in zip(sb, tail)):
            return True
    raise ValidationError(
        f"{opname}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _reduce_to(grad, shape):
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(grad)


def add(a, b):
    tape = _same_tape(a, b)
    _check_elementwise(a, b, "add")
    out = a.data + b.data
    shape_b = b.data.shape

    def vjp(g):
        return g, _reduce_to(g, shape_b)
    return tape._record(out, (a.idx, b.idx), vjp)


def sub(a, b):
    tape = _same_tape(a, b)
    _check_elementwise(a, b, "sub")
    out = a.data - b.data
    shape_b = b.data.shape

    def vjp(g):
        return g, -_reduce_to(g, shape_b)
    return tape._record(out, (a.idx, b.idx), vjp)


def mul(a, b):
    tape = _same_tape(a, b)
    _check_elementwise(a, b, "mul")
    out = a.data * b.data
    da, db = a.data, b.data
    shape_b = b.data.shape

    def vjp(g):
        return g * db, _reduce_to(g * da, shape_b)
    return tape._record(out, (a.idx, b.idx), vjp)


def div(a, b):
    tape = _same_tape(a, b)
    _check_elementwise(a, b, "div")
    out = a.data / b.data
    da, db = a.data, b.data
    shape_b = b.data.shape

    def vjp(g):
        return g / db, _reduce_to(-g * da / (db * db), shape_b)
    return tape._record(out, (a.idx, b.idx), vjp)


def scale(a, c):
    """Multiply by a python constant (no gradient for the constant)."""
    c = DTYPE(c)

    def vjp(g):
        return (g * c,)
    return a.tape._record(a.data * c, (a.idx,), vjp)


def add_const(a, c):
    def vjp(g):
        return (g,)
    return a.tape._record(a.data + DTYPE(c), (a.idx,), vjp)


def matmul(a, b):
    tape = _same_tape(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValidationError(
            f"matmul: operands must be at least 2-d, got {a.data.shape} and "
            f"{b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValidationError(
            f"matmul: inner dims differ, {a.data.shape} vs {b.data.shape}")
    out = np.matmul(a.data, b.data)
    da, db = a.data, b.data
    sa, sb = a.data.shape, b.data.shape

    def vjp(g):
        ga = _reduce_to(np.matmul(g, np.swapaxes(db, -1, -2)), sa)
        gb = _reduce_to(np.matmul(np.swapaxes(da, -1, -2), g), sb)
        return ga, gb
    return tape._record(out, (a.idx, b.idx), vjp)


def reshape(a, shape):
    old = a.data.shape
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)
    return a.tape._record(out, (a.idx,), vjp)


def transpose(a, axes=None):
    ax = tuple(axes) if axes is not None else tuple(range(a.data.ndim))[::-1]
    inv = np.argsort(ax)
    out = np.ascontiguousarray(np.transpose(a.data, ax))

    def vjp(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)
    return a.tape._record(out, (a.idx,), vjp)


def concat(tensors, axis=0):
    tape = _same_tape(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))
    return tape._record(out, tuple(t.idx for t in tensors), vjp)


def slice_(a, key):
    """Basic slicing only (views), so the adjoint is a pure scatter."""
    out = np.ascontiguousarray(a.data[key])
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[key] = g
        return (full,)
    return a.tape._record(out, (a.idx,), vjp)


def sum_(a, axis=None):
    out = np.asarray(a.data.sum(axis=axis), dtype=DTYPE)
    shape = a.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(DTYPE),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).astype(DTYPE),)
    return a.tape._record(out, (a.idx,), vjp)


def mean(a, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def relu(a):
    out = np.maximum(a.data, 0)
    mask = (a.data > 0).astype(DTYPE)

    def vjp(g):
        return (g * mask,)
    return a.tape._record(out, (a.idx,), vjp)


def gelu(a):
    x = a.data.astype(np.float64)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(DTYPE)
    deriv = (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)).astype(DTYPE)

    def vjp(g):
        return (g * deriv,)
    return a.tape._record(out, (a.idx,), vjp)


def logistic(a):
    out = (1.0 / (1.0 + np.exp(-a.data.astype(np.float64)))).astype(DTYPE)

    def vjp(g):
        return (g * out * (1.0 - out),)
    return a.tape._record(out, (a.idx,), vjp)


def tanh(a):
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)
    return a.tape._record(out, (a.idx,), vjp)


def exp(a):
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)
    return a.tape._record(out, (a.idx,), vjp)


def log(a):
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    da = a.data

    def vjp(g):
        return (g / da,)
    return a.tape._record(out, (a.idx,), vjp)


def sqrt(a):
    out = np.sqrt(a.data)

    def vjp(g):
        return (g / (2.0 * out),)
    return a.tape._record(out, (a.idx,), vjp)


def softmax(a, axis=-1):
    x = a.data.astype(np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(DTYPE)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)
    return a.tape._record(out, (a.idx,), vjp)


def layer_norm(a, axis=-1, eps=1e-5):
    """Normalization only; affine scale/shift are separate mul/add ops."""
    x = a.data.astype(np.float64)
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y.astype(DTYPE)

    def vjp(g):
        g64 = g.astype(np.float64)
        gm = g64.mean(axis=axis, keepdims=True)
        gym = (g64 * y).mean(axis=axis, keepdims=True)
        dx = inv * (g64 - gm - y * gym)
        return (dx.astype(DTYPE),)
    return a.tape._record(out, (a.idx,), vjp)


def embedding_lookup(table, indices):
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise ValidationError(
            f"embedding_lookup: table must be 2-d, got {table.data.shape}")
    if np.any(idx < 0) or np.any(idx >= table.data.shape[0]):
        raise ValidationError("embedding_lookup: index out of range")
    out = table.data[idx]
    shape = table.data.shape

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)
    return table.tape._record(out, (table.idx,), vjp)


def huber(a, delta=1.0):
    """Elementwise Huber penalty: x^2/2 inside delta, linear outside."""
    x = a.data
    absx = np.abs(x)
    quad = absx <= delta
    out = np.where(quad, 0.5 * x * x, delta * (absx - 0.5 * delta)).astype(DTYPE)
    deriv = np.clip(x, -delta, delta).astype(DTYPE)

    def vjp(g):
        return (g * deriv,)
    return a.tape._record(out, (a.idx,), vjp)


def repeat_rows(a, n):
    """Tile a (1, d) row to (n, d)."""
    if a.data.ndim != 2 or a.data.shape[0] != 1:
        raise ValidationError(
            f"repeat_rows: expected shape (1, d), got {a.data.shape}")
    out = np.repeat(a.data, n, axis=0)

    def vjp(g):
        return (g.sum(axis=0, keepdims=True),)
    return a.tape._record(out, (a.idx,), vjp)


def _im2col(x, kh, kw, stride, pad):
    N, C, H, W = x.shape
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    cols = np.empty((N, C, kh, kw, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * Ho:stride,
                                 j:j + stride * Wo:stride]
    return cols.reshape(N, C * kh * kw, Ho * Wo), Ho, Wo


def _col2im(cols, xshape, kh, kw, stride, pad, Ho, Wo):
    N, C, H, W = xshape
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=DTYPE)
    cols = cols.reshape(N, C, kh, kw, Ho, Wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                cols[:, :, i, j]
    if pad > 0:
        return xp[:, :, pad:-pad, pad:-pad]
    return xp


def conv2d(x, w, stride=1, pad=0):
    """NCHW convolution (cross-correlation) via im2col + matmul."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValidationError(
            f"conv2d: expected 4-d input and kernel, got {x.data.shape} and "
            f"{w.data.shape}")
    N, C, H, W = x.data.shape
    F, Cw, kh, kw = w.data.shape
    if Cw != C:
        raise ValidationError(
            f"conv2d: channel mismatch, input {x.data.shape} vs kernel "
            f"{w.data.shape}")
    cols, Ho, Wo = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(F, C * kh * kw)
    out = np.matmul(wmat, cols).reshape(N, F, Ho, Wo)
    xshape = x.data.shape

    def vjp(g):
        gmat = g.reshape(N, F, Ho * Wo)
        gw = np.einsum("nfp,ncp->fc", gmat, cols).reshape(F, C, kh, kw)
        gcols = np.matmul(wmat.T, gmat)
        gx = _col2im(gcols, xshape, kh, kw, stride, pad, Ho, Wo)
        return gx, gw
    tape = _same_tape(x, w)
    return tape._record(out, (x.idx, w.idx), vjp)


def upsample2d(x):
    """Nearest-neighbour 2x upsampling on NCHW."""
    if x.data.ndim != 4:
        raise ValidationError(f"upsample2d: expected 4-d input, got {x.data.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    N, C, H, W = x.data.shape

    def vjp(g):
        return (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),)
    return x.tape._record(out, (x.idx,), vjp)


def grad_check(function, params, eps=1e-3, tol=1e-3, max_coords=None, seed=0):
    """Compare tape gradients of a scalar-valued function to central differences.

    `function(tape, tensors)` must build and return a scalar Tensor from leaf
    tensors created on `tape` from the numpy arrays in `params`. Returns a
    report dict with the max relative error and the failing coordinates.
    """
    params = [np.asarray(p, dtype=DTYPE) for p in params]
    tape = Tape()
    leaves = [tape.leaf(p) for p in params]
    loss = function(tape, leaves)
    tape.backward(loss)
    analytic = [tape.grad(t) for t in leaves]

    def forward(ps):
        t = Tape()
        return float(function(t, [t.leaf(p) for p in ps]).data)

    rng = np.random.default_rng(seed)
    failures = []
    max_rel = 0.0
    for pi, p in enumerate(params):
        flat = p.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for ci in coords:
            old = flat[ci]
            flat[ci] = old + eps
            fp = forward(params)
            flat[ci] = old - eps
            fm = forward(params)
            flat[ci] = old
            fd = (fp - fm) / (2.0 * eps)
            an = float(analytic[pi].reshape(-1)[ci])
            denom = max(abs(fd), abs(an), 1.0)
            rel = abs(fd - an) / denom
            max_rel = max(max_rel, rel)
            if rel > tol:
                failures.append((pi, int(ci), an, fd, rel))
    return {"max_rel_err": max_rel, "failures": failures,
            "passed": len(failures) == 0}
