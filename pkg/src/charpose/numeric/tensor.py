"""Dense tensors with a reverse-mode tape.

Only the primitives the heatmap network needs are provided. Every op works on
plain numpy arrays; when a :class:`Tape` is active the op records a closure
that maps the output gradient to input gradients.

Conv layers use a channels-last layout ``(B, X, Y, Z, C)``.
"""
from __future__ import annotations

import numpy as np

from .. import kernels

_ACTIVE: list["Tape"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"<Tensor{tag} shape={self.shape} dtype={self.dtype}>"

    def numpy(self):
        return self.data

    # operator sugar for the few places it reads better
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def param(data, name=None):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data, dtype=None):
    return Tensor(np.asarray(data, dtype=dtype))


class Tape:
    """Records ops executed inside ``with Tape() as tape:``.

    Reverse iteration over the record list is a valid reverse topological
    order because an op can only consume tensors created before it.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def backward(self, loss: Tensor) -> dict:
        """Gradients of scalar ``loss`` keyed by ``id`` of every reached tensor."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            # keep leaves: tensors that are never outputs stay in grads
        return grads

    def gradients(self, loss: Tensor, params) -> list:
        """Gradients of ``loss`` for each tensor in ``params`` (zeros if unreached)."""
        g = self.backward(loss)
        return [g.get(id(p), np.zeros_like(p.data)) for p in params]


def _tracing(*inputs):
    if not _ACTIVE:
        return None
    tape = _ACTIVE[-1]
    return tape if any(t.requires_grad for t in inputs) else None


def _record(out_data, inputs, backward_fn):
    out = Tensor(out_data)
    tape = _tracing(*inputs)
    if tape is not None:
        out.requires_grad = True
        tape.records.append((out, inputs, backward_fn))
    return out


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------

def add(a, b):
    a, b = _t(a), _t(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} and {b.shape}") from None
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _t(a), _t(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} and {b.shape}") from None
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = _t(a), _t(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} and {b.shape}") from None
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c: float):
    a = _t(a)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def relu(x):
    x = _t(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def absolute(x):
    x = _t(x)
    sign = np.sign(x.data)
    return _record(np.abs(x.data), (x,), lambda g: (g * sign,))


def square(x):
    x = _t(x)
    return _record(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# reductions and shape ----------------------------------------------------------

def sum_all(x):
    x = _t(x)
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x):
    x = _t(x)
    n = x.data.size
    return _record(
        np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),)
    )


def reshape(x, shape):
    x = _t(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x, a1, a2):
    x = _t(x)
    return _record(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def concat(tensors, axis=0):
    tensors = [_t(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _record(out, tuple(tensors), back)


def take_rows(table, indices):
    """Embedding lookup: ``table[indices]`` for an integer index array."""
    table = _t(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table of {table.shape[0]} rows")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (gt,)

    return _record(table.data[idx], (table,), back)


# linear algebra ----------------------------------------------------------------

def matmul(a, b):
    """Batched matrix product with numpy semantics (``b`` may be 2-D)."""
    a, b = _t(a), _t(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.data.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), back)


def affine(x, w, b):
    """``x @ w + b`` over the last axis of ``x``."""
    x, w, b = _t(x), _t(w), _t(b)
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: x {x.shape}, w {w.shape}, b {b.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = (x2 @ w.data + b.data).reshape(*x.shape[:-1], w.shape[1])

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        return (g2 @ w.data.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)

    return _record(out, (x, w, b), back)


# normalisation -----------------------------------------------------------------

def softmax(x, axis=-1):
    x = _t(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(s, (x,), back)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise the last axis, then scale and shift."""
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record(out, (x, gamma, beta), back)


def dropout(x, p: float, rng=None, train=True):
    """Inverted dropout: scale kept units by 1/(1-p) in training, identity at eval."""
    x = _t(x)
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _record(x.data * keep, (x,), lambda g: (g * keep,))


# 3-D convolutions ----------------------------------------------------------------

def conv_out_size(n, ks, stride, pad):
    return (n + 2 * pad - ks) // stride + 1


def conv_transpose_out_size(n, ks, stride, pad):
    return (n - 1) * stride - 2 * pad + ks


# Convolutions run in batch chunks so each chunk's column buffer stays in cache.
_CHUNK_ELEMS = 1 << 18


def _chunks(B, per_item):
    step = max(1, _CHUNK_ELEMS // max(1, per_item))
    return [slice(s, min(B, s + step)) for s in range(0, B, step)]


def conv3d(x, w, b, pad=1):
    """Stride-1 cubic convolution. ``x`` (B, n, n, n, Cin), ``w`` (ks, ks, ks, Cin, Cout)."""
    x, w, b = _t(x), _t(w), _t(b)
    if x.data.ndim != 5 or w.data.ndim != 5 or x.shape[-1] != w.shape[3] or b.shape != (w.shape[4],):
        raise ShapeError(f"conv3d: x {x.shape}, w {w.shape}, b {b.shape}")
    B, n = x.shape[0], x.shape[1]
    ks, cin, cout = w.shape[0], w.shape[3], w.shape[4]
    m = conv_out_size(n, ks, 1, pad)
    xpad = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (pad, pad), (0, 0)))
    wm = w.data.reshape(ks ** 3 * cin, cout)
    parts = _chunks(B, m ** 3 * ks ** 3 * cin)
    out = np.empty((B, m, m, m, cout), dtype=np.result_type(x.data, w.data))
    for sl in parts:
        cols = kernels.unfold3d(xpad[sl], ks, 1, m).reshape(-1, ks ** 3 * cin)
        out[sl] = (cols @ wm).reshape(-1, m, m, m, cout)
    out += b.data

    def back(g):
        g = np.ascontiguousarray(g)
        gw = np.zeros_like(wm)
        gx = np.empty_like(x.data)
        for sl in parts:
            cols = kernels.unfold3d(xpad[sl], ks, 1, m).reshape(-1, ks ** 3 * cin)
            g2 = g[sl].reshape(-1, cout)
            gw += cols.T @ g2
            gcols = (g2 @ wm.T).reshape(-1, m, m, m, ks, ks, ks, cin)
            gpad = kernels.fold3d(gcols, 1, n + 2 * pad)
            gx[sl] = gpad[:, pad:pad + n, pad:pad + n, pad:pad + n, :]
        return gx, gw.reshape(w.shape), g.reshape(-1, cout).sum(axis=0)

    return _record(out, (x, w, b), back)


def conv_transpose3d(x, w, b, stride=2, pad=1):
    """Transposed cubic convolution. ``x`` (B, n, n, n, Cin), ``w`` (Cin, ks, ks, ks, Cout).

    Output extent is ``(n - 1) * stride - 2 * pad + ks``.
    """
    x, w, b = _t(x), _t(w), _t(b)
    if x.data.ndim != 5 or w.data.ndim != 5 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[4],):
        raise ShapeError(f"conv_transpose3d: x {x.shape}, w {w.shape}, b {b.shape}")
    B, n, cin = x.shape[0], x.shape[1], x.shape[-1]
    ks, cout = w.shape[1], w.shape[4]
    full = (n - 1) * stride + ks
    m = conv_transpose_out_size(n, ks, stride, pad)
    if m <= 0:
        raise ShapeError(f"conv_transpose3d: empty output for n={n}, ks={ks}, stride={stride}, pad={pad}")
    x2 = x.data.reshape(B, n ** 3, cin)
    wm = w.data.reshape(cin, ks ** 3 * cout)
    parts = _chunks(B, n ** 3 * ks ** 3 * cout)
    out = np.empty((B, m, m, m, cout), dtype=np.result_type(x.data, w.data))
    for sl in parts:
        cols = (x2[sl] @ wm).reshape(-1, n, n, n, ks, ks, ks, cout)
        outfull = kernels.fold3d(cols, stride, full)
        out[sl] = outfull[:, pad:pad + m, pad:pad + m, pad:pad + m, :]
    out += b.data

    def back(g):
        gw = np.zeros_like(wm)
        gx = np.empty((B, n ** 3, cin), dtype=np.result_type(g, wm))
        for sl in parts:
            gfull = np.zeros((sl.stop - sl.start, full, full, full, cout), dtype=g.dtype)
            gfull[:, pad:pad + m, pad:pad + m, pad:pad + m, :] = g[sl]
            gcols = kernels.unfold3d(gfull, ks, stride, n).reshape(-1, n ** 3, ks ** 3 * cout)
            gx[sl] = gcols @ wm.T
            gw += x2[sl].reshape(-1, cin).T @ gcols.reshape(-1, ks ** 3 * cout)
        return gx.reshape(x.shape), gw.reshape(w.shape), g.reshape(-1, cout).sum(axis=0)

    return _record(out, (x, w, b), back)


# losses -----------------------------------------------------------------------------

def log_softmax_np(z, axis=-1):
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def weighted_cross_entropy(logits, targets, class_weights):
    """Mean over all cells of ``w[t] * -log softmax(logits)[t]``.

    ``logits`` (..., C); ``targets`` integer array of shape ``logits.shape[:-1]``.
    """
    logits = _t(logits)
    t = np.asarray(targets, dtype=np.int64)
    w = np.asarray(class_weights, dtype=np.float64)
    C = logits.shape[-1]
    if t.shape != logits.shape[:-1] or w.shape != (C,):
        raise ShapeError(
            f"cross entropy: logits {logits.shape}, targets {t.shape}, weights {w.shape}"
        )
    z = logits.data.reshape(-1, C)
    tf = t.reshape(-1)
    lsm = log_softmax_np(z)
    n = tf.size
    rows = np.arange(n)
    wt = w[tf]
    loss = -(wt * lsm[rows, tf]).sum() / n

    def back(g):
        p = np.exp(lsm)
        p[rows, tf] -= 1.0
        return ((g * wt / n)[:, None] * p).reshape(logits.shape),

    return _record(np.asarray(loss), (logits,), back)
