"""Float64 tensors with a minimal reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape` whenever
at least one input requires a gradient.  Outside a tape the same functions
are plain numpy evaluations, which is how inference reuses the training code.

Leading axes are treated as batch axes by every primitive; there is no
general broadcasting beyond bias-style trailing alignment.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    EmptyWindowError,
    NumericalError,
)

__all__ = [
    "Tensor", "Tape", "backward", "checked",
    "add", "sub", "mul", "scale", "matmul", "linear", "einsum2",
    "elu", "tanh", "sigmoid", "exp", "log1p", "square", "elementwise",
    "layer_norm", "softmax",
    "concat", "stack", "reshape", "transpose", "getitem", "attend", "KVStore",
    "sum", "mean", "masked_mean",
]

_tapes: list["Tape"] = []
_checked = False


@contextmanager
def checked():
    """Reject non-finite values at every tensor construction inside the block."""
    global _checked
    prev, _checked = _checked, True
    try:
        yield
    finally:
        _checked = prev


def _check_finite(arr):
    if _checked and not np.all(np.isfinite(arr)):
        raise NumericalError("non-finite value in tensor")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

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
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        """Same value, cut off from any tape."""
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; ``backward`` replays the record in exact reverse
    order and accumulates leaf gradients in that fixed order.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, output):
        if output.data.size != 1:
            raise ContractError(
                f"backward needs a scalar output, got shape {output.shape}")
        output.grad = np.ones_like(output.data)
        for out, inputs, fn in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for t, gi in zip(inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                t.grad = gi if t.grad is None else t.grad + gi
            if out is not output:
                out.grad = None


def backward(tape, output):
    """Populate ``.grad`` on every leaf that ``output`` depends on."""
    tape.backward(output)


def _record(data, inputs, fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    if _checked:
        _check_finite(data)
    if _tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tapes[-1].nodes.append((out, inputs, fn))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), bw)


def scale(x, c):
    c = float(c)
    return _record(x.data * c, (x,), lambda g: (g * c,))


def matmul(a, b):
    """Matrix product over the last two axes; leading axes are batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(a.data @ b.data, (a, b), bw)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` stored as [out, in]."""
    x = _as_tensor(x)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear expects input width {weight.shape[1]}, got {x.shape[-1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    n_in, n_out = weight.shape[1], weight.shape[0]

    def bw(g):
        g2 = g.reshape(-1, n_out)
        gx = g @ weight.data if x.requires_grad else None
        gw = g2.T @ x.data.reshape(-1, n_in) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, bw)


def einsum2(subscripts, a, b):
    """Two-operand einsum without repeated indices inside an operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    to_a = f"{out_sub},{sb}->{sa}"
    to_b = f"{sa},{out_sub}->{sb}"

    def bw(g):
        ga = np.einsum(to_a, g, b.data) if a.requires_grad else None
        gb = np.einsum(to_b, a.data, g) if b.requires_grad else None
        return ga, gb

    return _record(np.einsum(subscripts, a.data, b.data), (a, b), bw)


# ---------------------------------------------------------------------------
# elementwise

def elu(x):
    """ELU with alpha = 1."""
    d = x.data
    pos = d >= 0
    out = np.where(pos, d, np.expm1(np.minimum(d, 0.0)))
    return _record(out, (x,), lambda g: (g * np.where(pos, 1.0, out + 1.0),))


def tanh(x):
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x):
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log1p(x):
    d = x.data
    return _record(np.log1p(d), (x,), lambda g: (g / (1.0 + d),))


def square(x):
    d = x.data
    return _record(d * d, (x,), lambda g: (2.0 * g * d,))


_ELEMENTWISE = {"elu": elu, "tanh": tanh, "sigmoid": sigmoid}


def elementwise(kind, x):
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return fn(_as_tensor(x))


# ---------------------------------------------------------------------------
# normalisation

def layer_norm(x, gamma, beta, eps=1e-5):
    x = _as_tensor(x)
    d = x.shape[-1]
    if d < 2:
        raise DegenerateInputError("layer_norm needs at least two features")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError("layer_norm gamma/beta must match the feature width")
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return _record(out, (x, gamma, beta), bw)


def softmax(x):
    """Softmax over the last axis, max-subtracted."""
    x = _as_tensor(x)
    if x.shape[-1] < 1:
        raise ContractError("softmax over an empty axis")
    z = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# structural

def concat(tensors, axis=-1):
    tensors = tuple(_as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tensors, bw)


def stack(tensors, axis=0):
    tensors = tuple(_as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record(out, tensors, bw)


def reshape(x, shape):
    orig = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x, axes):
    inv = np.argsort(axes)
    return _record(np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inv),))


def getitem(x, idx):
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _record(x.data[idx], (x,), bw)


def attend(query, keys, values):
    """Scaled dot-product attention of one query row per (batch, head).

    query: [b, H, dk]; keys/values: [b, H, L, dk].  Returns the attended
    [b, H, dk] tensor and the softmax weights [b, H, L] as a plain array
    (weights are reported, not differentiated).
    """
    q, k, v = query.data, keys.data, values.data
    if k.shape != v.shape or k.shape[:2] != q.shape[:2] or k.shape[3] != q.shape[2]:
        raise DimensionError(f"attend shapes q={q.shape} k={k.shape} v={v.shape}")
    c = 1.0 / math.sqrt(q.shape[-1])
    scores = (k @ q[..., None])[..., 0] * c
    z = np.exp(scores - scores.max(axis=-1, keepdims=True))
    w = z / z.sum(axis=-1, keepdims=True)
    out = (w[:, :, None, :] @ v)[:, :, 0, :]

    def bw(g):
        gv = w[..., None] * g[:, :, None, :] if values.requires_grad else None
        gw = (v @ g[..., None])[..., 0]
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * c
        gq = (gs[:, :, None, :] @ k)[:, :, 0, :] if query.requires_grad else None
        gk = gs[..., None] * q[:, :, None, :] if keys.requires_grad else None
        return gq, gk, gv

    return _record(out, (query, keys, values), bw), w


class KVStore:
    """Append-only key/value rows backing one attention history.

    Rows live in a preallocated [b, H, capacity, dk] array per side, oldest
    first, and a history is a ``(start, stop)`` range into it, so advancing
    or evicting never copies old rows.  An optional initial block (the
    projected history carried into a new tape window) occupies the first
    rows.  Gradients for rows appended one at a time flow back per row;
    gradients for the block are deferred and formed with two batched matrix
    products once the tape reaches the block.

    Only the tip of a store may be extended.  ``append`` on an older range
    forks a copy, so states branched from a common ancestor stay independent.
    """

    def __init__(self, key_block, value_block, capacity=None, shape=None):
        if key_block is not None:
            b, h, n0, dk = key_block.shape
        else:
            (b, h, dk), n0 = shape, 0
        self.capacity = max(capacity or 0, n0 + 1)
        self.keys = np.empty((b, h, self.capacity, dk))
        self.values = np.empty((b, h, self.capacity, dk))
        self.n_block = n0
        self.n = n0
        self.block = (key_block, value_block)
        self.rows = []
        self._deferred = []
        self._sink = None
        if n0:
            self.keys[:, :, :n0] = key_block.data
            self.values[:, :, :n0] = value_block.data
            if key_block.requires_grad or value_block.requires_grad:
                self._sink = _record(np.zeros(0), (key_block, value_block),
                                     self._block_backward)

    @property
    def requires_grad(self):
        return self._sink is not None or any(
            k.requires_grad or v.requires_grad for k, v in self.rows)

    def _fork(self, stop):
        other = KVStore.__new__(KVStore)
        other.__dict__.update(self.__dict__)
        other.keys, other.values = self.keys.copy(), self.values.copy()
        other.n = stop
        other.rows = self.rows[: stop - self.n_block]
        other._deferred = []
        other._sink = None
        kb, vb = self.block
        if self._sink is not None:
            other._sink = _record(np.zeros(0), (kb, vb), other._block_backward)
        return other

    def _grow(self):
        cap = 2 * self.capacity
        for name in ("keys", "values"):
            old = getattr(self, name)
            new = np.empty(old.shape[:2] + (cap,) + old.shape[3:])
            new[:, :, : self.n] = old[:, :, : self.n]
            setattr(self, name, new)
        self.capacity = cap

    def append(self, key_row, value_row, start, stop, window):
        """Add one row after ``stop``; returns ``(store, start, stop)``.

        The returned range keeps at most ``window`` rows.  Without gradients
        in play a full store is compacted to the live range instead of grown.
        """
        store = self if stop == self.n else self._fork(stop)
        if store.n == store.capacity:
            if store.requires_grad or key_row.requires_grad or value_row.requires_grad:
                store._grow()
            else:
                live = (Tensor(store.keys[:, :, start:stop]),
                        Tensor(store.values[:, :, start:stop]))
                store = KVStore(*live, capacity=store.capacity)
                start, stop = 0, store.n
        store.keys[:, :, store.n] = key_row.data
        store.values[:, :, store.n] = value_row.data
        store.rows.append((key_row, value_row))
        store.n += 1
        stop = store.n
        return store, max(start, stop - window), stop

    def attend(self, query, start, stop):
        """:func:`attend` of ``query`` [b, H, dk] over rows ``start:stop``."""
        if stop <= start:
            raise ContractError("attention over an empty history")
        k = self.keys[:, :, start:stop]
        v = self.values[:, :, start:stop]
        q = query.data
        c = 1.0 / math.sqrt(q.shape[-1])
        scores = (k @ q[..., None])[..., 0] * c
        z = np.exp(scores - scores.max(axis=-1, keepdims=True))
        w = z / z.sum(axis=-1, keepdims=True)
        out = (w[:, :, None, :] @ v)[:, :, 0, :]

        first_row = max(start, self.n_block)
        rows = self.rows[first_row - self.n_block: stop - self.n_block]
        sink = (self._sink,) if (self._sink is not None and start < self.n_block) else ()
        inputs = (query,) + sink + tuple(t for pair in rows for t in pair)
        n_old = self.n_block - start if sink else 0
        split = first_row - start

        def bw(g):
            gw = (v @ g[..., None])[..., 0]
            gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * c
            gq = (gs[:, :, None, :] @ k)[:, :, 0, :]
            grads = [gq]
            if sink:
                self._deferred.append((start, gs[:, :, :n_old], w[:, :, :n_old], q, g))
                grads.append(np.zeros(0))
            if rows:
                gk = gs[:, :, split:, None] * q[:, :, None, :]
                gv = w[:, :, split:, None] * g[:, :, None, :]
                for i in range(len(rows)):
                    grads.append(gk[:, :, i])
                    grads.append(gv[:, :, i])
            return tuple(grads)

        return _record(out, inputs, bw), w

    def _block_backward(self, _):
        kb, vb = self.block
        b, h, n0, dk = kb.shape
        m = len(self._deferred)
        gs_cols = np.zeros((b, h, n0, m))
        w_cols = np.zeros((b, h, n0, m))
        qs = np.empty((b, h, m, dk))
        gs_out = np.empty((b, h, m, dk))
        for j, (start, gs, w, q, g) in enumerate(self._deferred):
            gs_cols[:, :, start:, j] = gs
            w_cols[:, :, start:, j] = w
            qs[:, :, j] = q
            gs_out[:, :, j] = g
        self._deferred = []
        return gs_cols @ qs, w_cols @ gs_out


# ---------------------------------------------------------------------------
# reductions

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out, dtype=np.float64), (x,), bw)


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def masked_mean(x, mask):
    """Mean of ``x`` over the entries where ``mask`` is 1.

    The numerator is an exactly rounded sum, so entries with mask 0 never
    change the result, whatever their number or position.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape:
        raise DimensionError(f"mask shape {mask.shape} != values shape {x.shape}")
    total = math.fsum(mask.ravel())
    if total == 0:
        raise EmptyWindowError("mask selects no entries")
    keep = mask != 0
    val = math.fsum(np.where(keep, x.data * mask, 0.0).ravel()) / total
    w = np.where(keep, mask, 0.0) / total
    return _record(np.asarray(val), (x,), lambda g: (g * w,))

