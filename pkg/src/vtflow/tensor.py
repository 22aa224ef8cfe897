"""Minimal reverse-mode autodiff over contiguous row-major numpy buffers.

Exactly the primitives the flow model needs, each with a hand-written
backward rule that the finite-difference suite verifies. Single precision
is the training/inference default; double precision exists for gradient
verification only. Any NaN/Inf produced by a forward or backward pass
raises immediately.
"""

import math

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError, StateError

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _assert_finite(arr, what):
    # min/max propagate NaN and catch +-Inf without allocating a bool array
    if arr.size and not (math.isfinite(float(arr.min())) and math.isfinite(float(arr.max()))):
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """Dense tensor with optional gradient tracking.

    data is always contiguous row-major; grad, when present, mirrors data's
    shape. Interior graph nodes carry a backward closure; leaves do not.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.float32
        arr = np.ascontiguousarray(data, dtype=dtype)
        _assert_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._bwd = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def scale(self, s):
        return scale(self, s)


def _result(arr, parents, bwd, op):
    """Wrap a raw array as an op output, recording the graph edge if needed."""
    _assert_finite(arr, f"forward of {op}")
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(arr)
    out.requires_grad = req
    out.grad = None
    out._consumed = False
    out._op = op
    if req:
        out._parents = tuple(parents)
        out._bwd = bwd
    else:
        out._parents = ()
        out._bwd = None
    return out


def _unbroadcast(g, shape):
    """Sum gradient g down to a broadcast operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_same_dtype(*ts):
    d0 = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != d0:
            raise ContractError(f"mixed dtypes {d0} vs {t.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise ops (broadcasting limited to leading axes / singleton axes)
# ---------------------------------------------------------------------------

def add(a, b):
    _check_same_dtype(a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _result(out, (a, b), bwd, "add")


def sub(a, b):
    _check_same_dtype(a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _result(out, (a, b), bwd, "sub")


def mul(a, b):
    _check_same_dtype(a, b)
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _result(out, (a, b), bwd, "mul")


def scale(a, s):
    s = float(s)
    out = a.data * a.data.dtype.type(s)

    def bwd(g):
        return (g * a.data.dtype.type(s),)

    return _result(out, (a,), bwd, "scale")


def silu(a):
    x = a.data
    # numerically stable sigmoid: never exponentiates a positive argument
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)
    out = x * sig

    def bwd(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _result(out, (a,), bwd, "silu")


# ---------------------------------------------------------------------------
# matmul / transpose
# ---------------------------------------------------------------------------

def matmul(a, b):
    _check_same_dtype(a, b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2 or A.ndim > 3 or B.ndim > 3:
        raise DimensionError(f"matmul supports rank 2/3 operands, got {A.shape} @ {B.shape}")
    if A.shape[-1] != B.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {A.shape} @ {B.shape}")
    if A.ndim == 3 and B.ndim == 3 and A.shape[0] != B.shape[0]:
        raise DimensionError(f"matmul batch dimensions disagree: {A.shape} @ {B.shape}")
    if A.ndim == 2 and B.ndim == 3:
        raise DimensionError(f"matmul does not broadcast a 2-d left operand over {B.shape}")
    out = np.matmul(A, B)

    def bwd(g):
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if B.ndim == 2:  # A is (batch, m, k), B is (k, n)
            dA = np.matmul(g, B.T)
            dB = np.tensordot(A, g, axes=([0, 1], [0, 1]))
            return dA, dB
        # both rank 3
        return (np.matmul(g, B.swapaxes(-1, -2)),
                np.matmul(A.swapaxes(-1, -2), g))

    return _result(out, (a, b), bwd, "matmul")


def transpose(a):
    """Swap the last two axes (copying)."""
    if a.data.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got {a.data.shape}")
    out = a.data.swapaxes(-1, -2)

    def bwd(g):
        return (np.ascontiguousarray(g.swapaxes(-1, -2)),)

    return _result(out, (a,), bwd, "transpose")


def reshape(a, shape):
    """Reshape by copy (row-major)."""
    out = a.data.reshape(shape).copy()

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _result(out, (a,), bwd, "reshape")


# ---------------------------------------------------------------------------
# normalization / softmax
# ---------------------------------------------------------------------------

def softmax_rows(a):
    """Row-wise softmax over the last axis, max-shifted for stability."""
    if a.data.ndim < 1 or a.data.shape[-1] < 1:
        raise DimensionError(f"softmax_rows on empty row dimension, shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (a,), bwd, "softmax_rows")


def layer_norm(x, gain, bias, eps):
    """Per-row (last axis) normalization with learned gain/bias."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    _check_same_dtype(x, gain, bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv_std
    out = xhat * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        gg = g * gain.data
        dx = inv_std * (gg - gg.mean(axis=-1, keepdims=True)
                        - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _result(out, (x, gain, bias), bwd, "layer_norm")


# ---------------------------------------------------------------------------
# concat / split / slicing / gather
# ---------------------------------------------------------------------------

def concat(tensors, axis):
    _check_same_dtype(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(pieces)

    return _result(out, tuple(tensors), bwd, "concat")


def split(a, sizes, axis):
    """Split into len(sizes) tensors along axis; exact inverse of concat."""
    if sum(sizes) != a.data.shape[axis]:
        raise DimensionError(f"split sizes {sizes} do not cover axis {axis} of {a.data.shape}")
    outs = []
    offset = 0
    for size in sizes:
        sl = [slice(None)] * a.data.ndim
        sl[axis] = slice(offset, offset + size)
        piece = np.ascontiguousarray(a.data[tuple(sl)])
        start = offset

        def bwd(g, start=start, size=size):
            full = np.zeros_like(a.data)
            sl2 = [slice(None)] * full.ndim
            sl2[axis] = slice(start, start + size)
            full[tuple(sl2)] = g
            return (full,)

        outs.append(_result(piece, (a,), bwd, "split"))
        offset += size
    return outs


def take_rows(a, n):
    """First n rows along axis 0 (copying)."""
    if n > a.data.shape[0]:
        raise DimensionError(f"take_rows({n}) exceeds leading dim of {a.data.shape}")
    out = a.data[:n].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:n] = g
        return (full,)

    return _result(out, (a,), bwd, "take_rows")


def gather_rows(table, ids):
    """Row gather (embedding lookup): out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ContractError(
            f"gather id out of range [0, {table.data.shape[0]}): min={ids.min()} max={ids.max()}")
    out = table.data[ids]

    def bwd(g):
        dT = np.zeros_like(table.data)
        np.add.at(dT, ids.ravel(), g.reshape(-1, table.data.shape[1]))
        return (dT,)

    return _result(out, (table,), bwd, "gather_rows")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(a):
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g):
        return (np.full(a.data.shape, np.asarray(g).item(), dtype=a.data.dtype),)

    return _result(out, (a,), bwd, "sum_all")


def masked_mse(pred, target, row_mask=None):
    """Mean squared error over entries of rows selected by row_mask.

    row_mask has pred's shape minus the last axis; None selects every row.
    Differentiable through both pred and target.
    """
    _check_same_dtype(pred, target)
    if pred.data.shape != target.data.shape:
        raise DimensionError(f"masked_mse shapes differ: {pred.data.shape} vs {target.data.shape}")
    err = pred.data - target.data
    if row_mask is None:
        count = err.size
        mexp = None
    else:
        row_mask = np.asarray(row_mask, dtype=bool)
        if row_mask.shape != pred.data.shape[:-1]:
            raise DimensionError(
                f"row mask shape {row_mask.shape} does not match rows of {pred.data.shape}")
        count = int(row_mask.sum()) * pred.data.shape[-1]
        if count == 0:
            raise ContractError("masked_mse over an empty row selection")
        mexp = row_mask[..., None].astype(pred.data.dtype)
        err = err * mexp
    out = np.asarray((err * err).sum() / count, dtype=pred.data.dtype)

    def bwd(g):
        d = (2.0 / count) * np.asarray(g).item() * err
        if mexp is not None:
            d = d * mexp
        return d.astype(pred.data.dtype), (-d).astype(pred.data.dtype)

    return _result(out, (pred, target), bwd, "masked_mse")


def weighted_masked_mse(pred, target, row_mask, weights):
    """Per-sample masked MSE combined with per-sample weights.

    pred/target are (B, n, d); row_mask is (B, n) boolean; weights is (B,).
    Returns sum_b weights[b] * mean over sample b's selected entries of the
    squared error. Differentiable through both pred and target.
    """
    _check_same_dtype(pred, target)
    if pred.data.ndim != 3 or pred.data.shape != target.data.shape:
        raise DimensionError(
            f"weighted_masked_mse needs matching rank-3 tensors, got {pred.data.shape} vs {target.data.shape}")
    row_mask = np.asarray(row_mask, dtype=bool)
    weights = np.asarray(weights, dtype=pred.data.dtype)
    if row_mask.shape != pred.data.shape[:2] or weights.shape != (pred.data.shape[0],):
        raise DimensionError(
            f"mask {row_mask.shape} / weights {weights.shape} mismatch for {pred.data.shape}")
    counts = row_mask.sum(axis=1) * pred.data.shape[-1]
    if (counts == 0).any():
        raise ContractError("weighted_masked_mse: a sample has an empty row selection")
    coeff = (weights / counts.astype(pred.data.dtype))[:, None, None]
    mexp = row_mask[:, :, None].astype(pred.data.dtype)
    err = (pred.data - target.data) * mexp
    out = np.asarray((coeff * err * err).sum(), dtype=pred.data.dtype)

    def bwd(g):
        d = 2.0 * np.asarray(g).item() * coeff * err
        return d.astype(pred.data.dtype), (-d).astype(pred.data.dtype)

    return _result(out, (pred, target), bwd, "weighted_masked_mse")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss):
    """Reverse-mode sweep from a scalar loss.

    Accumulates d(loss)/d(leaf) into every requires_grad leaf's .grad and
    consumes the graph; a second call on the same graph is a state error.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise StateError("backward called on an already-consumed graph")
    if not loss.requires_grad:
        raise ContractError("loss does not require grad; nothing to differentiate")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._bwd is None:
            continue
        if node._consumed:
            raise StateError("graph node already consumed by a previous backward")
        gout = node.grad
        if gout is None:
            continue
        grads = node._bwd(gout)
        for p, g in zip(node._parents, grads):
            if g is None or not p.requires_grad:
                continue
            _assert_finite(g, f"backward of {node._op}")
            if p.grad is None:
                p.grad = np.ascontiguousarray(g, dtype=p.data.dtype)
            else:
                p.grad = p.grad + g
        node._consumed = True
        node.grad = None
        node._parents = ()
        node._bwd = None
