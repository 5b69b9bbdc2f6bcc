"""Differentiable primitives on :class:`~reltab.autograd.tensor.Tensor`.

Each primitive computes its forward value with numpy and registers a closure
mapping the output gradient to input gradients. Broadcasting follows numpy;
gradients are summed back to the input shapes.
"""

from __future__ import annotations

import numpy as np
from scipy import special

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, record

LAYER_NORM_EPS = 1e-5


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", a.data * b.data, (a, b), back)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def back(g):
        return (g * c,)

    return record("scale", a.data * c, (a,), back)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (both inputs need ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return record("matmul", out, (a, b), back)


def transpose(a, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose needs ndim >= 2")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: bad axes {axes} for ndim {a.ndim}")
    inv = tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inv),)

    return record("transpose", np.transpose(a.data, axes).copy(), (a,), back)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None

    def back(g):
        return (g.reshape(a.shape),)

    return record("reshape", out, (a,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", out, ts, back)


def slice(a, index) -> Tensor:
    """``a[index]`` for basic or integer-array indexing."""
    a = as_tensor(a)
    out = np.array(a.data[index], dtype=a.dtype, copy=True)

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return record("slice", out, (a,), back)


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0

    def back(g):
        return (g * on,)

    return record("relu", np.where(on, a.data, 0.0).astype(a.dtype), (a,), back)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    cdf = special.ndtr(a.data)

    def back(g):
        pdf = np.exp(-0.5 * a.data * a.data) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + a.data * pdf),)

    return record("gelu", (a.data * cdf).astype(a.dtype), (a,), back)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = special.expit(a.data)

    def back(g):
        return (g * y * (1.0 - y),)

    return record("sigmoid", y, (a,), back)


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)

    def back(g):
        return (g * special.expit(-a.data),)

    return record("log_sigmoid", out.astype(a.dtype), (a,), back)


def layer_norm(a, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean, unit variance (no affine part)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return record("layer_norm", xhat, (a,), back)


def row_softmax(a, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` (bool, broadcastable) marks allowed entries."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("row_softmax", y, (a,), back)


def embedding_lookup(table, ids) -> Tensor:
    """Rows of ``table`` (V x d) selected by an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    if table.ndim != 2:
        raise ShapeError("embedding table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return record("embedding_lookup", out, (table,), back)


def dropout(a, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity at evaluation time or when ``p == 0``."""
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)

    def back(g):
        return (g * keep,)

    return record("dropout", a.data * keep, (a,), back)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", out, (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis, keepdims), 1.0 / n)


def cross_entropy(logits, target) -> Tensor:
    """``-log softmax(logits)[target]`` along the last axis.

    ``target`` is an int (1-D logits) or an int array matching the leading
    shape; the result has that leading shape (a scalar for 1-D logits).
    """
    logits = as_tensor(logits)
    if logits.ndim < 1 or logits.shape[-1] < 1:
        raise ShapeError("cross_entropy needs at least one class")
    n_classes = logits.shape[-1]
    t = np.asarray(target)
    if t.shape != logits.shape[:-1]:
        raise ShapeError(f"target shape {t.shape} does not match logits {logits.shape}")
    if t.dtype.kind not in "iu":
        raise TypeError("targets must be integers")
    if t.size and (t.min() < 0 or t.max() >= n_classes):
        raise IndexError(f"target out of range [0, {n_classes})")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=-1, keepdims=True)) + m
    picked = np.take_along_axis(z, t[..., None], axis=-1)
    out = (lse - picked)[..., 0]

    def back(g):
        p = np.exp(z - lse)
        np.put_along_axis(p, t[..., None], np.take_along_axis(p, t[..., None], axis=-1) - 1.0, axis=-1)
        return (p * np.asarray(g)[..., None],)

    return record("cross_entropy", np.asarray(out, dtype=logits.dtype), (logits,), back)


PRIMITIVES = {
    name: globals()[name]
    for name in (
        "add", "sub", "mul", "scale", "matmul", "transpose", "reshape", "concat", "slice",
        "relu", "gelu", "sigmoid", "log_sigmoid", "layer_norm", "row_softmax",
        "embedding_lookup", "dropout", "sum", "mean", "cross_entropy",
    )
}
