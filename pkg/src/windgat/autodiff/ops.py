"""Differentiable operations on :class:`Tensor`.

Shapes are explicit: the only broadcast allowed is adding a 1-D bias to
every row of a 2-D tensor.  Row-wise scaling by a weight column goes
through :func:`scale_rows`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, make


class DegenerateNeighborhoodError(ValueError):
    """Softmax requested over an empty set of candidates."""


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return make("matmul", A @ B, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        return make("add", a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return make("add_bias", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")
    return make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    A, B = a.data, b.data
    return make("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    return make("scale", a.data * c, (a,), lambda g: (g * c,))


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``i`` of ``x`` (n, d) by ``w[i]``; ``w`` has shape (n,)."""
    if x.data.ndim != 2 or w.data.ndim != 1 or w.shape[0] != x.shape[0]:
        raise ShapeError(f"scale_rows shape mismatch: {x.shape} by {w.shape}")
    X, W = x.data, w.data

    def vjp(g):
        return g * W[:, None], (g * X).sum(axis=1)

    return make("scale_rows", X * W[:, None], (x, w), vjp)


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise inner product of two (n, d) tensors -> (n,)."""
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"row_dot shape mismatch: {a.shape} . {b.shape}")
    A, B = a.data, b.data
    return make("row_dot", np.einsum("ij,ij->i", A, B), (a, b), lambda g: (g[:, None] * B, g[:, None] * A))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    X = x.data
    pos = X > 0
    return make("leaky_relu", np.where(pos, X, slope * X), (x,), lambda g: (np.where(pos, g, slope * g),))


def sigmoid(x: Tensor) -> Tensor:
    X = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(X))
    y = np.where(X >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def square(x: Tensor) -> Tensor:
    X = x.data
    return make("square", X * X, (x,), lambda g: (2.0 * g * X,))


def absolute(x: Tensor) -> Tensor:
    X = x.data
    return make("abs", np.abs(X), (x,), lambda g: (g * np.sign(X),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    shape = x.shape
    return make("mean", np.array(x.data.sum() / n), (x,), lambda g: (np.full(shape, float(g) / n),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat of nothing")
    datas = [x.data for x in xs]
    rows = {d.shape[0] for d in datas} if axis == 1 else None
    if axis == 1 and (any(d.ndim != 2 for d in datas) or len(rows) != 1):
        raise ShapeError(f"concat along columns needs equal row counts: {[d.shape for d in datas]}")
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([0] + [d.shape[axis] for d in datas])

    def vjp(g):
        if axis == 1:
            return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(xs)))
        return tuple(g[bounds[k]:bounds[k + 1]] for k in range(len(xs)))

    return make("concat", out, xs, vjp)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    X = x.data
    if X.ndim != 2 or not 0 <= start < stop <= X.shape[1]:
        raise ShapeError(f"bad column slice [{start}:{stop}] of {x.shape}")
    shape = X.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return make("slice_cols", X[:, start:stop].copy(), (x,), vjp)


def gather(x: Tensor, index) -> Tensor:
    """Select rows ``x[index]``; repeated indices accumulate in the backward pass."""
    idx = np.asarray(index, dtype=np.int64)
    X = x.data
    if idx.size and (idx.min() < 0 or idx.max() >= X.shape[0]):
        raise IndexError(f"gather index out of range for {X.shape[0]} rows")
    shape = X.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return make("gather", X[idx], (x,), vjp)


def _check_segments(ids: np.ndarray, n_segments: int) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= n_segments):
        bad = ids[(ids < 0) | (ids >= n_segments)][0]
        raise IndexError(f"segment id {bad} out of range for {n_segments} segments")


def segment_sum(values: Tensor, segment_ids, n_segments: int) -> Tensor:
    """Sum rows of ``values`` that share a segment id; empty segments give zero rows."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    V = values.data
    if V.ndim == 1:
        V2 = V[:, None]
    elif V.ndim == 2:
        V2 = V
    else:
        raise ShapeError(f"segment_sum expects 1-D or 2-D values, got {values.shape}")
    if ids.shape[0] != V2.shape[0]:
        raise ShapeError(f"{ids.shape[0]} segment ids for {V2.shape[0]} rows")
    _check_segments(ids, n_segments)
    out = np.zeros((n_segments,) + V2.shape[1:])
    np.add.at(out, ids, V2)
    if V.ndim == 1:
        out = out[:, 0]
    return make("segment_sum", out, (values,), lambda g: (g[ids],))


def segment_softmax(scores: Tensor, segment_ids, n_segments: int) -> Tensor:
    """Softmax of a 1-D score vector taken independently within each segment.

    The per-segment maximum is subtracted before exponentiating.
    """
    ids = np.asarray(segment_ids, dtype=np.int64)
    S = scores.data
    if S.ndim != 1 or ids.shape != S.shape:
        raise ShapeError(f"segment_softmax needs matching 1-D scores/ids, got {S.shape}/{ids.shape}")
    _check_segments(ids, n_segments)
    if S.size == 0:
        return make("segment_softmax", S.copy(), (scores,), lambda g: (g,))
    smax = np.full(n_segments, -np.inf)
    np.maximum.at(smax, ids, S)
    ex = np.exp(S - smax[ids])
    den = np.zeros(n_segments)
    np.add.at(den, ids, ex)
    y = ex / den[ids]

    def vjp(g):
        gy = g * y
        acc = np.zeros(n_segments)
        np.add.at(acc, ids, gy)
        return (gy - y * acc[ids],)

    return make("segment_softmax", y, (scores,), vjp)


def masked_softmax(scores: Tensor, mask) -> Tensor:
    """Softmax over the entries listed in ``mask``; all other entries are exactly 0."""
    S = scores.data
    if S.ndim != 1:
        raise ShapeError(f"masked_softmax expects a vector, got {scores.shape}")
    m = np.zeros(S.shape[0], dtype=bool)
    m[np.asarray(list(mask), dtype=np.int64)] = True
    if not m.any():
        raise DegenerateNeighborhoodError("softmax over an empty neighbourhood")
    shifted = np.where(m, S - S[m].max(), 0.0)
    ex = np.where(m, np.exp(shifted), 0.0)
    y = ex / ex.sum()

    def vjp(g):
        gy = g * y
        return (gy - y * gy.sum(),)

    return make("masked_softmax", y, (scores,), vjp)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    return mean_all(square(sub(pred, target)))


def mae(pred: Tensor, target: Tensor) -> Tensor:
    return mean_all(absolute(sub(pred, target)))
