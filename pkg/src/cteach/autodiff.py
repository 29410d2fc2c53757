"""Reverse-mode automatic differentiation on dense float64 arrays.

A small tape machine: every primitive returns a fresh tensor carrying a
record of its operands and a local adjoint rule.  ``backward`` replays the
reachable records in reverse execution order and accumulates gradients
into every tensor that requires them.  A tape is single-use; the forward
pass is rebuilt for every optimization step.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError, UsageError

_SERIAL = itertools.count()


class _Record:
    """One primitive application: operands, output, adjoint rule."""

    __slots__ = ("serial", "out", "inputs", "backward_fn", "spent")

    def __init__(self, out: "DiffTensor", inputs: tuple, backward_fn: Callable):
        self.serial = next(_SERIAL)
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.spent = False


class DiffTensor:
    """Dense n-dimensional float64 array, optionally gradient-tracked."""

    __slots__ = ("data", "requires_grad", "grad", "record")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.record: _Record | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"DiffTensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> DiffTensor:
    return DiffTensor(data, requires_grad=False)


def parameter(data) -> DiffTensor:
    return DiffTensor(data, requires_grad=True)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _apply(data, inputs: Sequence[DiffTensor], backward_fn: Callable) -> DiffTensor:
    out = DiffTensor(data, requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad:
        out.record = _Record(out, tuple(inputs), backward_fn)
    return out


def backward(loss: DiffTensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    The root must be a scalar produced by recorded primitives.  Gradient
    contributions across fan-out accumulate additively.  Each record is
    consumed; calling backward a second time on the same graph raises.
    """
    if loss.size != 1:
        raise UsageError(f"backward root must be scalar, got shape {loss.shape}")
    if loss.record is None:
        raise UsageError("backward root was not produced by recorded primitives")

    records: list[_Record] = []
    seen: set[int] = set()
    stack = [loss.record]
    while stack:
        rec = stack.pop()
        if id(rec) in seen:
            continue
        seen.add(id(rec))
        if rec.spent:
            raise UsageError("graph already consumed by a previous backward sweep")
        records.append(rec)
        for t in rec.inputs:
            if t.record is not None and id(t.record) not in seen:
                stack.append(t.record)

    records.sort(key=lambda r: r.serial, reverse=True)
    loss.grad = np.ones_like(loss.data)
    for rec in records:
        g = rec.out.grad
        rec.spent = True
        if g is None:
            continue
        for t, gt in zip(rec.inputs, rec.backward_fn(g)):
            if gt is None or not t.requires_grad:
                continue
            gt = np.asarray(gt, dtype=np.float64)
            if gt.shape != t.data.shape:
                raise ShapeError(
                    f"adjoint shape {gt.shape} does not match operand shape {t.data.shape}"
                )
            t.grad = gt if t.grad is None else t.grad + gt


# ---------------------------------------------------------------------------
# elementwise primitives


def _check_same_shape(a: DiffTensor, b: DiffTensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_same_shape(a, b, "add")
    return _apply(a.data + b.data, (a, b), lambda g: (g, g))


def subtract(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_same_shape(a, b, "subtract")
    return _apply(a.data - b.data, (a, b), lambda g: (g, -g))


def multiply(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_same_shape(a, b, "multiply")
    ad, bd = a.data, b.data
    return _apply(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def divide(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_same_shape(a, b, "divide")
    ad, bd = a.data, b.data
    return _apply(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(a: DiffTensor, c: float) -> DiffTensor:
    c = float(c)
    return _apply(a.data * c, (a,), lambda g: (g * c,))


def affine(a: DiffTensor, m: float, c: float) -> DiffTensor:
    """Elementwise m * a + c with scalar constants."""
    m, c = float(m), float(c)
    return _apply(a.data * m + c, (a,), lambda g: (g * m,))


def exp(a: DiffTensor) -> DiffTensor:
    y = np.exp(a.data)
    return _apply(y, (a,), lambda g: (g * y,))


def log(a: DiffTensor) -> DiffTensor:
    if np.any(a.data <= 0):
        raise NumericError("log: input must be positive")
    ad = a.data
    return _apply(np.log(ad), (a,), lambda g: (g / ad,))


def square(a: DiffTensor) -> DiffTensor:
    ad = a.data
    return _apply(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def relu(a: DiffTensor) -> DiffTensor:
    mask = a.data > 0
    return _apply(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape and indexing primitives


def reshape(a: DiffTensor, shape) -> DiffTensor:
    shape = tuple(int(s) for s in shape)
    orig = a.data.shape
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {orig} as {shape}")
    return _apply(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: DiffTensor) -> DiffTensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.data.shape}")
    return _apply(a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def permute(a: DiffTensor, axes) -> DiffTensor:
    axes = tuple(int(x) for x in axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    return _apply(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
    )


def concatenate(tensors: Sequence[DiffTensor], axis: int = 0) -> DiffTensor:
    if not tensors:
        raise ShapeError("concatenate: empty input list")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _apply(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def gather_rows(a: DiffTensor, idx) -> DiffTensor:
    """Select rows (axis 0) by an integer index set; duplicates allowed."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: index set must be one-dimensional")
    n = a.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather_rows: index out of range for {n} rows")

    def back(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _apply(a.data[idx], (a,), back)


def pick_rowwise(a: DiffTensor, idx) -> DiffTensor:
    """Pick one column per row: out[i] = a[i, idx[i]]."""
    if a.data.ndim != 2:
        raise ShapeError("pick_rowwise: expected a matrix")
    idx = np.asarray(idx, dtype=np.int64)
    m, n = a.data.shape
    if idx.shape != (m,):
        raise ShapeError(f"pick_rowwise: need {m} indices, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"pick_rowwise: column index out of range for {n} columns")
    rows = np.arange(m)

    def back(g):
        z = np.zeros_like(a.data)
        z[rows, idx] = g
        return (z,)

    return _apply(a.data[rows, idx], (a,), back)


def masked_mean(a: DiffTensor, idx) -> DiffTensor:
    """Mean of the flattened tensor over an index set (scalar result)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise DataError("masked_mean: index set must be one-dimensional and nonempty")
    flat = a.data.ravel()
    if idx.min() < 0 or idx.max() >= flat.size:
        raise ShapeError(f"masked_mean: index out of range for {flat.size} elements")
    k = idx.size

    def back(g):
        z = np.zeros(flat.size)
        np.add.at(z, idx, float(g) / k)
        return (z.reshape(a.data.shape),)

    return _apply(np.array(flat[idx].mean()), (a,), back)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: DiffTensor) -> DiffTensor:
    return _apply(np.array(a.data.sum()), (a,), lambda g: (np.full_like(a.data, float(g)),))


def mean_all(a: DiffTensor) -> DiffTensor:
    n = a.size
    return _apply(
        np.array(a.data.mean()), (a,), lambda g: (np.full_like(a.data, float(g) / n),)
    )


def row_sum(a: DiffTensor) -> DiffTensor:
    if a.data.ndim != 2:
        raise ShapeError("row_sum: expected a matrix")
    m, n = a.data.shape
    return _apply(
        a.data.sum(axis=1), (a,), lambda g: (np.broadcast_to(g[:, None], (m, n)).copy(),)
    )


def col_sum(a: DiffTensor) -> DiffTensor:
    if a.data.ndim != 2:
        raise ShapeError("col_sum: expected a matrix")
    m, n = a.data.shape
    return _apply(
        a.data.sum(axis=0), (a,), lambda g: (np.broadcast_to(g[None, :], (m, n)).copy(),)
    )


def row_max(a: DiffTensor) -> DiffTensor:
    """Per-row maximum; the adjoint routes to the first argmax of each row."""
    if a.data.ndim != 2:
        raise ShapeError("row_max: expected a matrix")
    arg = a.data.argmax(axis=1)
    rows = np.arange(a.data.shape[0])

    def back(g):
        z = np.zeros_like(a.data)
        z[rows, arg] = g
        return (z,)

    return _apply(a.data.max(axis=1), (a,), back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    ad, bd = a.data, b.data
    return _apply(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add_bias(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Add a length-n bias vector to every row of an m-by-n matrix."""
    if a.data.ndim != 2 or b.data.shape != (a.data.shape[1],):
        raise ShapeError(f"add_bias: shapes {a.data.shape} and {b.data.shape} incompatible")
    return _apply(a.data + b.data[None, :], (a, b), lambda g: (g, g.sum(axis=0)))


def l2_norm(a: DiffTensor) -> DiffTensor:
    """Euclidean norm of the whole tensor (scalar)."""
    n = float(np.sqrt((a.data * a.data).sum()))

    def back(g):
        if n == 0.0:
            return (np.zeros_like(a.data),)
        return (float(g) * a.data / n,)

    return _apply(np.array(n), (a,), back)


def normalize_rows(a: DiffTensor) -> DiffTensor:
    """Scale each row of a matrix to unit Euclidean norm."""
    if a.data.ndim != 2:
        raise ShapeError("normalize_rows: expected a matrix")
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    if np.any(norms < 1e-12):
        raise NumericError("normalize_rows: zero-norm row")
    y = a.data / norms

    def back(g):
        dots = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dots) / norms,)

    return _apply(y, (a,), back)


# ---------------------------------------------------------------------------
# softmax family


def row_softmax(a: DiffTensor, temperature: float = 1.0) -> DiffTensor:
    """softmax(a / temperature) along each row, stabilized by row-max shift."""
    if temperature <= 0:
        raise ConfigError(f"row_softmax: temperature must be positive, got {temperature}")
    if a.data.ndim != 2:
        raise ShapeError("row_softmax: expected a matrix")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("row_softmax: non-finite input")
    t = float(temperature)
    z = a.data / t
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dots = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dots) / t,)

    return _apply(y, (a,), back)


def row_log_softmax(a: DiffTensor) -> DiffTensor:
    if a.data.ndim != 2:
        raise ShapeError("row_log_softmax: expected a matrix")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("row_log_softmax: non-finite input")
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _apply(out, (a,), back)


# ---------------------------------------------------------------------------
# convolution support


_IM2COL_CACHE: dict[tuple[int, int, int, int], np.ndarray] = {}


def _im2col_indices(h: int, w: int, cin: int, k: int) -> np.ndarray:
    key = (h, w, cin, k)
    idx = _IM2COL_CACHE.get(key)
    if idx is None:
        pad = k // 2
        rr = np.arange(h)[:, None, None, None] + np.arange(k)[None, None, :, None] - pad
        cc = np.arange(w)[None, :, None, None] + np.arange(k)[None, None, None, :] - pad
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        flat = (rr * w + cc) * cin
        flat = flat[..., None] + np.arange(cin)
        sentinel = h * w * cin
        idx = np.where(valid[..., None], flat, sentinel).reshape(h * w, k * k * cin)
        _IM2COL_CACHE[key] = idx
    return idx


def im2col(a: DiffTensor, k: int) -> DiffTensor:
    """Patches of a (H, W, C) map for a k-by-k window, zero same-padding.

    Output row (r * W + c) holds the window centered at (r, c), flattened
    as (dr, dc, channel).  The adjoint scatter-adds back into the map.
    """
    if a.data.ndim != 3:
        raise ShapeError(f"im2col: expected (H, W, C), got shape {a.data.shape}")
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"im2col: window must be odd and positive, got {k}")
    h, w, cin = a.data.shape
    idx = _im2col_indices(h, w, cin, k)
    padded = np.append(a.data.ravel(), 0.0)

    def back(g):
        buf = np.zeros(h * w * cin + 1)
        np.add.at(buf, idx, g)
        return (buf[:-1].reshape(h, w, cin),)

    return _apply(padded[idx], (a,), back)


# ---------------------------------------------------------------------------
# composite losses


def cross_entropy(logits: DiffTensor, targets, ignore_id: int | None = None) -> DiffTensor:
    """Mean cross-entropy of integer targets against row logits.

    Rows whose target equals ``ignore_id`` are dropped before averaging.
    """
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy: logits must be a matrix")
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"cross_entropy: need {logits.data.shape[0]} targets, got shape {t.shape}"
        )
    rows = logits
    if ignore_id is not None:
        keep = np.flatnonzero(t != ignore_id)
        if keep.size == 0:
            raise DataError("cross_entropy: every target carries the ignore id")
        if keep.size < t.size:
            rows = gather_rows(logits, keep)
        t = t[keep]
    k = rows.data.shape[1]
    if t.min() < 0 or t.max() >= k:
        raise DataError(f"cross_entropy: target outside the {k} logit columns")
    picked = pick_rowwise(row_log_softmax(rows), t)
    return scale(sum_all(picked), -1.0 / t.size)


def mse(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    _check_same_shape(a, b, "mse")
    return mean_all(square(subtract(a, b)))


# ---------------------------------------------------------------------------
# catalogue and verification


def primitive_set() -> dict[str, Callable]:
    """Differentiable primitives available to the rest of the system."""
    return {
        "add": add,
        "subtract": subtract,
        "multiply": multiply,
        "divide": divide,
        "scale": scale,
        "affine": affine,
        "exp": exp,
        "log": log,
        "square": square,
        "relu": relu,
        "reshape": reshape,
        "transpose": transpose,
        "permute": permute,
        "concatenate": concatenate,
        "gather": gather_rows,
        "pick_rowwise": pick_rowwise,
        "masked_mean": masked_mean,
        "sum": sum_all,
        "mean": mean_all,
        "row_sum": row_sum,
        "col_sum": col_sum,
        "row_max": row_max,
        "matmul": matmul,
        "add_bias": add_bias,
        "l2_norm": l2_norm,
        "normalize_rows": normalize_rows,
        "row_softmax": row_softmax,
        "row_log_softmax": row_log_softmax,
        "im2col": im2col,
        "cross_entropy": cross_entropy,
        "mse": mse,
    }


def finite_difference_check(
    f: Callable[[DiffTensor], DiffTensor], x: DiffTensor, h: float = 1e-4
) -> float:
    """Max relative error between the tape gradient of f and central differences.

    Error per component is |analytic - numeric| / max(1, |numeric|).  ``f``
    must be a pure scalar-valued function of its tensor argument.
    """
    if h <= 0:
        raise ConfigError(f"finite_difference_check: step must be positive, got {h}")
    leaf = parameter(np.array(x.data, copy=True))
    out = f(leaf)
    if out.size != 1:
        raise UsageError("finite_difference_check: f must return a scalar")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    numeric = np.zeros(leaf.size)
    base = leaf.data.ravel()
    for i in range(base.size):
        xp = base.copy()
        xm = base.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(constant(xp.reshape(leaf.shape))).item()
        fm = f(constant(xm.reshape(leaf.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("finite_difference_check: f non-finite at a perturbed point")
        numeric[i] = (fp - fm) / (2.0 * h)

    err = np.abs(analytic.ravel() - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
