"""Minimal reverse-mode automatic differentiation over dense 2-D tensors.

Values are float64 numpy arrays; every tensor in this package is rank 2
(scalars are (1, 1), vectors are rows (1, n) or columns (n, 1)).  Operations
executed while a Tape is active append a record to it; Tape.backward replays
the records in reverse, accumulating gradients additively across fan-out.
Without an active tape the same functions are plain numpy computations.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "StaleGradientError",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "sigmoid",
    "softmax",
    "log_softmax",
    "logsumexp",
    "concat",
    "narrow",
    "conv1d_same",
    "embedding",
    "sum_all",
    "sum_axis",
    "mean_all",
    "sqrt",
    "clamp_min",
    "reshape",
    "transpose",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


class StaleGradientError(RuntimeError):
    """Raised when backward() would accumulate into a gradient left over
    from a previous pass (missing zero_grad between optimizer steps)."""


_node_counter = itertools.count()


class Tensor:
    """Dense 2-D array with an optional gradient slot and a graph identity."""

    __slots__ = ("data", "grad", "node_id")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are rank 2, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.node_id = next(_node_counter)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        """Copy of the values with no tape history."""
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, id={self.node_id})"


def tensor(data) -> Tensor:
    return Tensor(data)


# ---------------------------------------------------------------------------
# Tape

_ACTIVE_TAPE = None


class Tape:
    """Execution-ordered record of operations for one backward pass.

    Records are appended in forward execution order, which is already a
    topological order, so a single reverse sweep visits every operation
    exactly once with its output gradient fully accumulated.
    """

    def __init__(self):
        self.records = []  # (output Tensor, input Tensors, backward fn)

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into .grad of every reachable tensor."""
        if loss.data.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        touched = {loss.node_id}
        if loss.grad is not None:
            raise StaleGradientError("loss tensor already carries a gradient")
        loss.grad = np.ones((1, 1))

        def accumulate(t: Tensor, g: np.ndarray, region=None):
            """Add g into t.grad (into t.grad[region] when region is given)."""
            if t.grad is None:
                if region is None:
                    t.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    t.grad = np.zeros_like(t.data)
                    t.grad[region] = g
                touched.add(t.node_id)
            elif t.node_id in touched:
                if region is None:
                    t.grad += g
                else:
                    t.grad[region] += g
            else:
                raise StaleGradientError(
                    "tensor carries a gradient from an earlier pass; "
                    "zero gradients between optimizer steps"
                )

        for out, inputs, bwd in reversed(self.records):
            if out.grad is None:
                continue  # not on any path to the loss
            bwd(out.grad, accumulate)


def _record(out, inputs, bwd):
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.records.append((out, inputs, bwd))
    return out


# ---------------------------------------------------------------------------
# Operators


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    if transpose_a and transpose_b:
        raise ShapeError("matmul supports at most one transpose flag")
    am = a.data.T if transpose_a else a.data
    bm = b.data.T if transpose_b else b.data
    if am.shape[1] != bm.shape[0]:
        raise ShapeError(f"matmul mismatch: {am.shape} @ {bm.shape}")
    out = Tensor(am @ bm)

    def bwd(g, acc):
        if transpose_a:
            acc(a, b.data @ g.T)
            acc(b, a.data @ g)
        elif transpose_b:
            acc(a, g @ b.data)
            acc(b, g.T @ a.data)
        else:
            acc(a, g @ b.data.T)
            acc(b, a.data.T @ g)

    return _record(out, (a, b), bwd)


def _binary_shapes(a: Tensor, b: Tensor, name: str) -> str:
    """Classify an elementwise pairing: same shape, row broadcast, or scalar."""
    if a.shape == b.shape:
        return "same"
    if b.shape == (1, a.shape[1]):
        return "row"
    if b.shape == (1, 1):
        return "scalar"
    raise ShapeError(f"{name} mismatch: {a.shape} vs {b.shape}")


def _reduce_like(g: np.ndarray, kind: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "row":
        return g.sum(axis=0, keepdims=True)
    return g.sum(keepdims=True).reshape(1, 1)


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g, acc):
        acc(a, g)
        acc(b, _reduce_like(g, kind))

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _binary_shapes(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g, acc):
        acc(a, g)
        acc(b, -_reduce_like(g, kind))

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g, acc):
        acc(a, g * b.data)
        acc(b, _reduce_like(g * a.data, kind))

    return _record(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)

    def bwd(g, acc):
        acc(a, g * c)

    return _record(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))
    y = out.data

    def bwd(g, acc):
        acc(a, g * (1.0 - y * y))

    return _record(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)

    def bwd(g, acc):
        acc(a, g * y * (1.0 - y))

    return _record(out, (a,), bwd)


def _check_axis(axis: int, name: str):
    if axis not in (0, 1):
        raise ShapeError(f"{name}: unknown axis {axis!r} for rank-2 tensor")


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    _check_axis(axis, "softmax")
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g, acc):
        acc(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _record(out, (a,), bwd)


def log_softmax(a: Tensor, axis: int = 1) -> Tensor:
    _check_axis(axis, "log_softmax")
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y)

    def bwd(g, acc):
        acc(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _record(out, (a,), bwd)


def logsumexp(a: Tensor, axis: int = 1) -> Tensor:
    """log Σ exp along an axis, max-shifted; keeps the reduced axis at size 1."""
    _check_axis(axis, "logsumexp")
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    y = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = Tensor(y)

    def bwd(g, acc):
        acc(a, np.exp(x - y) * g)

    return _record(out, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    _check_axis(axis, "concat")
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of empty list")
    other = 1 - axis
    ref = tensors[0].shape[other]
    for t in tensors[1:]:
        if t.shape[other] != ref:
            raise ShapeError(
                f"concat mismatch on axis {other}: {tensors[0].shape} vs {t.shape}"
            )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g, acc):
        start = 0
        for t, n in zip(tensors, sizes):
            piece = g[start : start + n] if axis == 0 else g[:, start : start + n]
            acc(t, piece)
            start += n

    return _record(out, tuple(tensors), bwd)


def stack_rows(tensors) -> Tensor:
    """Concatenate same-width row tensors along axis 0 (one record)."""
    return concat(tensors, axis=0)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` extents along one axis."""
    _check_axis(axis, "narrow")
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] out of range for shape {a.shape} axis {axis}"
        )
    sl = (slice(start, start + length), slice(None)) if axis == 0 else (slice(None), slice(start, start + length))
    out = Tensor(a.data[sl].copy())

    def bwd(g, acc):
        acc(a, g, region=sl)

    return _record(out, (a,), bwd)


def conv1d_same(x: Tensor, kernel: Tensor) -> Tensor:
    """1-D correlation of a column signal with a (channels, width) kernel.

    x is (T, 1); output is (T, channels) with zero padding so the kernel is
    centered (width must be odd).
    """
    if x.shape[1] != 1:
        raise ShapeError(f"conv1d_same expects a column signal, got {x.shape}")
    channels, width = kernel.shape
    if width % 2 == 0:
        raise ShapeError(f"conv1d_same kernel width must be odd, got {width}")
    T = x.shape[0]
    half = width // 2
    xp = np.zeros(T + width - 1)
    xp[half : half + T] = x.data[:, 0]
    windows = np.lib.stride_tricks.sliding_window_view(xp, width)  # (T, width)
    k = kernel.data
    out = Tensor(windows @ k.T)

    def bwd(g, acc):
        acc(kernel, g.T @ windows)
        gw = g @ k  # (T, width): contribution of step t to xp[t + j]
        dxp = np.zeros_like(xp)
        for j in range(width):
            dxp[j : j + T] += gw[:, j]
        acc(x, dxp[half : half + T].reshape(T, 1))

    return _record(out, (x, kernel), bwd)


def embedding(table: Tensor, index: int) -> Tensor:
    """Row lookup into an embedding table; gradient scatters into that row."""
    V = table.shape[0]
    if not 0 <= index < V:
        raise ShapeError(f"embedding index {index} out of range for table with {V} rows")
    out = Tensor(table.data[index : index + 1].copy())

    def bwd(g, acc):
        acc(table, g[0], region=index)

    return _record(out, (table,), bwd)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum().reshape(1, 1))

    def bwd(g, acc):
        acc(a, np.full_like(a.data, g[0, 0]))

    return _record(out, (a,), bwd)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    _check_axis(axis, "sum_axis")
    out = Tensor(a.data.sum(axis=axis, keepdims=True))

    def bwd(g, acc):
        acc(a, np.broadcast_to(g, a.data.shape).copy())

    return _record(out, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean().reshape(1, 1))

    def bwd(g, acc):
        acc(a, np.full_like(a.data, g[0, 0] / n))

    return _record(out, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root. Subgradient 0 where the input is 0, so a
    zero distance (identical sequences) does not poison the backward pass."""
    if np.any(a.data < 0):
        raise ShapeError("sqrt of negative entries")
    y = np.sqrt(a.data)
    out = Tensor(y)

    def bwd(g, acc):
        d = np.zeros_like(y)
        nz = y > 0
        d[nz] = 0.5 / y[nz]
        acc(a, g * d)

    return _record(out, (a,), bwd)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes through wherever a >= floor."""
    out = Tensor(np.maximum(a.data, floor))
    mask = (a.data >= floor).astype(np.float64)

    def bwd(g, acc):
        acc(a, g * mask)

    return _record(out, (a,), bwd)


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    if rows * cols != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to ({rows}, {cols})")
    out = Tensor(a.data.reshape(rows, cols).copy())

    def bwd(g, acc):
        acc(a, g.reshape(a.data.shape))

    return _record(out, (a,), bwd)


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T.copy())

    def bwd(g, acc):
        acc(a, g.T)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Gradient checking


class GradCheckReport:
    """Result of comparing analytic gradients against central differences."""

    __slots__ = ("max_rel_err", "bad_coords", "analytic", "numeric", "tolerance")

    def __init__(self, max_rel_err, bad_coords, analytic, numeric, tolerance):
        self.max_rel_err = max_rel_err
        self.bad_coords = bad_coords
        self.analytic = analytic
        self.numeric = numeric
        self.tolerance = tolerance

    @property
    def ok(self) -> bool:
        return not self.bad_coords

    def __repr__(self):
        state = "ok" if self.ok else f"{len(self.bad_coords)} bad"
        return f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, {state})"


def grad_check(f, point: Tensor, step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare the analytic gradient of a scalar function against central
    finite differences (f(x+h) − f(x−h)) / 2h, coordinate by coordinate.

    Relative error uses a unit floor, |a − n| / max(1, |a|, |n|), so
    near-zero coordinates are held to the tolerance absolutely.
    """
    point.data = np.ascontiguousarray(point.data)
    point.grad = None
    with Tape() as tape:
        out = f(point)
        if out.data.shape != (1, 1):
            raise ShapeError(f"grad_check needs a scalar function, got shape {out.data.shape}")
        tape.backward(out)
    analytic = point.grad.copy() if point.grad is not None else np.zeros_like(point.data)
    for rec_out, rec_inputs, _ in tape.records:
        rec_out.grad = None
        for t in rec_inputs:
            t.grad = None
    out.grad = None
    point.grad = None

    numeric = np.zeros_like(point.data)
    flat = point.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(point).item()
        flat[i] = orig - step
        lo = f(point).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"non-finite value at coordinate {i} during finite differencing")
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    bad = [tuple(ix) for ix in np.argwhere(rel > tolerance)]
    return GradCheckReport(float(rel.max()) if rel.size else 0.0, bad, analytic, numeric, tolerance)
