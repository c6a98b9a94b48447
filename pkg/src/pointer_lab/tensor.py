"""Define-by-run reverse-mode autodiff over dense numpy arrays.

A :class:`Tape` records every operation whose inputs need gradients while it
is active; :func:`backward` replays the records in reverse order.  Tensors are
float32 unless constructed otherwise; the finite-difference oracle is the
only place float64 is expected.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("tensor was not produced on a tape")
        backward(self, self._tape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __radd__(self, other):
        return add(other, self)

    def __rmul__(self, other):
        return mul(other, self)

    def sum(self) -> Tensor:
        return sum_all(self)

    def mean(self) -> Tensor:
        return mean_all(self)

    def relu(self) -> Tensor:
        return relu(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None:
        dtype = arr.dtype if arr.dtype.kind == "f" else np.float32
    return Tensor(arr, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class TapeEntry:
    kind: str
    inputs: tuple[int | None, ...]
    output: int
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    entries: list[TapeEntry] = field(default_factory=list)
    nodes: list[Tensor] = field(default_factory=list)

    def __enter__(self) -> Tape:
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def owns(self, t: Tensor) -> bool:
        nid = t.node_id
        return nid is not None and nid < len(self.nodes) and self.nodes[nid] is t

    def _register(self, t: Tensor) -> int:
        if not self.owns(t):
            t.node_id = len(self.nodes)
            self.nodes.append(t)
        return t.node_id

    def __len__(self) -> int:
        return len(self.entries)


_TAPES: list[Tape] = []
_NO_GRAD = [0]


def active_tape() -> Tape | None:
    if _NO_GRAD[0] or not _TAPES:
        return None
    return _TAPES[-1]


@contextlib.contextmanager
def no_grad():
    _NO_GRAD[0] += 1
    try:
        yield
    finally:
        _NO_GRAD[0] -= 1


def record(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    """Wrap ``out`` in a Tensor and, when needed, put the op on the active tape.

    ``vjp`` maps the output cotangent to one cotangent per input (``None`` for
    inputs that take no gradient).  Layers outside this module use this to
    define fused primitives.
    """
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.node_id = None
    result._tape = None
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        result.requires_grad = False
        return result
    result.requires_grad = True
    ids = tuple(tape._register(t) if t.requires_grad else None for t in inputs)
    result._tape = tape
    out_id = tape._register(result)
    tape.entries.append(TapeEntry(kind, ids, out_id, vjp))
    return result


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on ``tape``."""
    if loss.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.owns(loss):
        raise TapeError("loss was not recorded on this tape")
    produced = {e.output for e in tape.entries}
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output, None)
        if g is None:
            continue
        for nid, ig in zip(entry.inputs, entry.vjp(g)):
            if nid is None or ig is None:
                continue
            prev = grads.get(nid)
            grads[nid] = ig if prev is None else prev + ig
    for nid, g in grads.items():
        if nid in produced:
            continue
        leaf = tape.nodes[nid]
        g = g.astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# MAC instrumentation
# ---------------------------------------------------------------------------


class MacCounter:
    def __init__(self):
        self.total = 0
        self.by_kind: dict[str, int] = {}

    def add(self, kind: str, n: int) -> None:
        self.total += n
        self.by_kind[kind] = self.by_kind.get(kind, 0) + n


_COUNTERS: list[MacCounter] = []


@contextlib.contextmanager
def count_macs():
    """Count forward multiply-accumulates issued by contraction ops."""
    counter = MacCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def add_macs(kind: str, n: int) -> None:
    for c in _COUNTERS:
        c.add(kind, int(n))


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def _check_leading(a_shape, b_shape, op):
    if a_shape == b_shape:
        return
    short, long_ = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} differ beyond leading dims")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_leading(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_leading(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_leading(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return record("mul", (a, b), ad * bd, vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return record("scale", (x,), x.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype),
                  lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    xd = x.data
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return record("sigmoid", (x,), y, lambda g: (g * y * (1 - y),))


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name: ``add``, ``mul``, ``relu`` or ``sigmoid``."""
    if op_kind in ("add", "mul"):
        if b is None:
            raise ShapeError(f"{op_kind} needs two operands")
        return add(a, b) if op_kind == "add" else mul(a, b)
    if op_kind == "relu":
        return relu(as_tensor(a))
    if op_kind == "sigmoid":
        return sigmoid(as_tensor(a))
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def masked_fill(x: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``keep`` is False by ``value``; no gradient flows there."""
    keep = np.broadcast_to(keep, x.shape)
    out = np.where(keep, x.data, x.dtype.type(value))
    return record("masked_fill", (x,), out, lambda g: (np.where(keep, g, 0).astype(g.dtype),))


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x.data)):
        bad = int(np.size(x.data) - np.count_nonzero(np.isfinite(x.data)))
        raise NonFiniteError(f"{what}: {bad} non-finite value(s)")
    return x


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return record("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype),
                  lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return record("mean", (x,), np.asarray(x.data.mean(), dtype=x.dtype),
                  lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat: leading shapes {a.shape} and {b.shape} differ")
    k = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return record("concat", (a, b), out, lambda g: (g[..., :k], g[..., k:]))


def softmax_last(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax", (x,), y, vjp)


# ---------------------------------------------------------------------------
# Contractions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` [..., m, k] and ``b`` [k, n] or [..., k, n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    add_macs("matmul", out.size * ad.shape[-1])

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record("matmul", (a, b), out, vjp)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows ``table[ids]``; the gradient scatter-adds back into ``table``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row index out of range [0, {table.shape[0]})")
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, ids.ravel(), g.reshape(-1, *shape[1:]))
        return (out,)

    return record("gather", (table,), table.data[ids], vjp)


_CHUNK_ELEMS = 1 << 22


def _sddmm(q: np.ndarray, k: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """out[r, c] = q[r] . k[idx[r, c]] without forming the dense product."""
    rows, width = idx.shape
    d = q.shape[1]
    out = np.empty((rows, width), dtype=np.result_type(q, k))
    step = max(1, _CHUNK_ELEMS // max(1, rows * d))
    for c0 in range(0, width, step):
        kg = k[idx[:, c0:c0 + step]]
        out[:, c0:c0 + step] = np.einsum("rcd,rd->rc", kg, q)
    return out


def _csr(weights: np.ndarray, idx: np.ndarray, n_cols: int) -> sp.csr_matrix:
    rows, width = idx.shape
    indptr = np.arange(0, rows * width + 1, width, dtype=np.int64)
    return sp.csr_matrix((weights.ravel(), idx.ravel(), indptr), shape=(rows, n_cols))


def _check_index(idx: np.ndarray, rows: int, n_src: int, op: str) -> None:
    if idx.ndim != 2 or idx.shape[0] != rows:
        raise ShapeError(f"{op}: index shape {idx.shape} does not match {rows} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= n_src):
        raise IndexError(f"{op}: index out of range [0, {n_src})")


def sampled_dot(q: Tensor, k: Tensor, idx: np.ndarray) -> Tensor:
    """Dot products of each query row with the key rows it names.

    ``q`` is [R, d], ``k`` is [S, d] and ``idx`` is an integer [R, W] table;
    the result is [R, W].  Work and memory are O(R·W·d), never O(R·S).
    """
    idx = np.asarray(idx)
    if q.shape[1:] != k.shape[1:] or q.data.ndim != 2:
        raise ShapeError(f"sampled_dot: {q.shape} vs {k.shape}")
    _check_index(idx, q.shape[0], k.shape[0], "sampled_dot")
    qd, kd = q.data, k.data
    add_macs("sampled_dot", idx.size * qd.shape[1])

    def vjp(g):
        m = _csr(g, idx, kd.shape[0])
        gq = np.asarray(m @ kd) if q.requires_grad else None
        gk = np.asarray(m.T @ qd) if k.requires_grad else None
        return gq, gk

    return record("sampled_dot", (q, k), _sddmm(qd, kd, idx), vjp)


def sparse_mix(w: Tensor, v: Tensor, idx: np.ndarray) -> Tensor:
    """out[r] = sum_c w[r, c] * v[idx[r, c]], a row-sparse weighted gather."""
    idx = np.asarray(idx)
    if w.shape != idx.shape:
        raise ShapeError(f"sparse_mix: weights {w.shape} vs index {idx.shape}")
    _check_index(idx, w.shape[0], v.shape[0], "sparse_mix")
    wd, vd = w.data, v.data
    add_macs("sparse_mix", idx.size * vd.shape[1])
    out = np.asarray(_csr(wd, idx, vd.shape[0]) @ vd)

    def vjp(g):
        gw = _sddmm(g, vd, idx) if w.requires_grad else None
        gv = np.asarray(_csr(wd, idx, vd.shape[0]).T @ g) if v.requires_grad else None
        return gw, gv

    return record("sparse_mix", (w, v), out, vjp)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    checked: list[tuple[int, ...]]
    excluded: list[tuple[int, ...]]
    analytic: dict[tuple[int, ...], float]
    numeric: dict[tuple[int, ...], float]


def _eval_scalar(f, x) -> float:
    with no_grad():
        out = f(x)
    val = float(np.asarray(out.data if isinstance(out, Tensor) else out, dtype=np.float64))
    if not np.isfinite(val):
        raise NonFiniteError("finite-difference probe produced a non-finite value")
    return val


def gradient_report(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3,
                    coords=None, kink_tol: float = 0.5) -> GradCheckReport:
    """Compare the taped gradient of scalar ``f`` at ``x`` with central differences.

    A coordinate is excluded when its two one-sided slopes disagree by more
    than ``kink_tol`` relative to their magnitude: the perturbation straddles
    a non-differentiable point (a ReLU kink, a flipped argmax) and no
    derivative exists to compare against.
    """
    x.grad = None
    x.requires_grad = True
    with Tape() as tape:
        loss = f(x)
    if loss.size != 1:
        raise TapeError("f must return a scalar")
    backward(loss, tape)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    if coords is None:
        coords = list(np.ndindex(*x.shape))
    # probes run on a float64 copy of x; everything downstream of x promotes
    original = x.data
    x.data = original.astype(np.float64)
    report = GradCheckReport(0.0, [], [], {}, {})
    try:
        f0 = _eval_scalar(f, x)
        # below this a central difference is cancellation noise, so the
        # relative error of a gradient that is truly zero stays meaningful
        floor = max(1e-8, 64 * np.finfo(np.float64).eps * max(abs(f0), 1.0) / eps)
        for c in coords:
            c = tuple(int(i) for i in c)
            orig = x.data[c]
            x.data[c] = orig + eps
            fp = _eval_scalar(f, x)
            x.data[c] = orig - eps
            fm = _eval_scalar(f, x)
            x.data[c] = orig
            num = (fp - fm) / (2 * eps)
            d_plus, d_minus = (fp - f0) / eps, (f0 - fm) / eps
            an = float(analytic[c])
            report.analytic[c], report.numeric[c] = an, num
            if abs(d_plus - d_minus) > kink_tol * max(abs(d_plus), abs(d_minus), 1e-6):
                report.excluded.append(c)
                continue
            err = abs(an - num) / max(abs(an), abs(num), floor)
            report.checked.append(c)
            report.max_rel_err = max(report.max_rel_err, err)
    finally:
        x.data = original
    return report


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3,
                      coords=None) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return gradient_report(f, x, eps, coords).max_rel_err
