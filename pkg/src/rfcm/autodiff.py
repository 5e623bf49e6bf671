"""Reverse-mode automatic differentiation over dense numpy arrays.

Provides exactly the primitives the captioning model needs: dense,
row-major, float32/float64 tensors of rank 0, 1 or 2, with no
broadcasting beyond python scalars and the explicit row-bias op.

Recording happens only inside an active ``Tape`` context; outside a tape
every op is a plain numpy computation, which keeps forward-only
evaluation (validation, decoding, finite differences) cheap. A tape is
one-shot: build it, run the forward pass inside ``with tape:``, call
``tape.backward(loss)`` once, read gradients, throw it away.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Additive mask value for disallowed attention logits. Finite (so the
# no-NaN/inf debug invariant holds) but large enough that exp() of the
# shifted logit underflows to exactly 0.0 in both float precisions.
MASKED_LOGIT = -1.0e9

_ids = itertools.count()
_TAPES: list["Tape"] = []

_debug_finite = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-op finite-value assertions (slow; meant for tests)."""
    global _debug_finite
    _debug_finite = bool(enabled)


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class TapeError(RuntimeError):
    """Tape misuse: double backward, non-scalar loss, untracked loss."""


class Tensor:
    """Dense real array plus a gradient-tracking flag.

    Treated as immutable once created: ops return new tensors and never
    write into operand buffers. ``requires_grad`` marks leaves whose
    gradients the caller wants after ``Tape.backward``.
    """

    __slots__ = ("data", "requires_grad", "tid")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"tensors are at most rank 2, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.tid = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are plain python numbers, never broadcast arrays.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of one forward pass, in creation order.

    Creation order is a topological order by construction (an op's
    inputs exist before its output), so ``backward`` is a single reverse
    sweep with no sorting. ``gradients`` maps tensor id -> ndarray after
    backward; intermediate gradients are dropped as soon as consumed.
    """

    def __init__(self):
        self._nodes: list[tuple[int, bool, tuple]] = []
        self._live: set[int] = set()
        self.gradients: dict[int, np.ndarray] = {}
        self._done = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self, "tape contexts must nest properly"
        return False

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t.tid in self._live

    def _record(self, out: Tensor, contribs) -> None:
        live = tuple(c for c in contribs if self._tracks(c[0]))
        if live:
            self._live.add(out.tid)
            self._nodes.append((out.tid, out.requires_grad, live))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        if self._done:
            raise TapeError("backward() already ran on this tape; build a new tape")
        if loss.data.shape != ():
            raise TapeError(f"loss must be a scalar tensor, got shape {loss.data.shape}")
        if loss.tid not in self._live:
            raise TapeError("loss was not computed under this tape (or has no gradient path)")
        self._done = True
        grads = self.gradients
        grads[loss.tid] = np.ones((), dtype=loss.data.dtype)
        for out_tid, keep, contribs in reversed(self._nodes):
            g = grads.get(out_tid)
            if g is None:
                continue
            if not keep:
                del grads[out_tid]
            for t, fn in contribs:
                gt = fn(g)
                prev = grads.get(t.tid)
                grads[t.tid] = gt if prev is None else prev + gt
        return grads

    def grad(self, t: Tensor) -> np.ndarray | None:
        return self.gradients.get(t.tid)


def _emit(out_data: np.ndarray, *contribs) -> Tensor:
    """Wrap an op result and record its gradient contributions."""
    if _debug_finite and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("op produced a non-finite value")
    out = Tensor(out_data)
    if _TAPES:
        _TAPES[-1]._record(out, contribs)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes differ: {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# Elementwise ops. The second operand may be a python scalar (constant).

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "add")
        return _emit(a.data + b.data, (a, lambda g: g), (b, lambda g: g))
    return _emit(a.data + float(b), (a, lambda g: g))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "sub")
        return _emit(a.data - b.data, (a, lambda g: g), (b, lambda g: -g))
    return _emit(a.data - float(b), (a, lambda g: g))


def hadamard(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "hadamard")
        return _emit(a.data * b.data, (a, lambda g: g * b.data), (b, lambda g: g * a.data))
    return scale(a, b)


def scale(a: Tensor, s) -> Tensor:
    s = float(s)
    return _emit(a.data * s, (a, lambda g: g * s))


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Dispatch form of the pointwise ops: op in {add, sub, hadamard, scale}."""
    try:
        return {"add": add, "sub": sub, "hadamard": hadamard, "scale": scale}[op](a, b)
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a, lambda g: g * mask))


# ---------------------------------------------------------------------------
# Linear algebra.

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise DimensionError(f"matmul: inner dimensions disagree: {ad.shape} vs {bd.shape}")
        return _emit(ad @ bd, (a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g))
    if ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise DimensionError(f"matmul: inner dimensions disagree: {ad.shape} vs {bd.shape}")
        return _emit(ad @ bd, (a, lambda g: np.outer(g, bd)), (b, lambda g: ad.T @ g))
    if ad.ndim == 1 and bd.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise DimensionError(f"matmul: inner dimensions disagree: {ad.shape} vs {bd.shape}")
        return _emit(ad @ bd, (a, lambda g: bd @ g), (b, lambda g: np.outer(ad, g)))
    if ad.ndim == 1 and bd.ndim == 1:
        if ad.shape[0] != bd.shape[0]:
            raise DimensionError(f"matmul: inner dimensions disagree: {ad.shape} vs {bd.shape}")
        return _emit(ad @ bd, (a, lambda g: g * bd), (b, lambda g: g * ad))
    raise DimensionError(f"matmul: unsupported ranks {ad.shape} x {bd.shape}")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.data.shape}")
    return _emit(np.ascontiguousarray(a.data.T), (a, lambda g: g.T))


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """Add a bias row to every row of a matrix (the affine-layer bias op)."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"add_row: incompatible shapes {x.data.shape} and {b.data.shape}")
    return _emit(x.data + b.data[None, :], (x, lambda g: g), (b, lambda g: g.sum(axis=0)))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b). Accepts a matrix of rows or a single vector x."""
    out = matmul(x, w)
    if b is None:
        return out
    if out.data.ndim == 1:
        return add(out, b)
    return add_row(out, b)


# ---------------------------------------------------------------------------
# Shape ops.

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.data.shape
    return _emit(a.data.reshape(shape), (a, lambda g: g.reshape(old)))


def flatten(a: Tensor) -> Tensor:
    """Row-major flatten to a vector."""
    return reshape(a, (a.data.size,))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of zero tensors")
    nd = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != nd:
            raise DimensionError("concat: mixed ranks")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def slice_for(i):
        lo, hi = offsets[i], offsets[i + 1]
        if axis == 0:
            return lambda g: g[lo:hi]
        return lambda g: g[:, lo:hi]

    return _emit(out_data, *[(t, slice_for(i)) for i, t in enumerate(tensors)])


def _scatter_rows(shape, dtype, lo, hi):
    def fn(g):
        z = np.zeros(shape, dtype=dtype)
        z[lo:hi] = g
        return z

    return fn


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= a.data.shape[0]):
        raise DimensionError(f"slice_rows [{start}:{stop}] out of range for shape {a.data.shape}")
    return _emit(a.data[start:stop], (a, _scatter_rows(a.data.shape, a.data.dtype, start, stop)))


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.data.shape[1]):
        raise DimensionError(f"slice_cols [{start}:{stop}] out of range for shape {a.data.shape}")

    def fn(g):
        z = np.zeros(a.data.shape, dtype=a.data.dtype)
        z[:, start:stop] = g
        return z

    return _emit(np.ascontiguousarray(a.data[:, start:stop]), (a, fn))


def take_row(a: Tensor, i: int) -> Tensor:
    """Row i of a matrix, as a vector."""
    if a.data.ndim != 2 or not (0 <= i < a.data.shape[0]):
        raise DimensionError(f"take_row {i} out of range for shape {a.data.shape}")

    def fn(g):
        z = np.zeros(a.data.shape, dtype=a.data.dtype)
        z[i] = g
        return z

    return _emit(a.data[i].copy(), (a, fn))


def tile_rows(a: Tensor, n: int) -> Tensor:
    """Stack a vector n times into an n-row matrix."""
    if a.data.ndim != 1:
        raise DimensionError(f"tile_rows expects a vector, got shape {a.data.shape}")
    return _emit(np.tile(a.data, (n, 1)), (a, lambda g: g.sum(axis=0)))


# ---------------------------------------------------------------------------
# Reductions and lookups.

def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.data.shape, a.data.dtype
    return _emit(a.data.sum(dtype=dtype), (a, lambda g: np.full(shape, g, dtype=dtype)))


def mean_all(a: Tensor) -> Tensor:
    shape, dtype = a.data.shape, a.data.dtype
    inv = 1.0 / a.data.size
    return _emit(a.data.mean(dtype=dtype), (a, lambda g: np.full(shape, g * inv, dtype=dtype)))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of an embedding table; backward scatters into those rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError(f"embedding ids must be a flat sequence, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.data.shape[0])][0]
        raise IndexError(f"token id {bad} out of range for table of {table.data.shape[0]} rows")

    def fn(g):
        z = np.zeros(table.data.shape, dtype=table.data.dtype)
        np.add.at(z, ids, g)
        return z

    return _emit(table.data[ids], (table, fn))


def pick(a: Tensor, ids) -> Tensor:
    """out[i] = a[i, ids[i]]; the per-row class-probability gather."""
    ids = np.asarray(ids, dtype=np.int64)
    if a.data.ndim != 2 or ids.shape != (a.data.shape[0],):
        raise DimensionError(f"pick: need one id per row, got {a.data.shape} and {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= a.data.shape[1]):
        raise IndexError("pick: id out of range")
    rows = np.arange(a.data.shape[0])

    def fn(g):
        z = np.zeros(a.data.shape, dtype=a.data.dtype)
        np.add.at(z, (rows, ids), g)
        return z

    return _emit(a.data[rows, ids], (a, fn))


# ---------------------------------------------------------------------------
# Nonlinear primitives with hand-derived gradients.

def _axis_check(a: Tensor, axis: int) -> int:
    if axis < 0:
        axis += a.data.ndim
    if not (0 <= axis < a.data.ndim):
        raise DimensionError(f"axis {axis} invalid for shape {a.data.shape}")
    return axis


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _axis_check(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return _emit(y, (a, fn))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _axis_check(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def fn(g):
        return g - np.exp(ls) * g.sum(axis=axis, keepdims=True)

    return _emit(ls, (a, fn))


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI

    def fn(g):
        return g * (cdf + x * pdf)

    return _emit(x * cdf, (a, fn))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.data.shape} and {bias.data.shape}"
        )
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    lead = tuple(range(x.data.ndim - 1))

    def fn_x(g):
        gx = g * gain.data
        return (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)) * inv_std

    return _emit(
        xhat * gain.data + bias.data,
        (x, fn_x),
        (gain, lambda g: (g * xhat).sum(axis=lead)),
        (bias, lambda g: g.sum(axis=lead)),
    )


# ---------------------------------------------------------------------------
# Finite-difference gradient checking.

@dataclass
class GradCheckEntry:
    name: str
    rel_err: float           # worst guarded relative error (see GradCheckReport)
    raw_rel_err: float       # worst unguarded |ad-fd| / (|ad|+|fd|+1e-12)
    worst: list              # [(flat index, analytic, numeric, rel err), ...] by raw error

    @property
    def passed_at(self):
        return self.rel_err


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float
    abs_floor: float

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def summary(self) -> str:
        lines = [
            f"{'PASS' if e.rel_err < self.tolerance else 'FAIL'}  {e.name:<40s} rel_err={e.rel_err:.3e}"
            for e in self.entries
        ]
        lines.append(
            f"{'PASS' if self.passed else 'FAIL'}  overall max rel_err={self.max_rel_err:.3e} "
            f"(tolerance {self.tolerance:.1e})"
        )
        return "\n".join(lines)


def grad_check(
    f,
    inputs,
    *,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    names=None,
    abs_floor: float = 1e-7,
    worst_k: int = 5,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` maps the input tensors to a scalar Tensor and must be
    deterministic. Inputs with ``requires_grad`` are checked element by
    element; buffers are perturbed in place and restored bit-exactly.
    The relative error is |ad-fd| / (|ad|+|fd|+1e-12); elements whose
    absolute disagreement is below ``abs_floor`` count as exact, since
    central differences on a float64 forward pass carry ~1e-10 of
    rounding noise that would otherwise dominate near-zero gradients.
    Requires 64-bit inputs for the default tolerances to be meaningful.
    """
    tape = Tape()
    with tape:
        out = f(*inputs)
    tape.backward(out)

    entries = []
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        name = names[i] if names else f"input{i}"
        ad = tape.grad(t)
        if ad is None:
            ad = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        ad_flat = np.asarray(ad, dtype=np.float64).reshape(-1)
        num = np.empty_like(ad_flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = float(f(*inputs).data)
            flat[j] = orig - step
            fm = float(f(*inputs).data)
            flat[j] = orig
            num[j] = (fp - fm) / (2.0 * step)
        diff = np.abs(ad_flat - num)
        raw_rel = diff / (np.abs(ad_flat) + np.abs(num) + 1e-12)
        rel = np.where(diff <= abs_floor, 0.0, raw_rel)
        order = np.argsort(raw_rel)[::-1][:worst_k]
        worst = [(int(j), float(ad_flat[j]), float(num[j]), float(raw_rel[j])) for j in order]
        entries.append(
            GradCheckEntry(
                name=name,
                rel_err=float(rel.max()) if rel.size else 0.0,
                raw_rel_err=float(raw_rel.max()) if raw_rel.size else 0.0,
                worst=worst,
            )
        )
    return GradCheckReport(entries=entries, tolerance=tolerance, abs_floor=abs_floor)
