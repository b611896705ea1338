"""Reverse-mode automatic differentiation over dense float64 arrays.

A `Tape` records every operation whose inputs are being tracked; `backward`
replays the records once, in reverse append order (which is a topological
order by construction). Tensors without a tape behave as constants, so the
same forward code serves both training and evaluation.

Forward values needed by adjoints are captured eagerly in the op closures;
nothing is recomputed during the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "Gradients",
    "ShapeError",
    "BatchTooSmallError",
    "OracleError",
    "FixedBNConfig",
    "FiniteDiffReport",
    "constant",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "concat",
    "slice_rows",
    "take_rows",
    "reduce_sum",
    "mean",
    "square",
    "sqrt",
    "exp",
    "log",
    "relu",
    "tanh",
    "sigmoid",
    "softplus",
    "sparse_dense_matmul",
    "fixed_batch_norm",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class BatchTooSmallError(ValueError):
    """Batch statistics were requested over fewer than two rows."""


class OracleError(RuntimeError):
    """A numerical oracle detected an unusable target function."""


class _Node:
    __slots__ = ("kind", "parents", "backward_fn")

    def __init__(self, kind, parents, backward_fn):
        self.kind = kind
        self.parents = parents  # tuple of node ids; None marks a constant input
        self.backward_fn = backward_fn  # grad_out -> per-parent grads, None for leaves


class Tape:
    """Append-only record of operations for one differentiation pass."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def watch(self, values) -> "Tensor":
        """Register a leaf tensor whose gradient should be tracked."""
        data = np.asarray(values, dtype=np.float64)
        return self._record(data, "leaf", (), None)

    def _record(self, data, kind, parents, backward_fn) -> "Tensor":
        node_id = len(self._nodes)
        self._nodes.append(_Node(kind, parents, backward_fn))
        return Tensor(data, tape=self, node_id=node_id)


class Tensor:
    """Dense float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, values, tape: Tape | None = None, node_id: int | None = None):
        self.data = np.asarray(values, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = "" if self.tape is None else f", node={self.node_id}"
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; all arithmetic delegates to the module-level ops

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def constant(values) -> Tensor:
    return Tensor(values)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(tensors: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands live on different tapes")
    return tape


def _apply(kind, inputs: Sequence[Tensor], data, backward_fn) -> Tensor:
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(data)
    parents = tuple(t.node_id if t.tape is not None else None for t in inputs)
    return tape._record(data, kind, parents, backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic --------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data + b.data
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _apply("add", (a, b), data, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data - b.data
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _apply("sub", (a, b), data, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data * b.data
    da, db, sa, sb = a.data, b.data, a.shape, b.shape

    def bw(g):
        return _unbroadcast(g * db, sa), _unbroadcast(g * da, sb)

    return _apply("mul", (a, b), data, bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data / b.data
    da, db, sa, sb = a.data, b.data, a.shape, b.shape

    def bw(g):
        return _unbroadcast(g / db, sa), _unbroadcast(-g * da / (db * db), sb)

    return _apply("div", (a, b), data, bw)


def neg(a: Tensor) -> Tensor:
    return _apply("neg", (a,), -a.data, lambda g: (-g,))


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")
    da, db = a.data, b.data

    def bw(g):
        return g @ db.T, da.T @ g

    return _apply("matmul", (a, b), da @ db, bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _apply("transpose", (a,), a.data.T, lambda g: (g.T,))


def sparse_dense_matmul(s, d: Tensor, entries: Tensor | None = None) -> Tensor:
    """CSR (n x m) times dense (m x k).

    When `entries` is given, it overrides the stored entry values and
    participates in differentiation, so sparse coefficients can be learned.
    """
    d = _lift(d)
    if d.ndim != 2 or s.cols != d.shape[0]:
        raise ShapeError(
            f"sparse_dense_matmul shapes incompatible: {s.shape} @ {d.shape}"
        )
    if entries is not None and entries.data.shape != s.entry_values.shape:
        raise ShapeError("entry override must match the stored entry count")
    vals = s.entry_values if entries is None else entries.data
    data = s.matmul_dense(d.data, values=vals)
    dd = d.data
    st = s.transpose()

    if entries is None:

        def bw(g):
            return (st.matmul_dense(g),)

        return _apply("spmm", (d,), data, bw)

    def bw2(g):
        grad_entries = np.einsum("ij,ij->i", g[s.row_ids], dd[s.col_indices])
        return st.matmul_dense(g, values=vals), grad_entries

    return _apply("spmm", (d, entries), data, bw2)


# -- shape manipulation -------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _apply("concat", tuple(tensors), data, bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("slice_rows expects a 2-D tensor")
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"row slice [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _apply("slice_rows", (a,), a.data[start:stop], bw)


def take_rows(a: Tensor, indices) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("take_rows expects a 2-D tensor")
    idx = np.asarray(indices, dtype=np.int64)
    if len(idx) and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError("row index out of range")
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _apply("take_rows", (a,), a.data[idx], bw)


# -- reductions ---------------------------------------------------------------


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _apply("sum", (a,), data, bw)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return reduce_sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- elementwise nonlinearities ------------------------------------------------


def square(a: Tensor) -> Tensor:
    da = a.data
    return _apply("square", (a,), da * da, lambda g: (2.0 * da * g,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _apply("sqrt", (a,), out, lambda g: (0.5 * g / out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _apply("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    da = a.data
    return _apply("log", (a,), np.log(da), lambda g: (g / da,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _apply("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _apply("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_values(a.data)
    return _apply("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    """ln(1 + e^x); switched to x + ln(1 + e^-x) above 30 so nothing overflows."""
    x = a.data
    out = np.where(
        x > 30.0,
        x + np.log1p(np.exp(-np.abs(x))),
        np.log1p(np.exp(np.minimum(x, 30.0))),
    )
    grad_vals = _sigmoid_values(x)
    return _apply("softplus", (a,), out, lambda g: (g * grad_vals,))


# -- batch normalization with a frozen scale ----------------------------------


@dataclass
class FixedBNConfig:
    """Batch normalization with frozen scale and learnable shift.

    gamma is a plain float, deliberately kept outside every parameter
    collection so no optimizer can ever touch it; beta is the learnable
    per-dimension shift.
    """

    gamma: float
    beta: Tensor
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def fixed_batch_norm(l: Tensor, cfg: FixedBNConfig) -> Tensor:
    """Normalize each column to std `gamma` and mean `beta` over the batch axis.

    Uses biased (divide-by-b) variance. Built from primitive ops, so the
    adjoint needs no dedicated rule; gamma enters as a bare float and stays
    outside the tape.
    """
    if l.ndim != 2:
        raise ShapeError("fixed_batch_norm expects a 2-D (batch x dim) tensor")
    b = l.shape[0]
    if b < 2:
        raise BatchTooSmallError(f"batch statistics need at least 2 rows, got {b}")
    mu = mean(l, axis=0, keepdims=True)
    centered = l - mu
    var = mean(square(centered), axis=0, keepdims=True)
    std = sqrt(var + cfg.epsilon)
    return (centered / std) * cfg.gamma + cfg.beta


# -- backward pass ------------------------------------------------------------


class Gradients:
    """Result of a backward pass; zero for leaves the loss never reached."""

    def __init__(self, tape: Tape, slots: list):
        self._tape = tape
        self._slots = slots

    def wrt(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape:
            raise ValueError("tensor does not belong to the differentiated tape")
        g = self._slots[t.node_id] if t.node_id < len(self._slots) else None
        if g is None:
            return np.zeros_like(t.data)
        return np.array(g)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Accumulate gradients of a scalar loss for every node on the tape."""
    if loss.tape is not tape:
        raise ValueError("loss tensor is not on the given tape")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    slots: list = [None] * len(tape)
    slots[loss.node_id] = np.ones_like(loss.data)
    for node_id in range(loss.node_id, -1, -1):
        g = slots[node_id]
        if g is None:
            continue
        node = tape._nodes[node_id]
        if node.backward_fn is None:
            continue
        parts = node.backward_fn(g)
        for parent_id, part in zip(node.parents, parts):
            if parent_id is None or part is None:
                continue
            if slots[parent_id] is None:
                slots[parent_id] = part
            else:
                slots[parent_id] = slots[parent_id] + part
    return Gradients(tape, slots)


# -- finite-difference oracle ---------------------------------------------------


@dataclass
class FiniteDiffReport:
    passed: bool
    max_rel_error: float
    worst_index: tuple[int, ...]
    analytic: np.ndarray
    numeric: np.ndarray

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"finite-diff {status}: max relative error {self.max_rel_error:.3e} "
            f"at index {self.worst_index}"
        )


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    tol: float = 1e-4,
    step: float = 1e-4,
) -> FiniteDiffReport:
    """Compare the tape gradient of scalar f against central differences.

    f must be deterministic; this is verified by evaluating it twice and
    demanding bit-identical results before any derivative is trusted.
    """
    x0 = np.array(x, dtype=np.float64)  # private copy; coordinates get perturbed

    def value_at(arr: np.ndarray) -> float:
        out = f(Tensor(arr))
        if out.data.size != 1:
            raise ShapeError("finite_diff_check target must return a scalar")
        return float(out.data)

    first, second = value_at(x0), value_at(x0)
    if first != second:
        raise OracleError("target function is not deterministic")

    tape = Tape()
    xt = tape.watch(x0)
    loss = f(xt)
    if loss.tape is not tape:
        raise ValueError("target function did not use the watched tensor")
    analytic = backward(tape, loss).wrt(xt)

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = value_at(x0)
        flat[i] = orig - step
        down = value_at(x0)
        flat[i] = orig
        num_flat[i] = (up - down) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), x0.shape) if rel.size else ()
    max_rel = float(rel.max()) if rel.size else 0.0
    return FiniteDiffReport(
        passed=max_rel < tol,
        max_rel_error=max_rel,
        worst_index=worst,
        analytic=analytic,
        numeric=numeric,
    )
