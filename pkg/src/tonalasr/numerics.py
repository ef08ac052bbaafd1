"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Tensors are immutable values.  Operations executed while a :class:`GradTape`
is active are recorded on it; ``tape.backward(root)`` then walks the records
in reverse and returns gradients for every watched tensor.

    >>> w = Tensor([[1.0, 2.0]])
    >>> with GradTape() as tape:
    ...     tape.watch(w)
    ...     loss = total(matmul(w, Tensor([[3.0], [4.0]])))
    >>> tape.backward(loss)[w]
    array([[3., 4.]])
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class Tensor:
    """Immutable row-major float64 array."""

    __slots__ = ("data",)

    def __init__(self, data, copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=copy)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self.data, threshold=8)})"


def _wrap(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    t.data = arr
    return t


class _Node:
    __slots__ = ("op", "inputs", "backward", "tensor")

    def __init__(self, op: str, inputs: tuple[int, ...], backward, tensor: Tensor):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.tensor = tensor


_local = threading.local()


def _active_tape() -> "GradTape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class GradTape:
    """Records operations in execution order (hence topological order).

    One tape belongs to one thread; nest-free use is expected, although
    entering a second tape simply shadows the first until it exits.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._ids: dict[int, int] = {}

    def __enter__(self) -> "GradTape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if id(t) not in self._ids:
                self._add("leaf", (), None, t)

    def node_id(self, t: Tensor) -> int | None:
        return self._ids.get(id(t))

    def _add(self, op: str, inputs: tuple[int, ...], backward, out: Tensor) -> None:
        self._ids[id(out)] = len(self.nodes)
        self.nodes.append(_Node(op, inputs, backward, out))

    def backward(self, root: Tensor) -> "Gradients":
        """Reverse sweep from a single-element ``root``; its gradient is 1.0."""
        if root.size != 1:
            raise DimensionError(f"backward root must be scalar, got shape {root.shape}")
        rid = self.node_id(root)
        if rid is None:
            raise ValueError("root tensor was not produced on this tape")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        # contributions may alias each other (add returns g twice); copy on first accumulation
        owned = [False] * len(self.nodes)
        grads[rid] = np.ones(root.shape)
        for i in range(rid, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.backward is None:
                continue
            contribs = node.backward(g)
            for j, c in zip(node.inputs, contribs):
                if j < 0 or c is None:
                    continue
                if grads[j] is None:
                    grads[j] = c
                elif owned[j]:
                    grads[j] += c
                else:
                    grads[j] = grads[j] + c
                    owned[j] = True
        return Gradients(self, grads)


class Gradients:
    """Read-only mapping from recorded tensors to their gradient arrays."""

    def __init__(self, tape: GradTape, grads: list):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        i = self._tape.node_id(t)
        if i is None:
            raise KeyError("tensor not recorded on tape")
        g = self._grads[i]
        return np.zeros(t.shape) if g is None else g


def record(op: str, inputs: Sequence[Tensor], out: np.ndarray,
           backward: Callable[[np.ndarray], Iterable[np.ndarray | None]]) -> Tensor:
    """Wrap ``out`` as a Tensor and register ``backward`` on the active tape.

    ``backward`` maps the output gradient to one contribution per input
    (``None`` for inputs that receive nothing).  Custom differentiable ops,
    e.g. the transducer loss, are built on this.
    """
    result = _wrap(out)
    tape = _active_tape()
    if tape is None:
        return result
    ids = tuple(-1 if (k := tape.node_id(t)) is None else k for t in inputs)
    if all(k < 0 for k in ids):
        return result
    tape._add(op, ids, backward, result)
    return result


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")
    return arr


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    A, B = a.data, b.data
    out = A @ B
    return record("matmul", (a, b), _check_finite(out, "matmul"),
                  lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum.  ``b`` may also be a bias vector over the last axis of ``a``."""
    if a.shape == b.shape:
        return record("add", (a, b), a.data + b.data, lambda g: (g, g))
    if b.data.ndim == 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.data.ndim - 1))
        return record("bias_add", (a, b), a.data + b.data,
                      lambda g: (g, g.sum(axis=lead)))
    raise DimensionError(f"add shapes {a.shape} and {b.shape} do not agree")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", (a,), a.data * c, lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return record("sum", (a,), np.array([a.data.sum()]),
                  lambda g: (np.full(shape, g[0]),))


def log_softmax(x: Tensor) -> Tensor:
    """Normalised log-probabilities along the last axis (max-subtracted)."""
    if x.data.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"log_softmax needs a non-empty last axis, got {x.shape}")
    m = x.data.max(axis=-1, keepdims=True)
    # a finite row max and sum imply finite outputs unless the input holds -inf/nan
    _check_finite(m, "log_softmax")
    y = x.data - m
    e = np.exp(y)
    s = e.sum(axis=-1, keepdims=True)
    _check_finite(s, "log_softmax")
    y -= np.log(s)

    def backward(g):
        out = e * (g.sum(axis=-1, keepdims=True) / s)
        return (np.subtract(g, out, out=out),)

    return record("log_softmax", (x,), y, backward)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; gradients scatter-add back into the rows."""
    if table.data.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    n = table.shape[0]
    bad = idx[(idx < 0) | (idx >= n)]
    if bad.size:
        raise IndexError(f"id {int(bad[0])} out of range for table with {n} rows")
    if idx.size == 0:
        raise DimensionError("embedding_lookup needs at least one id")
    shape = table.shape
    order = np.argsort(idx, kind="stable")
    rows, starts = np.unique(idx[order], return_index=True)

    def backward(g):
        out = np.zeros(shape)
        out[rows] = np.add.reduceat(g.reshape(idx.size, -1)[order], starts, axis=0).reshape((rows.size,) + shape[1:])
        return (out,)

    return record("embedding_lookup", (table,), table.data[idx], backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along the last axis."""
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise DimensionError(f"concat shapes {[p.shape for p in parts]} do not agree")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)
    return record("concat", tuple(parts), out,
                  lambda g: [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))])


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
               step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a list of parameter tensors to a single-element tensor.  The
    error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.  Functions
    with kinks (relu at 0) must be evaluated away from them.
    """
    params = list(params)
    with GradTape() as tape:
        tape.watch(*params)
        root = f(params)
    if not math.isfinite(root.item()):
        raise NumericError("objective is not finite")
    grads = tape.backward(root)
    worst = 0.0
    for k, p in enumerate(params):
        analytic = grads[p].reshape(-1)
        base = p.data.reshape(-1)
        for i in range(base.size):
            vals = []
            for sign in (1.0, -1.0):
                pert = base.copy()
                pert[i] += sign * step
                trial = list(params)
                trial[k] = Tensor(pert.reshape(p.shape))
                v = f(trial).item()
                if not math.isfinite(v):
                    raise NumericError("objective is not finite under perturbation")
                vals.append(v)
            numeric = (vals[0] - vals[1]) / (2 * step)
            err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
