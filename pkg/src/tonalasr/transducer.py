"""Transducer alignment-lattice likelihood.

A lattice holds normalised log-probabilities ``log_probs[t, u, k]`` for
encoder frame ``t``, output position ``u`` (tokens emitted so far) and symbol
``k``; ``k = 0`` is blank.  A path advances ``t`` on blank and ``u`` on
emitting ``targets[u]``; it must finish with the blank out of
``(T - 1, U)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import DimensionError, Tensor, record

BLANK = 0
NEG = -1e30  # stands in for log(0); avoids inf - inf
_FEASIBLE = -1e29


class LabelError(ValueError):
    """Target ids outside ``[1, V]``."""


class SizeError(ValueError):
    """Brute-force enumeration requested on a lattice that is too large."""


@dataclass
class LossResult:
    nll: float
    grad: np.ndarray | None
    feasible: bool = True


def _validate(log_probs: np.ndarray, targets: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 3:
        raise DimensionError(f"lattice must be 3-D (T, U+1, V+1), got {lp.shape}")
    y = np.asarray(targets, dtype=np.int64).reshape(-1)
    T, U1, K = lp.shape
    if T < 1:
        raise DimensionError("lattice needs at least one frame")
    if U1 != y.size + 1:
        raise DimensionError(f"lattice has {U1} positions but {y.size} targets")
    bad = y[(y < 1) | (y >= K)]
    if bad.size:
        raise LabelError(f"target id {int(bad[0])} outside [1, {K - 1}]")
    return np.maximum(lp, NEG), y


def _alpha(blank: np.ndarray, emit: np.ndarray) -> np.ndarray:
    """Batched forward variables; ``blank`` is (B, T, U+1), ``emit`` (B, T, U).

    Padding cells must hold NEG; they never feed real cells.
    """
    B, T, U1 = blank.shape
    alpha = np.full((B, T, U1), NEG)
    alpha[:, 0, 0] = 0.0
    # cells on one anti-diagonal depend only on the previous diagonal
    for n in range(1, T + U1 - 1):
        t = np.arange(max(0, n - U1 + 1), min(T - 1, n) + 1)
        u = n - t
        from_blank = np.full((B, t.size), NEG)
        ok = t > 0
        from_blank[:, ok] = alpha[:, t[ok] - 1, u[ok]] + blank[:, t[ok] - 1, u[ok]]
        from_emit = np.full((B, t.size), NEG)
        ok = u > 0
        from_emit[:, ok] = alpha[:, t[ok], u[ok] - 1] + emit[:, t[ok], u[ok] - 1]
        alpha[:, t, u] = np.maximum(np.logaddexp(from_blank, from_emit), NEG)
    return alpha


def _beta(blank: np.ndarray, emit: np.ndarray, frames: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Batched backward variables; each utterance ends at ``(frames-1, lengths)``."""
    B, T, U1 = blank.shape
    rows = np.arange(B)
    terminal = np.full((B, T, U1), NEG)
    terminal[rows, frames - 1, lengths] = blank[rows, frames - 1, lengths]
    beta = terminal.copy()
    for n in range(T + U1 - 3, -1, -1):
        t = np.arange(max(0, n - U1 + 1), min(T - 1, n) + 1)
        u = n - t
        via_blank = np.full((B, t.size), NEG)
        ok = t < T - 1
        via_blank[:, ok] = beta[:, t[ok] + 1, u[ok]] + blank[:, t[ok], u[ok]]
        via_emit = np.full((B, t.size), NEG)
        ok = u < U1 - 1
        via_emit[:, ok] = beta[:, t[ok], u[ok] + 1] + emit[:, t[ok], u[ok]]
        both = np.logaddexp(np.logaddexp(via_blank, via_emit), terminal[:, t, u])
        beta[:, t, u] = np.maximum(both, NEG)
    return beta


def _pack(lattices: Sequence[np.ndarray], targets: Sequence[np.ndarray]):
    B = len(lattices)
    frames = np.array([lp.shape[0] for lp in lattices])
    lengths = np.array([y.size for y in targets])
    T, U1 = frames.max(), lengths.max() + 1
    blank = np.full((B, T, U1), NEG)
    emit = np.full((B, T, U1 - 1), NEG)
    for b, (lp, y) in enumerate(zip(lattices, targets)):
        blank[b, :frames[b], :lengths[b] + 1] = lp[:, :, BLANK]
        if y.size:
            emit[b, :frames[b], :y.size] = lp[:, np.arange(y.size), y]
    return blank, emit, frames, lengths


def _nll_batch(lattices: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> list[LossResult]:
    blank, emit, frames, lengths = _pack(lattices, targets)
    rows = np.arange(len(lattices))
    alpha = _alpha(blank, emit)
    beta = _beta(blank, emit, frames, lengths)
    log_z = alpha[rows, frames - 1, lengths] + blank[rows, frames - 1, lengths]
    # blank occupancy alpha(t,u) blank(t,u) beta(t+1,u); the terminal blank closes the path
    nxt = np.full(blank.shape, NEG)
    nxt[:, :-1] = beta[:, 1:]
    nxt[rows, frames - 1, lengths] = 0.0
    safe_z = np.where(log_z < _FEASIBLE, 0.0, log_z)[:, None, None]
    occ_blank = -np.exp(alpha + blank + nxt - safe_z)
    occ_emit = -np.exp(alpha[:, :, :-1] + emit + beta[:, :, 1:] - safe_z)
    results = []
    for b, (lp, y) in enumerate(zip(lattices, targets)):
        if log_z[b] < _FEASIBLE:
            results.append(LossResult(math.inf, None, feasible=False))
            continue
        Tb, Ub = frames[b], lengths[b]
        grad = np.zeros(lp.shape)
        grad[:, :, BLANK] = occ_blank[b, :Tb, :Ub + 1]
        if Ub:
            grad[:, np.arange(Ub), y] += occ_emit[b, :Tb, :Ub]
        results.append(LossResult(float(-log_z[b]), grad))
    return results


def forward_alpha(log_probs, targets: Sequence[int]) -> np.ndarray:
    """Forward variables ``alpha[t, u]``: log-mass of reaching ``(t, u)``."""
    lp, y = _validate(log_probs, targets)
    blank, emit, _, _ = _pack([lp], [y])
    return _alpha(blank, emit)[0]


def transducer_nll(log_probs, targets: Sequence[int]) -> LossResult:
    """Negative log-likelihood of ``targets`` and its gradient w.r.t. the lattice.

    Returns ``nll = inf`` with ``feasible=False`` (and no gradient) when the
    terminal node cannot be reached.
    """
    lp, y = _validate(log_probs, targets)
    return _nll_batch([lp], [y])[0]


def brute_force_nll(log_probs, targets: Sequence[int], max_steps: int = 16) -> float:
    """Reference NLL by enumerating every monotonic blank/emit path."""
    lp, y = _validate(log_probs, targets)
    T, U1, _ = lp.shape
    U = U1 - 1
    if T + U > max_steps:
        raise SizeError(f"T + U = {T + U} exceeds enumeration guard {max_steps}")
    totals = []
    # choose which of the first T-1+U moves are emissions; the last move is blank
    for emits in itertools.combinations(range(T - 1 + U), U):
        t = u = 0
        logp = 0.0
        emit_set = set(emits)
        for step in range(T - 1 + U):
            if step in emit_set:
                logp += lp[t, u, y[u]]
                u += 1
            else:
                logp += lp[t, u, BLANK]
                t += 1
        logp += lp[T - 1, U, BLANK]
        totals.append(logp)
    m = max(totals)
    if m < _FEASIBLE:
        return math.inf
    return -(m + math.log(math.fsum(math.exp(v - m) for v in totals)))


def transducer_loss(log_probs: Tensor, targets: Sequence[int]) -> Tensor:
    """Differentiable NLL of one lattice tensor, for use under a GradTape."""
    res = transducer_nll(log_probs.data, targets)
    if not res.feasible:
        raise ArithmeticError("transducer lattice has no complete path")
    grad = res.grad
    return record("transducer_nll", (log_probs,), np.array([res.nll]),
                  lambda g: (grad * g[0],))


@dataclass(frozen=True)
class LatticeSegment:
    """Rows ``[offset, offset + T * (U + 1))`` of a flat joint output, t-major."""

    offset: int
    frames: int
    targets: tuple[int, ...]

    @property
    def rows(self) -> int:
        return self.frames * (len(self.targets) + 1)


def batch_transducer_loss(flat_log_probs: Tensor, segments: Sequence[LatticeSegment]) -> Tensor:
    """Mean per-utterance NLL over lattices packed row-wise in one tensor.

    The reduction uses ``math.fsum`` so the result does not depend on
    utterance order.
    """
    flat = flat_log_probs.data
    K = flat.shape[1]
    lattices, targets = [], []
    for seg in segments:
        lat = flat[seg.offset:seg.offset + seg.rows].reshape(seg.frames, len(seg.targets) + 1, K)
        lp, y = _validate(lat, seg.targets)
        lattices.append(lp)
        targets.append(y)
    nlls, grads = [], []
    for seg, res in zip(segments, _nll_batch(lattices, targets)):
        if not res.feasible:
            raise ArithmeticError(f"lattice at offset {seg.offset} has no complete path")
        nlls.append(res.nll)
        grads.append(res.grad.reshape(-1, K))
    n = len(segments)
    mean = math.fsum(nlls) / n
    shape = flat.shape

    def backward(g):
        out = np.zeros(shape)
        for seg, gr in zip(segments, grads):
            out[seg.offset:seg.offset + seg.rows] = gr * (g[0] / n)
        return (out,)

    return record("batch_transducer_nll", (flat_log_probs,), np.array([mean]), backward)
