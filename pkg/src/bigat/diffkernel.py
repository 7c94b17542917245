"""Dense float64 kernel: forward primitives paired with their vector-Jacobian products.

Every primitive ``f`` has a companion ``f_backward`` taking the upstream
gradient and returning the gradient(s) with respect to its inputs. Models
compose these by hand; :func:`grad_check` is the safety net.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class StructureError(ValueError):
    pass


class NonDeterministicClosure(RuntimeError):
    pass


class GradientMismatch(AssertionError):
    pass


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array, optionally checking its shape."""
    m = np.ascontiguousarray(values, dtype=np.float64)
    if m.ndim == 1 and rows is not None and cols is not None:
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows or cols is not None and m.shape[1] != cols:
        raise DimensionError(f"expected shape ({rows}, {cols}), got {m.shape}")
    return m


@dataclass(eq=False)
class Param:
    """A learnable matrix and its accumulated gradient."""

    value: np.ndarray
    grad: np.ndarray = field(init=False)
    name: str = ""

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {self.name or ''} {self.value.shape}")
        self.grad += g


def unique_params(params: Iterable[Param]) -> list[Param]:
    """Drop repeated references to the same Param (tied weights), keeping first-seen order."""
    seen: set[int] = set()
    out = []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


# --- matmul -----------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    if a.shape[1] == 0:
        return np.zeros((a.shape[0], b.shape[1]))
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return g @ b.T, a.T @ g


# --- leaky relu -------------------------------------------------------------

def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    return np.where(x >= 0.0, x, slope * x)


def leaky_relu_backward(x: np.ndarray, slope: float, g: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 1
    return np.where(x >= 0.0, g, slope * g)


# --- segmented softmax ------------------------------------------------------
#
# Scores for all nodes live in one flat array; node v owns the contiguous slice
# scores[starts[v]:starts[v + 1]]. Every slice must be non-empty.

def _check_segments(n_entries: int, starts: np.ndarray) -> None:
    if len(starts) == 0:
        if n_entries:
            raise StructureError("scores given without any segment")
        return
    ends = np.append(starts[1:], n_entries)
    if starts[0] != 0 or np.any(ends <= starts):
        raise StructureError("every node needs a non-empty normalization set")


def segment_sum(values: np.ndarray, starts: np.ndarray) -> np.ndarray:
    if len(starts) == 0:
        return np.zeros((0,) + values.shape[1:])
    return np.add.reduceat(values, starts, axis=0)


def segment_lengths(n_entries: int, starts: np.ndarray) -> np.ndarray:
    return np.diff(np.append(starts, n_entries))


def masked_softmax_rows(scores: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Softmax of each node's score slice; returns weights aligned with ``scores``."""
    scores = np.asarray(scores, dtype=np.float64)
    starts = np.asarray(starts, dtype=np.intp)
    _check_segments(len(scores), starts)
    if len(scores) == 0:
        return scores.copy()
    lengths = segment_lengths(len(scores), starts)
    peak = np.repeat(np.maximum.reduceat(scores, starts), lengths)
    ex = np.exp(scores - peak)
    return ex / np.repeat(np.add.reduceat(ex, starts), lengths)


def masked_softmax_rows_backward(weights: np.ndarray, starts: np.ndarray, g: np.ndarray) -> np.ndarray:
    if len(weights) == 0:
        return np.zeros(0)
    lengths = segment_lengths(len(weights), starts)
    inner = np.repeat(np.add.reduceat(weights * g, starts), lengths)
    return weights * (g - inner)


def scatter_add_rows(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """out[i] = sum of values[j] over j with index[j] == i (backward of ``x[index]``)."""
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n).astype(np.float64)
    out = np.empty((n, values.shape[1]))
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(index, weights=values[:, c], minlength=n)
    return out


# --- verification -----------------------------------------------------------

def grad_check(
    closure: Callable[[], float],
    params: Sequence[Param],
    h: float = 1e-5,
    tolerance: float | None = None,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``closure`` must zero the gradients, evaluate the loss, run backward into
    ``params`` and return the loss. Returns the maximum entrywise relative error
    with denominator ``max(|analytic|, |numeric|, 1e-8)``. When ``tolerance`` is
    given a larger error raises :class:`GradientMismatch`.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = unique_params(params)
    if not params:
        return 0.0

    base = closure()
    analytic = [p.grad.copy() for p in params]
    again = closure()
    if base != again or any(not np.array_equal(a, p.grad) for a, p in zip(analytic, params)):
        raise NonDeterministicClosure(f"closure returned {base!r} then {again!r}")

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.value.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = closure()
            flat[i] = orig - h
            f_minus = closure()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(ana_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(ana_flat[i] - numeric) / denom)
    closure()  # leave params with gradients matching the restored values
    if tolerance is not None and worst > tolerance:
        raise GradientMismatch(f"max relative gradient error {worst:.3e} exceeds {tolerance:.1e}")
    return worst
