"""Dense float64 matrix helpers.

A ``Matrix`` is a 2-D C-contiguous ``numpy.ndarray`` of float64. The helpers
here add the shape and domain checks the attention code relies on.
"""

from __future__ import annotations

import numpy as np

Matrix = np.ndarray


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


def as_matrix(data, cols: int | None = None) -> Matrix:
    """Coerce nested sequences or arrays to a 2-D float64 matrix."""
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim == 1 and cols is not None:
        m = m.reshape(-1, cols)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def zeros(rows: int, cols: int) -> Matrix:
    return np.zeros((rows, cols), dtype=np.float64)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def row_softmax_lse(scores: Matrix) -> tuple[Matrix, np.ndarray]:
    """Row-wise softmax and log-sum-exp, stabilized by max subtraction.

    Entries equal to ``-inf`` are treated as masked. A row that is entirely
    masked yields a zero probability row and ``lse = -inf``; callers decide
    whether that is legal.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] == 0 or scores.shape[1] == 0:
        raise DomainError(f"softmax needs a non-empty matrix, got shape {scores.shape}")
    if np.isnan(scores).any() or np.isposinf(scores).any():
        raise DomainError("softmax input contains NaN or +inf")

    row_max = scores.max(axis=1)
    live = np.isfinite(row_max)
    shift = np.where(live, row_max, 0.0)
    e = np.exp(scores - shift[:, None])
    total = e.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        probs = np.where(live[:, None], e / np.where(live, total, 1.0)[:, None], 0.0)
        lse = np.where(live, shift + np.log(np.where(live, total, 1.0)), -np.inf)
    return probs, lse
