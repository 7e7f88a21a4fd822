"""Stable scalar and vector primitives.

Vectors and matrices are plain float64 numpy arrays (1-D and 2-D, C order).
"""

import math

import numpy as np

from .errors import EmptyInput, NonFinite, ZeroVector

ZERO_NORM = 1e-12


def as_vector(v) -> np.ndarray:
    arr = np.ascontiguousarray(v, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise NonFinite("vector has non-finite components")
    return arr


def as_matrix(m, cols=None) -> np.ndarray:
    arr = np.ascontiguousarray(m, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if cols is None else arr.reshape(-1, cols)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFinite("matrix has non-finite entries")
    return arr


def l2_normalize(v) -> np.ndarray:
    v = as_vector(v)
    norm = math.sqrt(float(np.dot(v, v)))
    if norm < ZERO_NORM:
        raise ZeroVector(f"cannot normalize vector with norm {norm:g}")
    return v / norm


def row_norms(m: np.ndarray) -> np.ndarray:
    """L2 norm of each row; raises ZeroVector if any row is (numerically) zero."""
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    bad = np.flatnonzero(norms < ZERO_NORM)
    if bad.size:
        raise ZeroVector(f"row {int(bad[0])} has zero norm")
    return norms


def normalize_rows(m) -> np.ndarray:
    m = as_matrix(m)
    return m / row_norms(m)[:, None]


def cosine_sim(a, b) -> float:
    u = float(np.dot(l2_normalize(a), l2_normalize(b)))
    return min(1.0, max(-1.0, u))


def stable_arccos(u: float) -> float:
    # hard clamp: the angle stays exact at the endpoints
    return math.acos(min(1.0, max(-1.0, float(u))))


def log_sum_exp(xs) -> float:
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    if xs.size == 0:
        raise EmptyInput("log_sum_exp of an empty sequence")
    m = float(np.max(xs))
    if not math.isfinite(m):
        return m
    return m + math.log(float(np.sum(np.exp(xs - m))))


def log_sum_exp_rows(x: np.ndarray, mask=None) -> np.ndarray:
    """Row-wise log-sum-exp, ignoring entries where ``mask`` is False."""
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=1, keepdims=True)))[:, 0]
