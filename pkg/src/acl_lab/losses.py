"""Contrastive (NT-Xent), angular margin, their weighted combination, and the
supervised cross-entropy + margin objective.

Every loss returns its value together with the analytic gradient with respect
to the embeddings it consumed. Batches of ``2N`` rows are laid out so that rows
``2k`` and ``2k + 1`` are the two views of source item ``k``.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DimMismatch, LabelOutOfRange, ZeroVector
from .numerics import as_matrix, log_sum_exp_rows, row_norms

# |u| beyond this switches the arccos chain rule to its limit forms
ENDPOINT = 1.0 - 1e-7
NEAR_PARALLEL = 1.0 - 1e-4

DEFAULT_TAU = 0.2
DEFAULT_ALPHA = 0.3
DEFAULT_MARGIN = math.pi / 2


@dataclass(frozen=True)
class LossConfig:
    tau: float = DEFAULT_TAU
    m_g: float = DEFAULT_MARGIN
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not (0 < self.m_g <= math.pi):
            raise ValueError(f"m_g must lie in (0, pi], got {self.m_g}")
        if not (0 <= self.alpha <= 1):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class LossResult:
    value: float
    grad: np.ndarray


@dataclass
class CombinedResult:
    """Weighted two-term loss; each gradient block is already scaled by its weight."""

    value: float
    first: float
    second: float
    grad_first: np.ndarray
    grad_second: np.ndarray


class PairBatch:
    """Projection-space ``z`` and encoder-space ``h`` for 2N paired views."""

    def __init__(self, z, h=None):
        self.z = _paired_matrix(z, "z")
        self.h = None if h is None else _paired_matrix(h, "h")
        if self.h is not None and self.h.shape[0] != self.z.shape[0]:
            raise DimMismatch(f"z has {self.z.shape[0]} rows but h has {self.h.shape[0]}")

    @property
    def n_pairs(self) -> int:
        return self.z.shape[0] // 2


def _paired_matrix(m, name):
    m = as_matrix(m)
    if m.shape[0] < 2 or m.shape[0] % 2:
        raise DimMismatch(f"{name} needs an even number (>= 2) of rows, got {m.shape[0]}")
    row_norms(m)
    return m


def build_pair_relation(n_pairs: int) -> np.ndarray:
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    n = 2 * n_pairs
    s = np.zeros((n, n), dtype=np.int8)
    even = np.arange(0, n, 2)
    s[even, even + 1] = 1
    s[even + 1, even] = 1
    return s


def label_relation(labels) -> np.ndarray:
    labels = np.asarray(labels).reshape(-1)
    s = (labels[:, None] == labels[None, :]).astype(np.int8)
    np.fill_diagonal(s, 0)
    return s


def check_relation(relation, n: int) -> np.ndarray:
    s = np.asarray(relation)
    if s.shape != (n, n):
        raise DimMismatch(f"relation shape {s.shape} does not match {n} rows")
    if np.any(np.diag(s)) or not np.array_equal(s, s.T):
        raise ValueError("relation must be symmetric with a zero diagonal")
    return s.astype(bool)


def _normalize_through(m):
    norms = row_norms(m)
    return m / norms[:, None], norms


def _unnormalize_grad(grad_unit, unit, norms):
    # d/dx of x/|x| applied to an upstream gradient: project out the radial part
    radial = np.einsum("ij,ij->i", grad_unit, unit)
    return (grad_unit - unit * radial[:, None]) / norms[:, None]


def nt_xent(batch, tau: float) -> LossResult:
    """Mean NT-Xent over all 2N anchors, gradient with respect to raw ``z``."""
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    z = batch.z if isinstance(batch, PairBatch) else PairBatch(batch).z
    n = z.shape[0]
    unit, norms = _normalize_through(z)
    logits = (unit @ unit.T) / tau
    off_diag = _pair_layout(n)[1]
    partner = np.arange(n) ^ 1
    rows = np.arange(n)

    lse = log_sum_exp_rows(logits, off_diag)
    terms = lse - logits[rows, partner]
    value = float(np.sum(terms)) / n

    soft = np.where(off_diag, np.exp(logits - lse[:, None]), 0.0)
    soft[rows, partner] -= 1.0
    g_sim = soft / (n * tau)
    grad_unit = (g_sim + g_sim.T) @ unit
    grad = _unnormalize_grad(grad_unit, unit, norms)
    return LossResult(max(value, 0.0), grad)


def _theta_over_sin(x):
    """x / sin(x), accurate near zero."""
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < 1e-4
    safe = np.where(small, 1.0, x)
    x2 = x * x
    return np.where(small, 1.0 + x2 / 6.0 + 7.0 * x2 * x2 / 360.0, safe / np.sin(safe))


def _margin_terms(u, theta, positive, m_g):
    """Per-pair loss, d(loss)/du, and a mask of pairs whose d/du diverges.

    For masked pairs the gradient is taken along the unit tangent direction
    instead (see ``angular_margin``); their d/du entry is returned as 0.
    """
    hinge = np.maximum(0.0, m_g - theta)
    loss = np.where(positive, theta * theta, hinge * hinge)
    lprime = np.where(positive, 2.0 * theta, -2.0 * hinge)

    near_one = u > ENDPOINT
    near_minus_one = u < -ENDPOINT
    irregular = near_one | near_minus_one
    sin_t = np.sin(theta)
    # loss'(theta) * dtheta/du with dtheta/du = -1/sin(theta)
    dldu = -lprime / np.where(irregular, 1.0, sin_t)
    dldu[irregular] = 0.0

    # theta -> 0 for positives: -2 theta/sin(theta) -> -2
    sel = near_one & positive
    if sel.any():
        dldu[sel] = -2.0 * _theta_over_sin(theta[sel])
    # theta -> pi for negatives with an active hinge (only when m_g is close to pi)
    sel = near_minus_one & ~positive & (hinge > 0)
    if sel.any():
        delta = math.pi - theta[sel]
        dldu[sel] = 2.0 * ((m_g - math.pi) / np.sin(delta) + _theta_over_sin(delta))

    singular = (near_one & ~positive & (hinge > 0)) | (near_minus_one & positive)
    return loss, dldu, singular, lprime


@lru_cache(maxsize=64)
def _pair_layout(n):
    iu = np.triu_indices(n, 1)
    off = ~np.eye(n, dtype=bool)
    for a in (*iu, off):
        a.flags.writeable = False
    return iu, off


def _pair_angles(unit, u):
    """arccos of the clamped cosines, recomputed as 2*atan2(|a-b|, |a+b|) for
    nearly (anti)parallel rows where arccos loses half the digits."""
    theta = np.arccos(u)
    i, j = np.nonzero(np.triu(np.abs(u) > NEAR_PARALLEL, 1))
    if i.size:
        diff = np.linalg.norm(unit[i] - unit[j], axis=1)
        tot = np.linalg.norm(unit[i] + unit[j], axis=1)
        precise = 2.0 * np.arctan2(diff, tot)
        theta[i, j] = precise
        theta[j, i] = precise
    np.fill_diagonal(theta, 0.0)
    return theta


def angular_margin(h, relation, m_g: float = DEFAULT_MARGIN) -> LossResult:
    """Mean angular margin loss over all unordered row pairs of ``h``.

    Positive pairs (``relation == 1``) pay the squared angle, negatives pay the
    squared hinge ``max(0, m_g - angle)``. Rows are normalized inside the loss;
    the gradient is with respect to the raw rows.
    """
    if not 0 < m_g <= math.pi:
        raise ValueError(f"m_g must lie in (0, pi], got {m_g}")
    h = as_matrix(h)
    n = h.shape[0]
    if n < 2:
        raise DimMismatch("angular margin needs at least two rows")
    positive = check_relation(relation, n)
    unit, norms = _normalize_through(h)
    u = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(u, 1.0)

    theta = _pair_angles(unit, u)
    loss, dldu, singular, lprime = _margin_terms(u, theta, positive, m_g)
    iu, off_diag = _pair_layout(n)
    n_pairs = n * (n - 1) // 2
    value = float(np.sum(loss[iu])) / n_pairs

    dldu = np.where(off_diag, dldu, 0.0) / n_pairs
    grad = _unnormalize_grad(dldu @ unit, unit, norms)

    singular = singular & off_diag
    for i, j in zip(*np.nonzero(singular)):
        # cone point of the angle: follow the unit tangent towards/away from j
        r = unit[j] - u[i, j] * unit[i]
        rn = math.sqrt(float(r @ r))
        if rn > 0.0:
            grad[i] -= (lprime[i, j] / n_pairs) * (r / rn) / norms[i]
    return LossResult(value, grad)


def acl(batch: PairBatch, relation, cfg: LossConfig) -> CombinedResult:
    """``alpha * NT-Xent(z) + (1 - alpha) * angular margin(h)``.

    ``grad_first`` is the gradient on ``z``, ``grad_second`` on ``h``.
    """
    if batch.h is None:
        raise DimMismatch("acl needs encoder-space rows h")
    lc = nt_xent(batch, cfg.tau)
    la = angular_margin(batch.h, relation, cfg.m_g)
    a = cfg.alpha
    return CombinedResult(
        value=a * lc.value + (1.0 - a) * la.value,
        first=lc.value,
        second=la.value,
        grad_first=a * lc.grad,
        grad_second=(1.0 - a) * la.grad,
    )


def cross_entropy(logits, labels) -> LossResult:
    logits = as_matrix(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise DimMismatch(f"{n} logit rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelOutOfRange(f"labels must lie in [0, {c})")
    lse = log_sum_exp_rows(logits)
    rows = np.arange(n)
    value = float(np.sum(lse - logits[rows, labels])) / n
    grad = np.exp(logits - lse[:, None])
    grad[rows, labels] -= 1.0
    return LossResult(max(value, 0.0), grad / n)


def supervised_combined(logits, h, labels, cfg: LossConfig) -> CombinedResult:
    """``alpha * CE(logits) + (1 - alpha) * angular margin(h, same-label relation)``.

    ``grad_first`` is the gradient on the logits, ``grad_second`` on ``h``.
    """
    ce = cross_entropy(logits, labels)
    la = angular_margin(h, label_relation(labels), cfg.m_g)
    a = cfg.alpha
    return CombinedResult(
        value=a * ce.value + (1.0 - a) * la.value,
        first=ce.value,
        second=la.value,
        grad_first=a * ce.grad,
        grad_second=(1.0 - a) * la.grad,
    )


__all__ = [
    "LossConfig", "LossResult", "CombinedResult", "PairBatch", "ZeroVector",
    "build_pair_relation", "label_relation", "nt_xent", "angular_margin", "acl",
    "cross_entropy", "supervised_combined",
]
