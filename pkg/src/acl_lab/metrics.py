"""Embedding diagnostics: uniformity, tolerance, linear probe and class-wise accuracy."""

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import LabelMismatch, LengthMismatch, TooFewSamples
from .numerics import as_matrix, normalize_rows

DEFAULT_T = 2.0
# above this many rows the pair expectation is estimated from a fixed-seed sample
EXACT_PAIR_LIMIT = 2048
SAMPLED_PAIRS = 2_000_000


class LabeledEmbeddings:
    """Unit-normalized rows with one class label each."""

    def __init__(self, z, labels):
        self.z = normalize_rows(z)
        self.labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != self.z.shape[0]:
            raise LengthMismatch(f"{self.z.shape[0]} rows but {self.labels.shape[0]} labels")

    def __len__(self):
        return self.z.shape[0]


@dataclass
class MetricReport:
    uniformity: float
    tolerance: float
    t_param: float
    n_samples: int
    probe_acc: float = float("nan")
    step: int = 0

    CSV_HEADER = ("step", "uniformity", "tolerance", "t", "probe_acc")

    def csv_row(self):
        return [str(self.step), repr(self.uniformity), repr(self.tolerance),
                repr(self.t_param), repr(self.probe_acc)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        w.writerow(self.csv_row())
        return buf.getvalue()


def _pair_index(n, seed=0):
    if n <= EXACT_PAIR_LIMIT:
        return np.triu_indices(n, 1)
    g = rngmod.stream(seed, rngmod.SPLIT, n)
    i = g.integers(0, n, size=SAMPLED_PAIRS)
    j = g.integers(0, n - 1, size=SAMPLED_PAIRS)
    j = np.where(j >= i, j + 1, j)
    return i, j


def _pair_dots(z, i, j):
    return np.einsum("ij,ij->i", z[i], z[j])


def _require_pairs(emb):
    if len(emb) < 2:
        raise TooFewSamples("need at least two embeddings")


def uniformity(emb: LabeledEmbeddings, t: float = DEFAULT_T) -> float:
    """log of the mean Gaussian potential exp(-t |z_x - z_y|^2) over distinct pairs."""
    if not t > 0:
        raise ValueError(f"t must be > 0, got {t}")
    _require_pairs(emb)
    i, j = _pair_index(len(emb))
    sq_norm = np.einsum("ij,ij->i", emb.z, emb.z)
    sq = np.maximum(0.0, sq_norm[i] + sq_norm[j] - 2.0 * _pair_dots(emb.z, i, j))
    x = -t * sq
    m = float(np.max(x))
    value = m + math.log(float(np.mean(np.exp(x - m))))
    return min(value, 0.0)


def tolerance(emb: LabeledEmbeddings, normalization: str = "all_pairs") -> float:
    """Mean same-label cosine similarity.

    ``normalization="all_pairs"`` averages over every distinct pair (cross-label
    pairs contribute zero); ``"same_class"`` averages over same-label pairs only.
    """
    _require_pairs(emb)
    i, j = _pair_index(len(emb))
    same = emb.labels[i] == emb.labels[j]
    sims = _pair_dots(emb.z, i, j)
    if normalization == "all_pairs":
        value = float(np.sum(np.where(same, sims, 0.0))) / i.shape[0]
    elif normalization == "same_class":
        if not np.any(same):
            return 0.0
        value = float(np.mean(sims[same]))
    else:
        raise ValueError(f"unknown tolerance normalization {normalization!r}")
    return min(1.0, max(-1.0, value))


def metric_report(emb: LabeledEmbeddings, t: float = DEFAULT_T, normalization="all_pairs",
                  step=0, probe_acc=float("nan")) -> MetricReport:
    return MetricReport(uniformity(emb, t), tolerance(emb, normalization), float(t), len(emb),
                        probe_acc=probe_acc, step=step)


@dataclass
class LinearProbe:
    W: np.ndarray
    b: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, x):
        return ((as_matrix(x) - self.mean) / self.scale) @ self.W + self.b

    def predict(self, x):
        return np.argmax(self.logits(x), axis=1)


def fit_linear_probe(x, labels, n_classes=None, epochs=200, lr=0.5, seed=0) -> LinearProbe:
    """Softmax regression by full-batch gradient descent on standardized features."""
    from .losses import cross_entropy

    x = as_matrix(x)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    xs = (x - mean) / scale
    g = rngmod.stream(seed, rngmod.PROBE)
    W = g.normal(0.0, 0.01, size=(x.shape[1], n_classes))
    b = np.zeros(n_classes)
    for _ in range(epochs):
        res = cross_entropy(xs @ W + b, labels)
        W -= lr * (xs.T @ res.grad)
        b -= lr * res.grad.sum(axis=0)
    return LinearProbe(W, b, mean, scale)


def linear_probe(train: LabeledEmbeddings, test: LabeledEmbeddings, epochs: int = 200,
                 lr: float = 0.5, seed: int = 0, return_predictions=False):
    """Train a linear softmax classifier on frozen ``train`` rows; accuracy on ``test``."""
    if train.z.shape[1] != test.z.shape[1]:
        raise LabelMismatch(f"train dim {train.z.shape[1]} != test dim {test.z.shape[1]}")
    n_classes = int(train.labels.max()) + 1
    if test.labels.size and (test.labels.min() < 0 or test.labels.max() >= n_classes
                             or not np.isin(test.labels, train.labels).all()):
        raise LabelMismatch("test labels contain classes never seen in training")
    probe = fit_linear_probe(train.z, train.labels, n_classes, epochs, lr, seed)
    pred = probe.predict(test.z)
    acc = float(np.mean(pred == test.labels))
    return (acc, pred) if return_predictions else acc


def class_wise_accuracy(pred, truth) -> dict:
    """Per-class recall keyed by class index, plus ``"macro"``."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise LengthMismatch(f"{pred.shape[0]} predictions vs {truth.shape[0]} labels")
    out = {}
    for c in np.unique(truth):
        hit = pred[truth == c] == c
        out[int(c)] = float(np.mean(hit))
    out["macro"] = float(np.mean(list(out.values()))) if out else float("nan")
    return out
