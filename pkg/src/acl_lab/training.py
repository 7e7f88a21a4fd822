"""Training loops: self-supervised ACL pretraining, supervised CE + margin,
and one-factor sweeps over tau or alpha."""

import csv
import math
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .config import ExperimentConfig
from .data import (LabeledData, audio_features, audio_views, augment_batch, generate_synthetic,
                   load_wav_corpus, read_dataset_csv, train_test_split)
from .encoder import (backward, classifier_backward, classifier_logits, commit_running_stats,
                      embed, forward, init_params, project)
from .errors import NumericError, TrainingDiverged
from .losses import LossConfig, PairBatch, acl, build_pair_relation, supervised_combined
from .metrics import LabeledEmbeddings, linear_probe, tolerance, uniformity
from .optim import make_optimizer

RECORD_HEADER = ("epoch", "loss_total", "loss_c", "loss_a", "uniformity", "tolerance",
                 "probe_acc", "wall_ms")
SWEEP_HEADER = ("axis", "value", "method", "alpha", "tau", "uniformity", "tolerance", "probe_acc")


@dataclass
class TrainRecord:
    epoch: int
    loss_total: float
    loss_contrastive: float
    loss_margin: float
    uniformity: float
    tolerance: float
    probe_acc: float
    wall_ms: float

    def csv_row(self):
        return [str(self.epoch), repr(self.loss_total), repr(self.loss_contrastive),
                repr(self.loss_margin), repr(self.uniformity), repr(self.tolerance),
                repr(self.probe_acc), repr(self.wall_ms)]


@dataclass
class TrainResult:
    params: object
    records: list
    test_predictions: np.ndarray = None
    test_labels: np.ndarray = None

    @property
    def final(self) -> TrainRecord:
        return self.records[-1]


@contextmanager
def thread_limit(n=None):
    """Cap BLAS worker threads (``ACL_LAB_THREADS`` when ``n`` is None)."""
    if n is None:
        env = os.environ.get("ACL_LAB_THREADS", "").strip()
        n = int(env) if env else None
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=int(n)):
        yield


class VectorViews:
    """Pair views of fixed feature vectors via random scaling, noise and masking."""

    def __init__(self, train: LabeledData, test: LabeledData, spec, seed):
        self.train, self.test, self.spec, self.seed = train, test, spec, seed

    def views(self, items, epoch):
        x = self.train.x[items]
        return (augment_batch(x, self.spec, self.seed, items, 0, epoch),
                augment_batch(x, self.spec, self.seed, items, 1, epoch))


class AudioViews:
    """Pair views of log-mel clips: crops, mix-back, resized crop, masks, blur."""

    def __init__(self, corpus_train, corpus_test, audio, augment, seed):
        self.corpus_train, self.audio, self.augment, self.seed = corpus_train, audio, augment, seed
        self.train = LabeledData(audio_features(corpus_train, audio.target_frames), corpus_train.labels)
        self.test = LabeledData(audio_features(corpus_test, audio.target_frames), corpus_test.labels)

    def views(self, items, epoch):
        return audio_views(self.corpus_train, items, self.seed, epoch, self.audio.target_frames,
                           self.augment)


def load_labeled(cfg: ExperimentConfig):
    """(train, test) LabeledData for vector datasets."""
    kind = cfg.get("dataset.kind")
    if kind == "synthetic":
        data = generate_synthetic(cfg.dataset_spec())
    else:
        data = read_dataset_csv(cfg.get("dataset.path"))
    return train_test_split(data, cfg.get("dataset.test_fraction"), cfg.get("dataset.seed"))


def make_view_source(cfg: ExperimentConfig):
    if cfg.get("dataset.kind") == "audio":
        audio = cfg.audio_config()
        corpus = load_wav_corpus(cfg.get("dataset.path"), audio)
        split = train_test_split(LabeledData(np.arange(len(corpus))[:, None], corpus.labels),
                                 cfg.get("dataset.test_fraction"), cfg.get("dataset.seed"))
        train_idx, test_idx = (s.x[:, 0] for s in split)
        return AudioViews(corpus.subset(train_idx), corpus.subset(test_idx), audio,
                          cfg.augmentation(), cfg.seed)
    train, test = load_labeled(cfg)
    return VectorViews(train, test, cfg.dataset_spec(), cfg.seed)


def _batches(n, batch_size, seed, epoch):
    order = rngmod.stream(seed, rngmod.SHUFFLE, epoch).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _interleave(a, b):
    out = np.empty((2 * a.shape[0], a.shape[1]))
    out[0::2] = a
    out[1::2] = b
    return out


def _eval_embeddings(params, x, space):
    h = embed(params, x)
    if space == "z":
        return project(params, h, mode="eval")
    return h


def _metrics(cfg, params, source, epoch, final):
    test = source.test if len(source.test) >= 2 else source.train
    space = cfg.get("metrics.space")
    emb = LabeledEmbeddings(_eval_embeddings(params, test.x, space), test.labels)
    u = uniformity(emb, cfg.metric_t)
    t = tolerance(emb, cfg.get("metrics.tolerance_normalization"))
    acc = float("nan")
    every = cfg.get("experiment.probe_every")
    if final or (epoch > 0 and epoch % every == 0):
        acc = probe_accuracy(cfg, params, source.train, test)
    return u, t, acc


def probe_accuracy(cfg, params, train: LabeledData, test: LabeledData, return_predictions=False):
    tr = LabeledEmbeddings(embed(params, train.x), train.labels)
    te = LabeledEmbeddings(embed(params, test.x), test.labels)
    return linear_probe(tr, te, epochs=cfg.get("probe.epochs"), lr=cfg.get("probe.lr"),
                        seed=cfg.seed, return_predictions=return_predictions)


def _check_finite(value, epoch, batch):
    if not math.isfinite(value):
        raise TrainingDiverged("non-finite loss", epoch=epoch, batch=batch)


@contextmanager
def _step(epoch, batch=None):
    # attach the training position to numeric failures (zero-norm rows, overflow)
    try:
        yield
    except TrainingDiverged:
        raise
    except NumericError as exc:
        raise TrainingDiverged(str(exc), epoch=epoch, batch=batch) from exc


def _wall(cfg, start):
    return (time.perf_counter() - start) * 1000.0 if cfg.get("experiment.record_wall_time") else 0.0


def _ssl_epoch(cfg, params, source, epoch, opt=None):
    """One pass over the training set; no parameter update when ``opt`` is None."""
    loss_cfg = cfg.loss
    totals = []
    for b, items in enumerate(_batches(len(source.train), cfg.get("optimizer.batch_size"), cfg.seed, epoch)):
        v0, v1 = source.views(items, epoch)
        x = _interleave(v0, v1)
        h, z, trace = forward(params, x, mode="train")
        with _step(epoch, b):
            res = acl(PairBatch(z, h), build_pair_relation(len(items)), loss_cfg)
        _check_finite(res.value, epoch, b)
        totals.append((res.value, res.first, res.second))
        if opt is None:
            continue
        grads = backward(trace, grad_h=res.grad_second, grad_z=res.grad_first)
        commit_running_stats(params, trace)
        opt.step(params.tensors, grads)
    arr = np.array(totals)
    return tuple(float(np.mean(arr[:, i])) for i in range(3))


def train_ssl(cfg: ExperimentConfig, source=None, threads=None) -> TrainResult:
    """ACL pretraining. Record 0 evaluates the initial encoder; records 1..E follow each epoch."""
    source = source or make_view_source(cfg)
    with thread_limit(threads):
        start = time.perf_counter()
        e = cfg.section("encoder")
        params = init_params(source.train.x.shape[1], hidden=e["hidden"], d_h=e["d_h"], d_z=e["d_z"],
                             head_hidden=e["head_hidden"], seed=cfg.seed,
                             final_activation=e["final_activation"])
        opt = make_optimizer(cfg.get("optimizer.kind"), cfg.get("optimizer.lr"))
        records = []
        for epoch in range(cfg.epochs + 1):
            losses = _ssl_epoch(cfg, params, source, epoch, opt if epoch else None)
            with _step(epoch):
                u, t, acc = _metrics(cfg, params, source, epoch, final=epoch == cfg.epochs)
            records.append(TrainRecord(epoch, *losses, u, t, acc, _wall(cfg, start)))
    return TrainResult(params, records)


def train_supervised(cfg: ExperimentConfig, data=None, threads=None) -> TrainResult:
    """Encoder + linear classifier trained on ``alpha * CE + (1 - alpha) * margin(h)``.

    ``probe_acc`` in the records is the classifier's own test accuracy.
    """
    train, test = data or load_labeled(cfg)
    n_classes = int(max(train.labels.max(), test.labels.max() if len(test) else 0)) + 1
    with thread_limit(threads):
        start = time.perf_counter()
        e = cfg.section("encoder")
        params = init_params(train.x.shape[1], hidden=e["hidden"], d_h=e["d_h"], head=False,
                             n_classes=n_classes, seed=cfg.seed, final_activation=e["final_activation"])
        opt = make_optimizer(cfg.get("optimizer.kind"), cfg.get("optimizer.lr"))
        eval_set = test if len(test) >= 2 else train
        records = []
        pred = None
        for epoch in range(cfg.epochs + 1):
            totals = []
            for b, items in enumerate(_batches(len(train), cfg.get("optimizer.batch_size"), cfg.seed, epoch)):
                with _step(epoch, b):
                    h, _, trace = forward(params, train.x[items], mode="train")
                    labels = train.labels[items]
                    logits = classifier_logits(params, h)
                    res = supervised_combined(logits, h, labels, cfg.loss) if len(items) > 1 else \
                        _single_row_supervised(logits, h, labels, cfg.loss)
                _check_finite(res.value, epoch, b)
                totals.append((res.value, res.first, res.second))
                if not epoch:
                    continue
                grads, dh = classifier_backward(params, h, res.grad_first)
                grads.update(backward(trace, grad_h=res.grad_second + dh))
                opt.step(params.tensors, grads)
            with _step(epoch):
                h_eval = embed(params, eval_set.x)
                emb = LabeledEmbeddings(h_eval, eval_set.labels)
            pred = np.argmax(classifier_logits(params, h_eval), axis=1)
            acc = float(np.mean(pred == eval_set.labels))
            arr = np.array(totals)
            records.append(TrainRecord(epoch, *(float(np.mean(arr[:, i])) for i in range(3)),
                                       uniformity(emb, cfg.metric_t),
                                       tolerance(emb, cfg.get("metrics.tolerance_normalization")),
                                       acc, _wall(cfg, start)))
    return TrainResult(params, records, pred, eval_set.labels)


def _single_row_supervised(logits, h, labels, loss_cfg):
    # the margin term needs two rows; a lone trailing row trains on CE only
    from .losses import CombinedResult, cross_entropy
    ce = cross_entropy(logits, labels)
    a = loss_cfg.alpha
    return CombinedResult(a * ce.value, ce.value, 0.0, a * ce.grad, np.zeros_like(h))


def run(cfg: ExperimentConfig, threads=None) -> TrainResult:
    return train_supervised(cfg, threads=threads) if cfg.mode == "supervised" else train_ssl(cfg, threads=threads)


def sweep(cfg: ExperimentConfig, axis: str, values, threads=None, source=None):
    """One seeded run per value for ACL (``cfg``'s alpha) and for the alpha = 1 baseline.

    Returns rows ``(axis, value, method, alpha, tau, uniformity, tolerance, probe_acc)``.
    """
    if axis not in ("tau", "alpha"):
        raise ValueError(f"axis must be 'tau' or 'alpha', got {axis!r}")
    if cfg.mode == "ssl" and source is None:
        source = make_view_source(cfg)
    cache = {}

    def once(c):
        if c not in cache:
            res = train_ssl(c, source, threads) if c.mode == "ssl" else train_supervised(c, threads=threads)
            cache[c] = res.final
        return cache[c]

    rows = []
    for v in values:
        v = float(v)
        point = cfg.replace(loss__tau=v) if axis == "tau" else cfg.replace(loss__alpha=v)
        for method, c in (("acl", point), ("baseline", point.replace(loss__alpha=1.0))):
            rec = once(c)
            rows.append((axis, v, method, c.loss.alpha, c.loss.tau, rec.uniformity, rec.tolerance,
                         rec.probe_acc))
    return rows


def write_records(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_HEADER)
        for r in records:
            w.writerow(r.csv_row())


def read_records(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != RECORD_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return [TrainRecord(int(r[0]), *(float(v) for v in r[1:])) for r in rows[1:]]


def write_sweep(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for row in rows:
            w.writerow([row[0], repr(row[1]), row[2]] + [repr(float(v)) for v in row[3:]])


__all__ = ["TrainRecord", "TrainResult", "train_ssl", "train_supervised", "sweep", "run",
           "write_records", "read_records", "write_sweep", "thread_limit", "LossConfig"]
