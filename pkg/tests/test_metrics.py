import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import special_ortho_group

from acl_lab.errors import LabelMismatch, LengthMismatch, TooFewSamples
from acl_lab.metrics import (LabeledEmbeddings, MetricReport, class_wise_accuracy, linear_probe,
                             metric_report, tolerance, uniformity)
from oracles import naive_tolerance, naive_uniformity, unit_rows


def test_uniformity_examples():
    same = LabeledEmbeddings(np.tile([[0.3, -0.4, 1.2]], (5, 1)), [0] * 5)
    assert uniformity(same, 2.0) == 0.0
    ortho = LabeledEmbeddings([[1.0, 0.0], [0.0, 1.0]], [0, 1])
    assert uniformity(ortho, 2.0) == pytest.approx(-4.0, abs=1e-12)
    z = np.random.default_rng(8).normal(size=(8, 5))
    emb = LabeledEmbeddings(z, np.arange(8) % 2)
    assert uniformity(emb, 2.0) == pytest.approx(naive_uniformity(unit_rows(z).tolist(), 2.0), abs=1e-10)


def test_tolerance_examples():
    same = LabeledEmbeddings(np.tile([[1.0, 2.0]], (4, 1)), [3] * 4)
    assert tolerance(same) == pytest.approx(1.0, abs=1e-12)
    distinct = LabeledEmbeddings(np.random.default_rng(1).normal(size=(5, 3)), range(5))
    assert tolerance(distinct) == 0.0
    two = LabeledEmbeddings([[1, 0], [1, 0], [0, 1], [0, 1]], [0, 0, 1, 1])
    assert tolerance(two) == pytest.approx(1 / 3, abs=1e-15)
    assert tolerance(two, "same_class") == pytest.approx(1.0, abs=1e-15)


def test_too_few_samples():
    one = LabeledEmbeddings([[1.0, 0.0]], [0])
    with pytest.raises(TooFewSamples):
        uniformity(one)
    with pytest.raises(TooFewSamples):
        tolerance(one)
    with pytest.raises(LengthMismatch):
        LabeledEmbeddings([[1.0, 0.0], [0.0, 1.0]], [0])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 64), st.integers(2, 6), st.integers(1, 5), st.integers(0, 2**31),
       st.floats(0.1, 5.0))
def test_metrics_match_naive(n, d, c, seed, t):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, d))
    labels = rng.integers(0, c, size=n)
    emb = LabeledEmbeddings(z, labels)
    zu = unit_rows(z).tolist()
    assert abs(uniformity(emb, t) - naive_uniformity(zu, t)) <= 1e-10
    assert abs(tolerance(emb) - naive_tolerance(zu, labels.tolist())) <= 1e-10
    assert abs(tolerance(emb, "same_class") - naive_tolerance(zu, labels.tolist(), True)) <= 1e-10
    assert uniformity(emb, t) <= 0
    assert -1 <= tolerance(emb) <= 1


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 30), st.integers(2, 6), st.integers(0, 2**31))
def test_uniformity_rotation_invariant(n, d, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, d))
    q = special_ortho_group.rvs(d, random_state=seed % 2**32)
    a = uniformity(LabeledEmbeddings(z, [0] * n))
    b = uniformity(LabeledEmbeddings(z @ q.T, [0] * n))
    assert abs(a - b) <= 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 30), st.integers(2, 6), st.integers(0, 2**31), st.floats(0.1, 4.0))
def test_uniformity_decreases_in_t(n, d, seed, t):
    rng = np.random.default_rng(seed)
    emb = LabeledEmbeddings(rng.normal(size=(n, d)), [0] * n)
    assert uniformity(emb, t * 1.5) < uniformity(emb, t)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 30), st.integers(2, 6), st.integers(0, 2**31))
def test_tolerance_permutation_invariant(n, d, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, d))
    labels = rng.integers(0, 3, size=n)
    p = rng.permutation(n)
    a = tolerance(LabeledEmbeddings(z, labels))
    b = tolerance(LabeledEmbeddings(z[p], labels[p]))
    assert abs(a - b) <= 1e-12


def blobs(seed, n_classes, n_per, dim, spread):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_classes, dim)) * 3
    labels = np.repeat(np.arange(n_classes), n_per)
    return centers[labels] + spread * rng.normal(size=(labels.size, dim)), labels


def test_probe_separable():
    x, y = blobs(0, 2, 50, 4, 0.1)
    xt, yt = blobs(0, 2, 20, 4, 0.1)
    acc = linear_probe(LabeledEmbeddings(x, y), LabeledEmbeddings(xt, yt), epochs=200)
    assert acc == 1.0


def test_probe_shuffled_labels_near_chance():
    x, y = blobs(1, 4, 100, 6, 0.3)
    xt, yt = blobs(2, 4, 250, 6, 0.3)
    yt = np.random.default_rng(3).permutation(yt)
    acc = linear_probe(LabeledEmbeddings(x, y), LabeledEmbeddings(xt, yt))
    assert abs(acc - 0.25) <= 0.1


def test_probe_deterministic():
    x, y = blobs(4, 4, 40, 5, 1.5)
    xt, yt = blobs(5, 4, 40, 5, 1.5)
    a = linear_probe(LabeledEmbeddings(x, y), LabeledEmbeddings(xt, yt), seed=9, return_predictions=True)
    b = linear_probe(LabeledEmbeddings(x, y), LabeledEmbeddings(xt, yt), seed=9, return_predictions=True)
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])


def test_probe_label_mismatch():
    x, y = blobs(0, 2, 10, 3, 0.1)
    with pytest.raises(LabelMismatch):
        linear_probe(LabeledEmbeddings(x, y), LabeledEmbeddings(x, y + 5))
    with pytest.raises(LabelMismatch):
        linear_probe(LabeledEmbeddings(x, y), LabeledEmbeddings(x[:, :2], y))


def test_class_wise_accuracy():
    truth = [0, 0, 1, 1, 2]
    assert class_wise_accuracy(truth, truth) == {0: 1.0, 1: 1.0, 2: 1.0, "macro": 1.0}
    const = class_wise_accuracy([1, 1, 1, 1], [0, 0, 1, 1])
    assert const == {0: 0.0, 1: 1.0, "macro": 0.5}
    # counting oracle: class 0 -> 2/3 right, class 1 -> 1/2, class 3 -> 0/1; class 2 absent
    pred = [0, 0, 1, 1, 0, 2]
    truth = [0, 0, 0, 1, 1, 3]
    out = class_wise_accuracy(pred, truth)
    assert out == {0: 2 / 3, 1: 1 / 2, 3: 0.0, "macro": pytest.approx((2 / 3 + 1 / 2 + 0) / 3)}
    with pytest.raises(LengthMismatch):
        class_wise_accuracy([0], [0, 1])


def test_metric_report_csv():
    emb = LabeledEmbeddings(np.tile([[1.0, 1.0]], (3, 1)), [0, 0, 0])
    rep = metric_report(emb, 2.0, step=4, probe_acc=0.5)
    assert isinstance(rep, MetricReport)
    text = rep.to_csv()
    header, row = text.strip().split("\n")
    assert header == "step,uniformity,tolerance,t,probe_acc"
    vals = row.split(",")
    assert vals[0] == "4" and float(vals[1]) == 0.0 and float(vals[2]) == pytest.approx(1.0)
    assert math.isclose(float(vals[4]), 0.5)
