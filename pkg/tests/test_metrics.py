import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn import metrics as skm

from pathcase.metrics import (
    MetricWarning, balanced_accuracy, compute_metrics, prior_baseline_f1, roc_auc,
    weighted_f1, weighted_roc_auc,
)


def test_hand_examples():
    assert abs(weighted_f1([0, 0, 1], [0, 1, 1]) - 2 / 3) <= 1e-12
    assert abs(roc_auc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8]) - 0.75) <= 1e-12
    perfect = compute_metrics([0, 1, 2, 1], [0, 1, 2, 1], np.eye(3)[[0, 1, 2, 1]])
    assert all(abs(v - 1.0) <= 1e-12 for v in perfect.values())


def brute_auc(y, s):
    pos = [v for v, t in zip(s, y) if t]
    neg = [v for v, t in zip(s, y) if not t]
    pairs = [(p > n) + 0.5 * (p == n) for p, n in itertools.product(pos, neg)]
    return sum(pairs) / len(pairs)


@settings(max_examples=200)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 6)), min_size=2, max_size=30))
def test_auc_matches_pair_enumeration(data):
    y = [a for a, _ in data]
    s = [float(b) for _, b in data]
    if all(y) or not any(y):
        assert np.isnan(roc_auc(y, s))
        return
    assert roc_auc(y, s) == pytest.approx(brute_auc(y, s), abs=1e-12)


def labels_and_proba(seed, n=40, k=3):
    r = np.random.default_rng(seed)
    y = r.integers(0, k, n)
    y[:k] = np.arange(k)
    proba = r.dirichlet(np.ones(k), n)
    return y, proba


@pytest.mark.parametrize("seed", range(10))
def test_against_sklearn(seed):
    y, proba = labels_and_proba(seed)
    pred = proba.argmax(1)
    assert weighted_f1(y, pred) == pytest.approx(
        skm.f1_score(y, pred, average="weighted"), abs=1e-12)
    assert balanced_accuracy(y, pred) == pytest.approx(
        skm.balanced_accuracy_score(y, pred), abs=1e-12)
    assert weighted_roc_auc(y, proba) == pytest.approx(
        skm.roc_auc_score(y, proba, multi_class="ovr", average="weighted"), abs=1e-12)
    yb = (y == 1).astype(int)
    pb = np.stack([1 - proba[:, 1], proba[:, 1]], 1)
    assert weighted_roc_auc(yb, pb) == pytest.approx(skm.roc_auc_score(yb, proba[:, 1]),
                                                     abs=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 2**31))
def test_auc_invariant_under_monotone_transform(seed):
    y, proba = labels_and_proba(seed)
    a = weighted_roc_auc(y, proba)
    assert weighted_roc_auc(y, np.exp(3 * proba) - 7) == a


@settings(max_examples=50)
@given(st.integers(0, 2**31))
def test_f1_invariant_under_relabeling(seed):
    y, proba = labels_and_proba(seed)
    pred = proba.argmax(1)
    perm = np.random.default_rng(seed).permutation(3)
    assert weighted_f1(perm[y], perm[pred]) == pytest.approx(weighted_f1(y, pred), abs=1e-15)


def test_balanced_accuracy_equals_accuracy_on_balanced_sets():
    r = np.random.default_rng(0)
    y = np.repeat(np.arange(4), 10)
    pred = r.integers(0, 4, 40)
    assert balanced_accuracy(y, pred) == pytest.approx(np.mean(y == pred), abs=1e-15)


def test_absent_class_excluded_with_warning():
    y = [0, 0, 1, 1]
    proba = np.array([[0.8, 0.1, 0.1], [0.3, 0.6, 0.1], [0.2, 0.7, 0.1], [0.1, 0.2, 0.7]])
    with pytest.warns(MetricWarning, match="2"):
        m = compute_metrics(y, proba.argmax(1), proba, 3)
    # predictions (0, 1, 1, 2): recall 1/2 for both present classes
    assert m["balanced_accuracy"] == pytest.approx(0.5)
    # class 2 never appears in y so it contributes no support weight
    assert m["weighted_f1"] == pytest.approx(0.5 * (2 / 3) + 0.5 * 0.5)


def test_metrics_in_unit_interval():
    for seed in range(20):
        y, proba = labels_and_proba(seed, n=15)
        m = compute_metrics(y, proba.argmax(1), proba)
        assert all(0.0 <= v <= 1.0 for v in m.values())


def test_prior_baseline():
    assert prior_baseline_f1([0, 1] * 5) == pytest.approx(0.5)
    # 80/20: always-majority gives 0.8 * (2*0.8/1.8)
    assert prior_baseline_f1([0] * 8 + [1] * 2) == pytest.approx(0.8 * 1.6 / 1.8)
    assert prior_baseline_f1([0, 1, 2] * 4) == pytest.approx(1 / 3)
