import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn import metrics as skm

from timesiam.metrics import (
    MetricsReport,
    average_precision,
    classification_metrics,
    confusion_matrix,
    per_class_prf,
    precision_recall_f1,
    roc_auc,
)


def test_fixed_confusion_matrix():
    # TP=3 FP=1 FN=1 TN=5, positive class is 1
    y_true = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
    y_pred = [1, 1, 1, 0, 1, 0, 0, 0, 0, 0]
    cm = confusion_matrix(y_true, y_pred, 2)
    assert cm[1, 1] == 3 and cm[0, 1] == 1 and cm[1, 0] == 1 and cm[0, 0] == 5
    assert precision_recall_f1(y_true, y_pred, 2) == pytest.approx((0.75, 0.75, 0.75))


def test_all_correct():
    y = np.array([0, 1, 2, 1, 0])
    out = classification_metrics(y, np.eye(3)[y], 3)
    assert out["accuracy"] == 1.0 and out["f1"] == 1.0 and out["auroc"] == 1.0


def test_separated_binary():
    y = np.array([0, 0, 1, 1, 1])
    s = np.array([0.1, 0.2, 0.8, 0.9, 0.95])
    assert roc_auc(y, s) == 1.0
    assert average_precision(y, s) == 1.0


def test_single_class_is_absent():
    y = np.zeros(6, dtype=int)
    out = classification_metrics(y, np.random.default_rng(0).random((6, 2)), 2)
    assert out["auroc"] is None and out["auprc"] is None
    assert "auroc=absent" in MetricsReport("classify", classify=out).to_text()


def test_tie_break_lowest_index():
    out = classification_metrics([0, 1], np.ones((2, 3)), 3)
    assert out["accuracy"] == 0.5


labels_and_scores = st.integers(2, 60).flatmap(
    lambda n: st.tuples(st.lists(st.integers(0, 1), min_size=n, max_size=n),
                        st.lists(st.integers(0, 8), min_size=n, max_size=n)))


@settings(max_examples=80, deadline=None)
@given(labels_and_scores)
def test_rank_metrics_match_sklearn(data):
    y, s = map(np.array, data)
    if y.min() == y.max():
        assert roc_auc(y, s) is None
        return
    s = s / 8.0  # coarse scores force ties
    assert roc_auc(y, s) == pytest.approx(skm.roc_auc_score(y, s), abs=1e-12)
    assert average_precision(y, s) == pytest.approx(skm.average_precision_score(y, s), abs=1e-12)
    assert roc_auc(y, -s) == pytest.approx(1 - roc_auc(y, s), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 5).flatmap(lambda k: st.tuples(
    st.just(k), st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1)), min_size=1, max_size=40))))
def test_macro_prf_match_sklearn(data):
    k, pairs = data
    y, p = map(np.array, zip(*pairs))
    ours = precision_recall_f1(y, p, k)
    ref = skm.precision_recall_fscore_support(y, p, labels=list(range(k)), average="macro", zero_division=0)[:3]
    assert ours == pytest.approx(ref, abs=1e-12)
    _, _, f1 = per_class_prf(confusion_matrix(y, p, k))
    assert ours[2] == pytest.approx(f1.mean())


def test_multiclass_ovr_matches_sklearn():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, 200)
    s = rng.random((200, 3)) + np.eye(3)[y] * 0.3
    s = s / s.sum(axis=1, keepdims=True)
    out = classification_metrics(y, s, 3)
    assert out["auroc"] == pytest.approx(skm.roc_auc_score(y, s, multi_class="ovr", average="macro"), abs=1e-12)
    ap = np.mean([skm.average_precision_score(y == k, s[:, k]) for k in range(3)])
    assert out["auprc"] == pytest.approx(ap, abs=1e-12)
    assert 0 <= out["accuracy"] <= 1


def test_report_average_and_csv():
    rep = MetricsReport("forecast", forecast={96: {"mse": 0.4, "mae": 0.5}, 192: {"mse": 0.6, "mae": 0.7}})
    assert abs(rep.avg_mse - 0.5) < 1e-12
    assert rep.csv_header().split(",")[:3] == ["task", "mse_96", "mae_96"]
    assert rep.to_csv_row().startswith("forecast,0.400000,0.500000")
    assert rep.to_table().splitlines()[-1] == "Avg,0.500000,0.600000"
