import json
from fractions import Fraction

import numpy as np
import pytest

import metric_oracle as oracle
from vinecam.metrics import (
    REPORT_KEYS,
    ConfusionMatrix,
    accuracy,
    average_precision,
    averaged_scores,
    build_report,
    cohen_kappa,
    confusion_matrix,
    mcc_multiclass,
    per_class_prf,
    pr_auc_macro,
    pr_curve,
    specificity_macro,
    specificity_per_class,
)

REF_DIAG = (14, 142, 187, 56)
REF_ROWS = (15, 146, 188, 61)


def random_case(rng, k=None):
    k = k or int(rng.integers(2, 7))
    n = int(rng.integers(k, 60))
    true = rng.integers(0, k, n)
    probs = rng.dirichlet(np.ones(k), n)
    if rng.random() < 0.3:
        probs = np.round(probs, 1)  # plenty of ties
    pred = probs.argmax(axis=1) if rng.random() < 0.7 else rng.integers(0, k, n)
    return k, true, pred, probs


# -- confusion / accuracy ---------------------------------------------------------

def test_confusion_examples():
    assert np.array_equal(confusion_matrix([0, 1, 2], [0, 1, 2], 3).counts, np.eye(3))
    assert confusion_matrix([0, 0, 1, 1, 1], [0, 1, 1, 1, 0], 2).counts.tolist() == [[1, 1], [1, 2]]
    with pytest.raises(ValueError):
        confusion_matrix([0, 1], [0], 2)
    with pytest.raises(ValueError):
        confusion_matrix([0, 2], [0, 1], 2)


def test_accuracy_examples():
    assert accuracy(np.eye(4, dtype=int) * 3) == 1.0
    assert accuracy([[1, 1], [1, 2]]) == 0.6
    with pytest.raises(ValueError):
        accuracy(np.zeros((2, 2), dtype=int))


def test_reference_confusion_accuracy_is_exact_rational():
    cm = np.zeros((4, 4), dtype=int)
    for i, (d, r) in enumerate(zip(REF_DIAG, REF_ROWS)):
        cm[i, i] = d
        cm[i, (i + 1) % 4] = r - d
    assert Fraction(accuracy(cm)).limit_denominator(1000) == Fraction(399, 410)
    assert accuracy(cm) == 399 / 410
    assert round(accuracy(cm), 5) == 0.97317


# -- per-class scores ---------------------------------------------------------------

def test_prf_examples():
    out = per_class_prf(np.eye(3, dtype=int))
    assert out["precision_avg"] == out["recall_avg"] == out["f1_avg"] == 1.0
    out = per_class_prf([[2, 1], [1, 2]])
    assert np.allclose(out["precision"], 2 / 3) and out["f1_avg"] == pytest.approx(2 / 3)
    out = per_class_prf([[2, 0], [3, 0]])
    assert out["precision"][1] == 0 and out["precision_undefined"].tolist() == [False, True]


def test_mcc_examples():
    assert mcc_multiclass([[5, 0], [0, 5]]) == 1.0
    assert mcc_multiclass([[2, 1], [1, 2]]) == pytest.approx(1 / 3, abs=1e-15)
    assert mcc_multiclass([[3, 0], [4, 0]]) == 0.0
    # binary TP/TN/FP/FN formula cross-check
    tp, fn, fp, tn = 7, 2, 3, 5
    binary = (tp * tn - fp * fn) / np.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    assert mcc_multiclass([[tn, fp], [fn, tp]]) == pytest.approx(binary, abs=1e-15)


def test_kappa_examples():
    assert cohen_kappa(np.eye(3, dtype=int)) == 1.0
    assert cohen_kappa([[2, 1], [1, 2]]) == pytest.approx(1 / 3, abs=1e-15)
    assert cohen_kappa([[1, 1], [1, 1]]) == 0.0
    assert cohen_kappa([[4, 0], [0, 0]]) == 0.0


def test_specificity_examples():
    assert specificity_macro(np.eye(3, dtype=int)) == 1.0
    assert specificity_macro([[2, 1], [1, 2]]) == pytest.approx(2 / 3)
    spec, undefined = specificity_per_class([[6]])
    assert spec.tolist() == [0.0] and undefined.tolist() == [True]


# -- average precision --------------------------------------------------------------

def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.1, 0.05], [1, 1, 0, 0]) == 1.0
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-15)
    for n in (1, 2, 5, 13):
        assert average_precision(np.linspace(1, 0, n), [0] * (n - 1) + [1]) == pytest.approx(1 / n)
    with pytest.raises(ValueError):
        average_precision([0.3, 0.2], [0, 0])


def test_ap_ties_follow_input_order():
    # all scores tied: the stable ranking is the input order
    assert average_precision([0.5] * 4, [1, 0, 1, 0]) == pytest.approx((1 + 2 / 3) / 2)
    assert average_precision([0.5] * 4, [0, 1, 0, 1]) == pytest.approx((1 / 2 + 1 / 2) / 2)


def test_uniform_probs_ap_depends_on_order_not_prevalence():
    true = np.array([0, 1, 0, 1])
    probs = np.full((4, 2), 0.5)
    got = pr_auc_macro(probs, true)
    assert got == pytest.approx(float(oracle.pr_auc_macro(probs.tolist(), true.tolist(), 2)), abs=1e-15)
    assert got != 0.5


def test_ap_monotone_invariance():
    rng = np.random.default_rng(3)
    for _ in range(50):
        s = rng.random(20)
        y = rng.integers(0, 2, 20)
        y[0] = 1
        base = average_precision(s, y)
        assert average_precision(np.exp(3 * s) - 7, y) == pytest.approx(base, abs=1e-15)


def test_pr_curve_recall_non_decreasing():
    c = pr_curve([0.2, 0.9, 0.4, 0.9, 0.1], [1, 0, 1, 1, 0])
    assert np.all(np.diff(c.recall) >= 0) and c.recall[-1] == 1.0


def test_pr_auc_macro_examples():
    true = np.array([0, 1, 2, 1])
    assert pr_auc_macro(np.eye(3)[true], true) == 1.0
    probs = np.eye(4)[true]
    # class 3 never occurs and is left out of the mean
    assert pr_auc_macro(probs, true) == 1.0
    with pytest.raises(ValueError):
        pr_auc_macro(np.zeros((0, 2)), np.zeros(0, dtype=int))


def test_pr_auc_two_class_symmetric_case():
    rng = np.random.default_rng(8)
    p1 = rng.random(5)
    probs = np.stack([1 - p1, p1], axis=1)
    true = np.array([0, 1, 1, 0, 1])
    expected = (average_precision(p1, true == 1) + average_precision(1 - p1, true == 0)) / 2
    assert pr_auc_macro(probs, true) == pytest.approx(expected, abs=1e-15)


# -- oracle agreement ---------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_against_per_definition_oracle(seed):
    rng = np.random.default_rng(seed)
    k, true, pred, probs = random_case(rng)
    t, p = true.tolist(), pred.tolist()
    cm = confusion_matrix(true, pred, k)
    prf = per_class_prf(cm)
    assert abs(accuracy(cm) - float(oracle.accuracy(t, p))) <= 1e-12
    assert abs(prf["precision_avg"] - float(oracle.macro(oracle.precision, t, p, k))) <= 1e-12
    assert abs(prf["recall_avg"] - float(oracle.macro(oracle.recall, t, p, k))) <= 1e-12
    assert abs(prf["f1_avg"] - float(oracle.macro(oracle.f1, t, p, k))) <= 1e-12
    assert abs(mcc_multiclass(cm) - oracle.mcc(t, p, k)) <= 1e-12
    assert abs(cohen_kappa(cm) - float(oracle.kappa(t, p, k))) <= 1e-12
    assert abs(specificity_macro(cm) - float(oracle.macro(oracle.specificity, t, p, k))) <= 1e-12
    assert abs(pr_auc_macro(probs, true) - float(oracle.pr_auc_macro(probs.tolist(), t, k))) <= 1e-12


def test_class_permutation_invariance():
    rng = np.random.default_rng(42)
    for _ in range(30):
        k, true, pred, probs = random_case(rng)
        probs = probs + rng.random(probs.shape) * 1e-6  # no ties, so ranking is label-order free
        perm = rng.permutation(k)
        a = build_report(confusion_matrix(true, pred, k), probs, true)
        inv = np.argsort(perm)
        b = build_report(confusion_matrix(perm[true], perm[pred], k), probs[:, inv], perm[true])
        for key in REPORT_KEYS[:8]:
            assert a[key] == pytest.approx(b[key], abs=1e-12)
        for i in range(k):
            assert a["per_class"][str(i)]["f1"] == pytest.approx(b["per_class"][str(perm[i])]["f1"], abs=1e-12)


def test_ranges_on_random_cases():
    rng = np.random.default_rng(7)
    for _ in range(100):
        k, true, pred, probs = random_case(rng)
        rep = build_report(confusion_matrix(true, pred, k), probs, true)
        assert -1 <= rep["mcc"] <= 1 and -1 <= rep["kappa"] <= 1
        for key in ("accuracy", "recall_macro", "precision_macro", "f1_macro", "specificity_macro", "pr_auc_macro"):
            assert 0 <= rep[key] <= 1
        assert rep["accuracy"] == pytest.approx(per_class_prf(confusion_matrix(true, pred, k), "micro")["recall_avg"])


# -- report ---------------------------------------------------------------------------

def test_report_schema_and_perfect_scores():
    true = np.array([0, 1, 2, 3, 0, 1])
    cm = confusion_matrix(true, true, 4, ("a", "b", "c", "d"))
    rep = build_report(cm, np.eye(4)[true], true)
    assert set(rep) == set(REPORT_KEYS)
    for key in REPORT_KEYS[:8]:
        assert rep[key] == 1.0
    assert rep["per_class"]["a"]["support"] == 2 and rep["per_class"]["a"]["flags"] == []
    assert rep["confusion"]["classes"] == ["a", "b", "c", "d"]
    json.dumps(rep)


def test_report_flags_undefined():
    true = np.array([0, 0, 1, 1])
    pred = np.array([0, 0, 0, 0])
    rep = build_report(confusion_matrix(true, pred, 3), np.eye(3)[pred], true)
    assert "precision_undefined" in rep["per_class"]["1"]["flags"]
    assert "no_positives_for_ap" in rep["per_class"]["2"]["flags"]
    assert rep["per_class"]["2"]["average_precision"] is None


def test_alternative_averages():
    true = np.array([0, 0, 0, 1, 2, 2])
    pred = np.array([0, 0, 1, 1, 2, 0])
    probs = np.eye(3)[pred] * 0.8 + 0.2 / 3
    cm = confusion_matrix(true, pred, 3)
    micro = averaged_scores(cm, probs, true, "micro")
    assert micro["precision"] == micro["recall"] == pytest.approx(accuracy(cm))
    weighted = averaged_scores(cm, probs, true, "weighted")
    rec = per_class_prf(cm)["recall"]
    assert weighted["recall"] == pytest.approx((rec * [3, 1, 2]).sum() / 6)
    with pytest.raises(ValueError):
        averaged_scores(cm, probs, true, "harmonic")


def test_confusion_csv(tmp_path):
    cm = ConfusionMatrix(np.array([[1, 2], [3, 4]]), ("x", "y"))
    cm.to_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text() == "true\\pred,x,y\nx,1,2\ny,3,4\n"
