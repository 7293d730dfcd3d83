"""Confusion-matrix metrics, average precision and the metrics report.

Conventions: precision/recall/specificity with a zero denominator are 0 and
flagged in the per-class entry; MCC and kappa with a zero denominator are 0.
Average precision is the step-wise sum over scores sorted descending with a
stable sort, so tied scores keep their input order.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

REPORT_KEYS = ("accuracy", "recall_macro", "precision_macro", "f1_macro", "mcc", "kappa",
               "specificity_macro", "pr_auc_macro", "per_class", "confusion")
AVERAGES = ("macro", "micro", "weighted")


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray
    classes: tuple[str, ...] = ()

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {c.shape}")
        if np.any(c < 0):
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", c.astype(np.int64))
        if not self.classes:
            object.__setattr__(self, "classes", tuple(str(i) for i in range(c.shape[0])))

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred", *self.classes])
            for name, row in zip(self.classes, self.counts):
                w.writerow([name, *row.tolist()])


def _cm(cm) -> np.ndarray:
    return cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm, dtype=np.int64)


def confusion_matrix(true: Sequence[int], pred: Sequence[int], k: int, classes=()) -> ConfusionMatrix:
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape:
        raise ValueError(f"true and pred lengths differ: {true.shape} vs {pred.shape}")
    if true.size and (true.min() < 0 or pred.min() < 0 or true.max() >= k or pred.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts, tuple(classes))


def accuracy(cm) -> float:
    c = _cm(cm)
    total = c.sum()
    if total == 0:
        raise ValueError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(c) / total)


def _safe_div(num: np.ndarray, den: np.ndarray):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    undefined = den == 0
    out = np.divide(num, den, out=np.zeros_like(num), where=~undefined)
    return out, undefined


def _one_vs_rest(c: np.ndarray):
    tp = np.diag(c).astype(np.float64)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    tn = c.sum() - tp - fp - fn
    return tp, fp, fn, tn


def _average(per_class: np.ndarray, support: np.ndarray, average: str) -> float:
    if average == "macro":
        return float(per_class.mean())
    if average == "weighted":
        s = support.sum()
        return float((per_class * support).sum() / s) if s else 0.0
    raise ValueError(f"unknown average {average!r}")


def per_class_prf(cm, average: str = "macro") -> dict:
    """Per-class precision, recall, F1 (0/0 -> 0) and their average.

    ``micro`` pools TP/FP/FN over classes before dividing.
    """
    c = _cm(cm)
    tp, fp, fn, _ = _one_vs_rest(c)
    precision, p_undef = _safe_div(tp, tp + fp)
    recall, r_undef = _safe_div(tp, tp + fn)
    f1, _ = _safe_div(2 * precision * recall, precision + recall)
    support = c.sum(axis=1).astype(np.float64)
    if average == "micro":
        mp, _ = _safe_div(tp.sum(), tp.sum() + fp.sum())
        mr, _ = _safe_div(tp.sum(), tp.sum() + fn.sum())
        mf, _ = _safe_div(2 * mp * mr, mp + mr)
        avg = (float(mp), float(mr), float(mf))
    else:
        avg = tuple(_average(v, support, average) for v in (precision, recall, f1))
    return {
        "precision": precision, "recall": recall, "f1": f1,
        "precision_undefined": p_undef, "recall_undefined": r_undef,
        "precision_avg": avg[0], "recall_avg": avg[1], "f1_avg": avg[2],
    }


def specificity_per_class(cm):
    tp, fp, fn, tn = _one_vs_rest(_cm(cm))
    return _safe_div(tn, tn + fp)


def specificity_macro(cm, average: str = "macro") -> float:
    c = _cm(cm)
    spec, _ = specificity_per_class(c)
    if average == "micro":
        _, fp, _, tn = _one_vs_rest(c)
        val, _ = _safe_div(tn.sum(), tn.sum() + fp.sum())
        return float(val)
    return _average(spec, c.sum(axis=1).astype(np.float64), average)


def mcc_multiclass(cm) -> float:
    """Multiclass Matthews correlation in the Gorodkin form."""
    c = _cm(cm).astype(np.float64)
    s = c.sum()
    correct = np.trace(c)
    t = c.sum(axis=1)
    p = c.sum(axis=0)
    den = math.sqrt((s * s - p @ p) * (s * s - t @ t))
    if den == 0:
        return 0.0
    return float((correct * s - p @ t) / den)


def cohen_kappa(cm) -> float:
    c = _cm(cm).astype(np.float64)
    s = c.sum()
    if s == 0:
        return 0.0
    p_o = np.trace(c) / s
    p_e = float(c.sum(axis=1) @ c.sum(axis=0)) / (s * s)
    if p_e == 1:
        return 0.0
    return float((p_o - p_e) / (1 - p_e))


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    recall = tp / n_pos
    delta = np.diff(np.concatenate([[0.0], recall]))
    return float((delta * precision).sum())


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "recall", "precision"])
            for t, r, p in zip(self.thresholds, self.recall, self.precision):
                w.writerow([repr(float(t)), repr(float(r)), repr(float(p))])


def pr_curve(scores: Sequence[float], labels: Sequence[int]) -> PRCurve:
    """One point per ranked sample, in the same order average_precision walks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = max(int(labels.sum()), 1)
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(labels[order])
    return PRCurve(tp / n_pos, tp / np.arange(1, len(order) + 1), scores[order])


def pr_auc_per_class(probs: np.ndarray, true: Sequence[int]):
    """One-vs-rest AP per class; NaN where a class has no positives."""
    probs = np.asarray(probs, dtype=np.float64)
    true = np.asarray(true, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != true.shape[0]:
        raise ValueError(f"probs {probs.shape} do not match {true.shape[0]} labels")
    out = np.full(probs.shape[1], np.nan)
    for k in range(probs.shape[1]):
        if np.any(true == k):
            out[k] = average_precision(probs[:, k], true == k)
    return out


def pr_auc_macro(probs: np.ndarray, true: Sequence[int], average: str = "macro") -> float:
    """Mean one-vs-rest AP over classes that have positives."""
    aps = pr_auc_per_class(probs, true)
    present = ~np.isnan(aps)
    if not present.any():
        raise ValueError("no class has positive samples")
    if average == "micro":
        true = np.asarray(true)
        onehot = np.zeros_like(np.asarray(probs, dtype=np.float64))
        onehot[np.arange(len(true)), true] = 1
        return average_precision(np.asarray(probs).ravel(), onehot.ravel())
    support = np.bincount(np.asarray(true), minlength=len(aps)).astype(np.float64)
    return _average(aps[present], support[present], average)


def build_report(cm, probs: np.ndarray, true: Sequence[int]) -> dict:
    """All scores in the fixed report schema (macro averages)."""
    if not isinstance(cm, ConfusionMatrix):
        cm = ConfusionMatrix(np.asarray(cm))
    c = cm.counts
    prf = per_class_prf(c)
    spec, spec_undef = specificity_per_class(c)
    aps = pr_auc_per_class(probs, true)
    per_class = {}
    for i, name in enumerate(cm.classes):
        flags = []
        if prf["precision_undefined"][i]:
            flags.append("precision_undefined")
        if prf["recall_undefined"][i]:
            flags.append("recall_undefined")
        if spec_undef[i]:
            flags.append("specificity_undefined")
        if np.isnan(aps[i]):
            flags.append("no_positives_for_ap")
        per_class[name] = {
            "precision": float(prf["precision"][i]),
            "recall": float(prf["recall"][i]),
            "f1": float(prf["f1"][i]),
            "specificity": float(spec[i]),
            "average_precision": None if np.isnan(aps[i]) else float(aps[i]),
            "support": int(c[i].sum()),
            "flags": flags,
        }
    return {
        "accuracy": accuracy(c),
        "recall_macro": prf["recall_avg"],
        "precision_macro": prf["precision_avg"],
        "f1_macro": prf["f1_avg"],
        "mcc": mcc_multiclass(c),
        "kappa": cohen_kappa(c),
        "specificity_macro": specificity_macro(c),
        "pr_auc_macro": pr_auc_macro(probs, true),
        "per_class": per_class,
        "confusion": {"classes": list(cm.classes), "matrix": c.tolist()},
    }


def averaged_scores(cm, probs, true, average: str) -> dict:
    """P/R/F1/specificity/PR-AUC under an alternative averaging convention."""
    if average not in AVERAGES:
        raise ValueError(f"average must be one of {AVERAGES}")
    c = _cm(cm)
    prf = per_class_prf(c, average)
    return {
        "average": average,
        "precision": prf["precision_avg"],
        "recall": prf["recall_avg"],
        "f1": prf["f1_avg"],
        "specificity": specificity_macro(c, average),
        "pr_auc": pr_auc_macro(probs, true, average),
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True) + "\n"
