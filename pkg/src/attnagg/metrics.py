"""Evaluation metrics: ranking-based per-attribute AP/mAP, balanced mean
accuracy, and example-based accuracy/precision/recall/F1.

Conventions fixed here:

* AP sorts by descending score with ties broken by ascending row index, so
  reports are deterministic and golden files stay stable;
* binarized metrics predict positive when probability > threshold;
* example-based metrics on empty sets: an undefined component contributes 1
  when predicted and true sets are both empty, else 0;
* the example-based F1 combines the averaged precision and recall (it is not
  the average of per-sample F1 values);
* ``min_prior`` drops attributes whose positive rate in the evaluated labels
  is below the cutoff before label-based averaging (0 keeps everything).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class NoPositives(ValueError):
    """At least one positive example is required."""


class DegenerateAttribute(ValueError):
    """Balanced accuracy needs both positives and negatives per attribute."""


def average_precision(scores, labels) -> float:
    """Mean over positives of precision at that positive's rank."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores {s.shape} vs labels {y.shape}")
    if y.sum() == 0:
        raise NoPositives("average_precision needs at least one positive")
    order = np.lexsort((np.arange(len(s)), -s))
    ranked = y[order]
    cum = np.cumsum(ranked)
    precision_at = cum / np.arange(1, len(s) + 1)
    return float(precision_at[ranked == 1].mean())


def mean_ap(scores, labels, min_prior: float = 0.0) -> tuple[np.ndarray, float]:
    """Per-attribute AP and their unweighted mean."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape or s.ndim != 2:
        raise ValueError(f"scores {s.shape} vs labels {y.shape}")
    keep = _kept_attributes(y, min_prior)
    aps = np.full(y.shape[1], np.nan)
    for c in keep:
        if y[:, c].sum() == 0:
            raise NoPositives(f"attribute {c} has no positives")
        aps[c] = average_precision(s[:, c], y[:, c])
    return aps, float(np.nanmean(aps))


def _kept_attributes(labels: np.ndarray, min_prior: float) -> list[int]:
    rates = labels.mean(axis=0)
    keep = [c for c in range(labels.shape[1]) if rates[c] >= min_prior]
    if not keep:
        raise DegenerateAttribute("min_prior filter removed every attribute")
    return keep


def balanced_mean_accuracy(probs, labels, threshold: float = 0.5,
                           min_prior: float = 0.0) -> float:
    """Mean over attributes of (TPR + TNR) / 2."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 2:
        raise ValueError(f"probs {p.shape} vs labels {y.shape}")
    preds = p > threshold
    accs = []
    for c in _kept_attributes(y, min_prior):
        pos = y[:, c] == 1
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            raise DegenerateAttribute(
                f"attribute {c} has {n_pos} positives and {n_neg} negatives")
        tpr = preds[pos, c].sum() / n_pos
        tnr = (~preds[~pos, c]).sum() / n_neg
        accs.append((tpr + tnr) / 2.0)
    return float(np.mean(accs))


def example_based(probs, labels, threshold: float = 0.5):
    """Per-sample set-overlap metrics averaged over samples.

    Returns (accuracy, precision, recall, f1).
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 2:
        raise ValueError(f"probs {p.shape} vs labels {y.shape}")
    preds = p > threshold
    truth = y == 1
    inter = (preds & truth).sum(axis=1).astype(np.float64)
    p_size = preds.sum(axis=1).astype(np.float64)
    t_size = truth.sum(axis=1).astype(np.float64)
    union = (preds | truth).sum(axis=1).astype(np.float64)
    both_empty = (p_size == 0) & (t_size == 0)

    acc = np.where(union > 0, np.divide(inter, union, where=union > 0),
                   both_empty.astype(np.float64))
    prec = np.where(p_size > 0, np.divide(inter, p_size, where=p_size > 0),
                    both_empty.astype(np.float64))
    rec = np.where(t_size > 0, np.divide(inter, t_size, where=t_size > 0),
                   both_empty.astype(np.float64))
    acc_m, prec_m, rec_m = float(acc.mean()), float(prec.mean()), float(rec.mean())
    f1 = 2 * prec_m * rec_m / (prec_m + rec_m) if prec_m + rec_m > 0 else 0.0
    return acc_m, prec_m, rec_m, f1


@dataclass
class MetricsReport:
    ap: list[float]
    map: float
    ma: float
    ex_accuracy: float
    ex_precision: float
    ex_recall: float
    ex_f1: float
    threshold: float = 0.5

    def to_json_dict(self) -> dict:
        return {
            "ap": [round(float(v), 6) for v in self.ap],
            "map": round(float(self.map), 6),
            "ma": round(float(self.ma), 6),
            "ex_accuracy": round(float(self.ex_accuracy), 6),
            "ex_precision": round(float(self.ex_precision), 6),
            "ex_recall": round(float(self.ex_recall), 6),
            "ex_f1": round(float(self.ex_f1), 6),
            "threshold": float(self.threshold),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=1)


def compute_report(probs, labels, threshold: float = 0.5,
                   min_prior: float = 0.0) -> MetricsReport:
    """Full report: ranking metrics on raw probabilities plus binarized
    label- and example-based metrics at the threshold."""
    aps, m = mean_ap(probs, labels, min_prior=min_prior)
    ma = balanced_mean_accuracy(probs, labels, threshold, min_prior=min_prior)
    acc, prec, rec, f1 = example_based(probs, labels, threshold)
    return MetricsReport(ap=[float(v) for v in aps], map=m, ma=ma,
                         ex_accuracy=acc, ex_precision=prec, ex_recall=rec,
                         ex_f1=f1, threshold=threshold)
