"""Binary classification metrics with malignant (1) as the positive class."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def swapped(self) -> "ConfusionMatrix":
        """The same counts with non-malignant treated as the positive class."""
        return ConfusionMatrix(tp=self.tn, tn=self.tp, fp=self.fn, fn=self.fp)

    def to_csv(self) -> str:
        """2x2 table, rows = actual, columns = predicted, non-malignant first."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["actual\\predicted", "non-malignant", "malignant"])
        writer.writerow(["non-malignant", self.tn, self.fp])
        writer.writerow(["malignant", self.fn, self.tp])
        return buf.getvalue()


def _as_binary(values, what: str) -> np.ndarray:
    arr = np.asarray(values).reshape(-1)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise DataError(f"{what} must contain only 0 and 1")
    return arr.astype(np.int64)


def confusion(predictions, labels) -> ConfusionMatrix:
    pred = _as_binary(predictions, "predictions")
    true = _as_binary(labels, "labels")
    if pred.shape != true.shape:
        raise DataError(f"length mismatch: {pred.size} predictions vs {true.size} labels")
    return ConfusionMatrix(
        tp=int(np.sum((pred == 1) & (true == 1))),
        tn=int(np.sum((pred == 0) & (true == 0))),
        fp=int(np.sum((pred == 1) & (true == 0))),
        fn=int(np.sum((pred == 0) & (true == 1))),
    )


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def basic_metrics(cm: ConfusionMatrix) -> dict[str, float]:
    if cm.total < 1:
        raise DataError("metrics need at least one sample")
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    return {
        "accuracy": (cm.tp + cm.tn) / cm.total,
        "precision": precision,
        "recall": recall,
        "f1": _ratio(2 * precision * recall, precision + recall),
    }


def weighted_metrics(per_class: dict[int, dict[str, float]], supports: dict[int, int]) -> dict[str, float]:
    """Support-weighted average of per-class precision, recall and f1."""
    n = sum(supports.values())
    if any(s < 0 for s in supports.values()) or n <= 0:
        raise DataError(f"supports must be nonnegative with a positive total, got {supports}")
    return {
        key: sum(supports[c] / n * per_class[c][key] for c in sorted(supports))
        for key in ("precision", "recall", "f1")
    }


def auc_roc(probabilities, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    true = _as_binary(labels, "labels")
    if scores.shape != true.shape:
        raise DataError(f"length mismatch: {scores.size} scores vs {true.size} labels")
    n_pos = int(true.sum())
    n_neg = true.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC is undefined unless both classes are present")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[true == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    auc_roc: float | None
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    support: dict[str, int] = field(default_factory=dict)
    confusion: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


CLASS_NAMES = {0: "non-malignant", 1: "malignant"}


def evaluate_predictions(labels, predictions, probabilities=None) -> MetricsReport:
    cm = confusion(predictions, labels)
    per_class = {1: basic_metrics(cm), 0: basic_metrics(cm.swapped())}
    supports = {1: cm.tp + cm.fn, 0: cm.tn + cm.fp}
    weighted = weighted_metrics(per_class, supports)
    auc = None
    if probabilities is not None and supports[0] and supports[1]:
        auc = auc_roc(probabilities, labels)
    pos = per_class[1]
    return MetricsReport(
        accuracy=pos["accuracy"],
        precision=pos["precision"],
        recall=pos["recall"],
        f1=pos["f1"],
        weighted_precision=weighted["precision"],
        weighted_recall=weighted["recall"],
        weighted_f1=weighted["f1"],
        auc_roc=auc,
        per_class={
            CLASS_NAMES[c]: {k: per_class[c][k] for k in ("precision", "recall", "f1")} for c in (0, 1)
        },
        support={CLASS_NAMES[c]: supports[c] for c in (0, 1)},
        confusion=asdict(cm),
    )
