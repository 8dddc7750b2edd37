"""Weighted precision/recall/F1, confusion matrices, majority baseline, embedding export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .manifest import N_CLASSES, RankSection


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are true classes, columns are predicted classes."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError("confusion counts must be a square matrix")
        if (counts < 0).any():
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def _label(x) -> int:
    return int(RankSection.parse(x)) if isinstance(x, str) else int(x)


def confusion(predictions, n_classes: int = N_CLASSES) -> ConfusionMatrix:
    """Build a confusion matrix from (true, predicted) pairs."""
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    n = 0
    for true, pred in predictions:
        counts[_label(true), _label(pred)] += 1
        n += 1
    if n == 0:
        raise ValueError("confusion() needs at least one prediction")
    return ConfusionMatrix(counts)


def confusion_from_labels(y_true, y_pred, n_classes: int = N_CLASSES) -> ConfusionMatrix:
    return confusion(zip(np.asarray(y_true).tolist(), np.asarray(y_pred).tolist()), n_classes)


@dataclass(frozen=True)
class MetricsReport:
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    support: tuple[int, ...]
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    confusion: ConfusionMatrix
    zero_division: float = 0.0

    def to_json(self) -> dict:
        return {
            "weighted_precision": self.weighted_precision,
            "weighted_recall": self.weighted_recall,
            "weighted_f1": self.weighted_f1,
            "per_class": {
                r.name: {
                    "precision": self.precision[i],
                    "recall": self.recall[i],
                    "f1": self.f1[i],
                    "support": self.support[i],
                }
                for i, r in enumerate(RankSection)
                if i < len(self.support)
            },
            "confusion": self.confusion.counts.tolist(),
            "zero_division": self.zero_division,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def weighted_prf(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class and support-weighted precision, recall and F1.

    Undefined ratios (empty prediction column, empty true row) count as 0.
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(counts)
    support = counts.sum(axis=1)
    precision = _safe_div(diag, counts.sum(axis=0))
    recall = _safe_div(diag, support)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    weights = support / total
    return MetricsReport(
        precision=tuple(float(v) for v in precision),
        recall=tuple(float(v) for v in recall),
        f1=tuple(float(v) for v in f1),
        support=tuple(int(v) for v in support),
        weighted_precision=float(weights @ precision),
        weighted_recall=float(weights @ recall),
        weighted_f1=float(weights @ f1),
        confusion=cm,
    )


def evaluate(y_true, y_pred) -> MetricsReport:
    return weighted_prf(confusion_from_labels(y_true, y_pred))


def majority_class(train_ranks) -> int:
    labels = [_label(r) for r in train_ranks]
    if not labels:
        raise ValueError("majority baseline needs a non-empty training set")
    counts = np.bincount(labels, minlength=N_CLASSES)
    return int(np.argmax(counts))  # argmax picks the lowest index on ties


def majority_baseline(train_ranks, eval_ranks) -> MetricsReport:
    guess = majority_class(train_ranks)
    eval_labels = [_label(r) for r in eval_ranks]
    return weighted_prf(confusion((t, guess) for t in eval_labels))


def save_confusion_csv(cm: ConfusionMatrix, path) -> None:
    names = [r.name for r in RankSection][: cm.counts.shape[0]]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["true\\pred", *names])
        for name, row in zip(names, cm.counts.tolist()):
            writer.writerow([name, *row])


def export_embeddings(estimator, X, path, *, labels, user_ids, sample_ids) -> np.ndarray:
    """Write one fused-embedding row per sample, with rank label and user id, as CSV."""
    emb = np.asarray(estimator.transform(X), dtype=np.float64)
    if emb.shape[0] != len(sample_ids):
        raise ValueError("one embedding row per sample expected")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "user_id", "rank", *[f"e{i}" for i in range(emb.shape[1])]])
        for sid, uid, lab, row in zip(sample_ids, user_ids, labels, emb):
            writer.writerow([sid, uid, RankSection(_label(lab)).name, *[repr(float(v)) for v in row]])
    return emb


def load_embeddings(path) -> tuple[np.ndarray, list[str], list[str], list[str]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    emb = np.array([[float(v) for v in r[3:]] for r in rows])
    return emb, [r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows]


def pca_project(embeddings, dims: int = 2) -> np.ndarray:
    """Project mean-centered rows onto the top principal components.

    Sign convention: each component's largest-magnitude loading is positive.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < dims:
        raise ValueError(f"need at least {dims} samples for a {dims}-D projection")
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:dims]
    if components.shape[0] < dims:
        components = np.vstack([components, np.zeros((dims - components.shape[0], x.shape[1]))])
    for comp in components:
        k = np.argmax(np.abs(comp))
        if comp[k] < 0:
            comp *= -1
    return centered @ components.T
