"""Evaluation: close-set / open-set accuracy, OOD AUC, confusion, diagnostics."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .diffcore import Network, softmax


class UndefinedMetricError(ValueError):
    pass


def _predict(model: Network, x: np.ndarray):
    """(main logits, close-set logits) for ``x``; a second head, if present, supplies close-set logits."""
    out = model.forward(x)
    if isinstance(out, tuple):
        return out
    return out, out


def close_set_accuracy(model: Network, test: Dataset, K: int | None = None) -> float:
    """Accuracy on ID test samples, argmax over the first ``K`` logits."""
    K = test.num_classes if K is None else K
    sel = test.labels < K
    if not sel.any():
        raise UndefinedMetricError("no ID samples in test set")
    _, logits = _predict(model, test.features[sel])
    return float(np.mean(np.argmax(logits[:, :K], axis=1) == test.labels[sel]))


def open_set_accuracy(model: Network, test: Dataset) -> float:
    """Accuracy over all test samples with OOD truth ``K``; a K-way head never predicts ``K``."""
    if len(test) == 0:
        raise UndefinedMetricError("empty test set")
    logits, _ = _predict(model, test.features)
    return float(np.mean(np.argmax(logits, axis=1) == test.labels))


def ood_scores(model: Network, x: np.ndarray, K: int) -> np.ndarray:
    """Probability of the OOD column; for a K-way head, ``1 - max softmax``."""
    logits, _ = _predict(model, x)
    p = softmax(logits)
    if p.shape[1] > K:
        return p[:, K]
    return 1.0 - p.max(axis=1)


def auc_ood(scores, is_ood) -> float:
    """P(random OOD score > random ID score), ties counted 1/2. O(n log n) via mid-ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    is_ood = np.asarray(is_ood, dtype=bool)
    n_pos = int(is_ood.sum())
    n_neg = len(is_ood) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one ID and one OOD sample")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    # mid-rank for each run of tied scores (1-based)
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], len(scores)]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0
    u = ranks[is_ood].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pairwise(scores, is_ood) -> float:
    """Brute-force O(n^2) reference for :func:`auc_ood`."""
    scores = np.asarray(scores, dtype=np.float64)
    is_ood = np.asarray(is_ood, dtype=bool)
    pos, neg = scores[is_ood], scores[~is_ood]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("AUC needs at least one ID and one OOD sample")
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def confusion_matrix(truth, pred, n_classes: int) -> np.ndarray:
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(truth), np.asarray(pred)), 1)
    return m


@dataclass
class MetricsReport:
    close_acc: float
    open_acc: float
    auc: float
    confusion: np.ndarray = field(repr=False)
    queue_purity: float | None = None
    pseudo_correct: int | None = None
    pseudo_wrong: int | None = None

    CSV_FIELDS = ("close_acc", "open_acc", "auc", "queue_purity", "pseudo_correct", "pseudo_wrong")

    def row(self) -> dict:
        d = asdict(self)
        d.pop("confusion")
        return d

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=self.CSV_FIELDS)
            w.writeheader()
            w.writerow({k: "" if v is None else v for k, v in self.row().items()})

    def write_confusion_csv(self, path) -> None:
        n = self.confusion.shape[0]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["truth\\pred"] + [str(i) for i in range(n)])
            for i, r in enumerate(self.confusion):
                w.writerow([i] + r.tolist())


def evaluate(model: Network, test: Dataset, queue_purity=None, pseudo_correct=None,
             pseudo_wrong=None) -> MetricsReport:
    """All test metrics for one parameter snapshot. Does not touch parameters."""
    K = test.num_classes
    logits, close_logits = _predict(model, test.features)
    ids = test.labels < K
    if not ids.any():
        raise UndefinedMetricError("no ID samples in test set")
    close_acc = float(np.mean(np.argmax(close_logits[ids, :K], axis=1) == test.labels[ids]))
    pred = np.argmax(logits, axis=1)
    open_acc = float(np.mean(pred == test.labels))
    p = softmax(logits)
    scores = p[:, K] if p.shape[1] > K else 1.0 - p.max(axis=1)
    auc = auc_ood(scores, test.is_ood) if test.is_ood.any() else float("nan")
    conf = confusion_matrix(test.labels, pred, K + 1)
    return MetricsReport(close_acc, open_acc, auc, conf, queue_purity, pseudo_correct, pseudo_wrong)


def diagnostics(queue, pseudo_labels, accept, truth, ood_label: int):
    """Queue purity (``None`` when empty) and correct/wrong counts over accepted pseudo-labels."""
    purity = queue.purity(ood_label) if queue is not None else None
    accept = np.asarray(accept, dtype=bool)
    hit = accept & (np.asarray(pseudo_labels) == np.asarray(truth))
    correct = int(hit.sum())
    return purity, correct, int(accept.sum()) - correct
