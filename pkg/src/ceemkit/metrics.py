"""Classification metrics for imbalanced multi-class problems, plus k-fold CV."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import StratificationError
from .rng import Rng, derive_seed

METRIC_KEYS = ("precision", "recall", "f1")
FOLD_KEYS = ("accuracy", "precision", "recall", "f1", "auc")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [K, K]; rows = true class, columns = predicted class
    class_names: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + list(self.class_names))
        for name, row in zip(self.class_names, self.counts):
            w.writerow([name] + [int(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ConfusionMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        names = rows[0][1:]
        return cls(np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64), names)


def confusion(y_true, y_pred, K: int, class_names: Sequence[str] | None = None) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"{len(y_true)} true labels but {len(y_pred)} predictions")
    for name, arr in (("true", y_true), ("predicted", y_pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= K):
            raise ValueError(f"{name} label outside [0, {K})")
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    names = list(class_names) if class_names is not None else [str(k) for k in range(K)]
    return ConfusionMatrix(counts, names)


@dataclass
class ClassReport:
    class_names: list[str]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    accuracy: float
    macro: dict[str, float]
    weighted: dict[str, float]
    # classes whose precision (never predicted) or recall (no support) had a zero denominator
    zero_division: dict[str, list[str]] = field(default_factory=lambda: {"precision": [], "recall": []})

    def to_dict(self) -> dict:
        return {
            "classes": [
                {"name": n, "precision": p, "recall": r, "f1": f, "support": s}
                for n, p, r, f, s in zip(self.class_names, self.precision, self.recall, self.f1, self.support)
            ],
            "accuracy": self.accuracy,
            "macro_avg": dict(self.macro),
            "weighted_avg": dict(self.weighted),
            "zero_division": {k: list(v) for k, v in self.zero_division.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassReport":
        rows = d["classes"]
        return cls([r["name"] for r in rows], [r["precision"] for r in rows], [r["recall"] for r in rows],
                   [r["f1"] for r in rows], [int(r["support"]) for r in rows], d["accuracy"],
                   dict(d["macro_avg"]), dict(d["weighted_avg"]),
                   {k: list(v) for k, v in d["zero_division"].items()})

    def to_text(self, digits: int = 3) -> str:
        w = max(12, max(len(n) for n in self.class_names) + 2)
        lines = [f"{'':<{w}}{'precision':>10}{'recall':>10}{'f1-score':>10}{'support':>10}"]
        for n, p, r, f, s in zip(self.class_names, self.precision, self.recall, self.f1, self.support):
            lines.append(f"{n:<{w}}{p:>10.{digits}f}{r:>10.{digits}f}{f:>10.{digits}f}{s:>10d}")
        total = sum(self.support)
        lines.append(f"{'accuracy':<{w}}{'':>20}{self.accuracy:>10.{digits}f}{total:>10d}")
        for label, agg in (("macro avg", self.macro), ("weighted avg", self.weighted)):
            lines.append(f"{label:<{w}}" + "".join(f"{agg[k]:>10.{digits}f}" for k in METRIC_KEYS)
                         + f"{total:>10d}")
        return "\n".join(lines)


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def report(cm: ConfusionMatrix) -> ClassReport:
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    col = c.sum(axis=0)
    row = c.sum(axis=1)
    zero = {"precision": [], "recall": []}
    prec, rec = [], []
    for k, name in enumerate(cm.class_names):
        if col[k] == 0:
            zero["precision"].append(name)
        if row[k] == 0:
            zero["recall"].append(name)
        prec.append(float(tp[k] / col[k]) if col[k] else 0.0)
        rec.append(float(tp[k] / row[k]) if row[k] else 0.0)
    f1 = [_f1(p, r) for p, r in zip(prec, rec)]
    support = [int(s) for s in row]
    total = sum(support)
    per = {"precision": prec, "recall": rec, "f1": f1}
    macro = {k: float(np.mean(per[k])) for k in METRIC_KEYS}
    weighted = {k: (float(np.dot(per[k], support) / total) if total else 0.0) for k in METRIC_KEYS}
    accuracy = float(tp.sum() / total) if total else 0.0
    return ClassReport(list(cm.class_names), prec, rec, f1, support, accuracy, macro, weighted, zero)


@dataclass
class RocCurve:
    class_name: str
    thresholds: list[float]  # first entry is +inf (nothing predicted positive)
    fpr: list[float]
    tpr: list[float]
    auc: float  # nan when the class has no positives or no negatives
    defined: bool = True


def _roc_one(pos: np.ndarray, scores: np.ndarray) -> tuple[list, list, list, float, bool]:
    P = int(pos.sum())
    N = len(pos) - P
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], pos[order]
    # last index of every run of equal scores: ties cross the threshold together
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    thresholds = [math.inf] + s[ends].tolist()
    tp = np.r_[0, tps].astype(np.int64)
    fp = np.r_[0, fps].astype(np.int64)
    if P == 0 or N == 0:
        return thresholds, (fp / N if N else fp * 1.0).tolist(), (tp / P if P else tp * 1.0).tolist(), math.nan, False
    # trapezoid area in integer units of 1/(2PN), then one correctly rounded division
    area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    return thresholds, (fp / N).tolist(), (tp / P).tolist(), area / (2 * P * N), True


def roc_auc(y_true, scores, class_names: Sequence[str] | None = None) -> list[RocCurve]:
    """One-vs-rest ROC curves from a score matrix [N, K]."""
    y_true = np.asarray(y_true, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or len(scores) != len(y_true):
        raise ValueError(f"scores must be [N, K] with N = {len(y_true)}, got {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    K = scores.shape[1]
    names = list(class_names) if class_names is not None else [str(k) for k in range(K)]
    curves = []
    for k in range(K):
        th, fpr, tpr, auc, ok = _roc_one(y_true == k, scores[:, k])
        curves.append(RocCurve(names[k], th, fpr, tpr, auc, ok))
    return curves


def weighted_auc(curves: Sequence[RocCurve], support: Sequence[int]) -> float:
    """Support-weighted mean over classes with a defined AUC."""
    pairs = [(c.auc, s) for c, s in zip(curves, support) if c.defined]
    total = sum(s for _, s in pairs)
    return float(sum(a * s for a, s in pairs) / total) if total else math.nan


def roc_to_csv(curves: Sequence[RocCurve]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "threshold", "fpr", "tpr"])
    for c in curves:
        for t, f, p in zip(c.thresholds, c.fpr, c.tpr):
            w.writerow([c.class_name, repr(float(t)), repr(float(f)), repr(float(p))])
    return buf.getvalue()


def evaluation_json(rep: ClassReport, curves: Sequence[RocCurve]) -> str:
    d = rep.to_dict()
    d["auc"] = {c.class_name: (c.auc if c.defined else None) for c in curves}
    d["weighted_auc"] = weighted_auc(curves, rep.support)
    d["undefined_auc"] = [c.class_name for c in curves if not c.defined]
    return json.dumps(d, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# k-fold


@dataclass
class FoldSummary:
    folds: list[dict[str, float]]
    mean: dict[str, float]
    std: dict[str, float]  # sample standard deviation (n - 1 denominator)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold"] + list(FOLD_KEYS))
        for i, f in enumerate(self.folds, start=1):
            w.writerow([i] + [repr(float(f[k])) for k in FOLD_KEYS])
        w.writerow(["mean"] + [repr(self.mean[k]) for k in FOLD_KEYS])
        w.writerow(["std"] + [repr(self.std[k]) for k in FOLD_KEYS])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"folds": self.folds, "mean": self.mean, "std": self.std, "k": len(self.folds)}


def summarize_folds(folds: Sequence[dict[str, float]]) -> FoldSummary:
    if len(folds) < 2:
        raise ValueError("need at least two folds for a sample standard deviation")
    mean = {k: float(np.mean([f[k] for f in folds])) for k in FOLD_KEYS}
    std = {k: float(np.std([f[k] for f in folds], ddof=1)) for k in FOLD_KEYS}
    return FoldSummary([dict(f) for f in folds], mean, std)


def stratified_folds(labels, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Test-index arrays for ``k`` stratified folds.

    Each class is shuffled and dealt round-robin; the dealing position carries
    over between classes so fold sizes differ by at most one overall.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ValueError("k must be >= 2")
    folds: list[list[int]] = [[] for _ in range(k)]
    pos = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            raise StratificationError(f"class {c} has {len(idx)} samples; need at least {k} for {k}-fold")
        idx = idx[Rng(derive_seed(seed, f"kfold/{c}")).permutation(len(idx))]
        for i in idx:
            folds[pos % k].append(int(i))
            pos += 1
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def fold_metrics(y_true, y_pred, scores, K: int, class_names=None) -> tuple[dict[str, float], ClassReport, list[RocCurve]]:
    rep = report(confusion(y_true, y_pred, K, class_names))
    curves = roc_auc(y_true, scores, class_names)
    row = {"accuracy": rep.accuracy, **{k: rep.weighted[k] for k in METRIC_KEYS},
           "auc": weighted_auc(curves, rep.support)}
    return row, rep, curves


TrainFn = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


def kfold(labels, k: int, seed: int, train_fn: TrainFn, K: int | None = None,
          class_names=None) -> tuple[FoldSummary, list[ClassReport]]:
    """Stratified k-fold driver.

    ``train_fn(train_idx, test_idx, fold_seed)`` trains a fresh model and
    returns the score matrix [len(test_idx), K] for the test fold. The fold
    seed is ``seed + fold_index``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    K = K or int(labels.max()) + 1
    folds = stratified_folds(labels, k, seed)
    everything = np.arange(len(labels))
    rows, reports = [], []
    for i, test_idx in enumerate(folds):
        train_idx = np.setdiff1d(everything, test_idx)
        scores = np.asarray(train_fn(train_idx, test_idx, seed + i))
        row, rep, _ = fold_metrics(labels[test_idx], scores.argmax(axis=1), scores, K, class_names)
        rows.append(row)
        reports.append(rep)
    return summarize_folds(rows), reports
