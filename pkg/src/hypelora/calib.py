"""Calibration and task metrics over a set of probabilistic predictions.

Binning conventions
-------------------
Equal-width bins (ECE, MCE, CECE and the reliability data): bin ``m`` of
``M`` (1-indexed) holds confidences in ``((m-1)/M, m/M]``; a confidence of
exactly 0 goes to bin 1.

Equal-population bins (ACE, TACE): values are sorted ascending with a stable
sort, so ties keep sample order, and cut into ``M`` contiguous groups whose
sizes differ by at most one; the first ``N mod M`` groups take the extra
sample.  Empty groups (``N < M``) are skipped.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

TASK_METRICS = ("accuracy", "mcc", "f1")


class PredictionError(ValueError):
    pass


@dataclass
class PredictionSet:
    probs: np.ndarray  # (N, C)
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        p, y = self.probs, self.labels
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise PredictionError(f"probs must be a non-empty (N, C) matrix, got shape {p.shape}")
        if y.shape != (p.shape[0],):
            raise PredictionError(f"expected {p.shape[0]} labels, got shape {y.shape}")
        if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
            raise PredictionError("probabilities must lie in [0, 1]")
        bad = np.flatnonzero(np.abs(p.sum(axis=1) - 1.0) > 1e-9)
        if bad.size:
            raise PredictionError(f"row {int(bad[0])} does not sum to 1 (tolerance 1e-9)")
        if y.min() < 0 or y.max() >= p.shape[1]:
            raise PredictionError(f"labels must lie in [0, {p.shape[1]})")

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)

    @property
    def confidences(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def correct(self) -> np.ndarray:
        return self.predictions == self.labels


@dataclass
class BinStats:
    bin_index: int
    lower: float
    upper: float
    count: int
    confidence: float
    accuracy: float


def bin_indices(confidences, M: int) -> np.ndarray:
    """1-based equal-width bin of every confidence."""
    if M < 1:
        raise ValueError("number of bins must be at least 1")
    c = np.asarray(confidences, dtype=np.float64)
    if c.size and (not np.all(np.isfinite(c)) or c.min() < 0.0 or c.max() > 1.0):
        raise ValueError("confidences must lie in [0, 1]")
    uppers = np.arange(1, M + 1) / M
    return np.searchsorted(uppers, c, side="left") + 1


def bin_equal_width(confidences, correct, M: int) -> list[BinStats]:
    """Per-bin counts, mean confidence and accuracy; empty bins report zeros."""
    c = np.asarray(confidences, dtype=np.float64)
    ok = np.asarray(correct, dtype=np.float64)
    idx = bin_indices(c, M)
    out = []
    for m in range(1, M + 1):
        sel = idx == m
        count = int(sel.sum())
        conf = float(c[sel].mean()) if count else 0.0
        acc = float(ok[sel].mean()) if count else 0.0
        out.append(BinStats(m, (m - 1) / M, m / M, count, conf, acc))
    return out


def _weighted_gap(bins: list[BinStats], n: int) -> float:
    return float(sum(b.count / n * abs(b.accuracy - b.confidence) for b in bins if b.count))


def ece(preds: PredictionSet, M: int = 10) -> float:
    """Top-label expected calibration error with equal-width bins."""
    return _weighted_gap(bin_equal_width(preds.confidences, preds.correct, M), preds.n)


def mce(preds: PredictionSet, M: int = 10) -> float:
    """Largest confidence/accuracy gap over non-empty bins."""
    bins = bin_equal_width(preds.confidences, preds.correct, M)
    return float(max(abs(b.accuracy - b.confidence) for b in bins if b.count))


def cece(preds: PredictionSet, M: int = 10) -> float:
    """Classwise ECE: the ECE sum for each class probability, averaged over classes."""
    per_class = []
    for k in range(preds.n_classes):
        bins = bin_equal_width(preds.probs[:, k], preds.labels == k, M)
        per_class.append(_weighted_gap(bins, preds.n))
    return float(np.mean(per_class))


def _equal_population_gaps(values: np.ndarray, hits: np.ndarray, M: int) -> list[float]:
    n = len(values)
    order = np.argsort(values, kind="stable")
    v, h = values[order], hits[order].astype(np.float64)
    base, rem = divmod(n, M)
    gaps, start = [], 0
    for i in range(M):
        size = base + (1 if i < rem else 0)
        if size:
            gaps.append(abs(h[start:start + size].mean() - v[start:start + size].mean()))
        start += size
    return gaps


def _adaptive(preds: PredictionSet, M: int, threshold: float | None,
              top_label: bool) -> tuple[float, bool]:
    if M < 1:
        raise ValueError("number of bins must be at least 1")
    if top_label:
        columns = [(preds.confidences, preds.correct)]
    else:
        columns = [(preds.probs[:, k], preds.labels == k) for k in range(preds.n_classes)]
    gaps: list[float] = []
    for values, hits in columns:
        if threshold is not None:
            keep = values > threshold
            values, hits = values[keep], hits[keep]
        gaps.extend(_equal_population_gaps(values, hits, M))
    if not gaps:
        return 0.0, True
    return float(np.mean(gaps)), False


def ace(preds: PredictionSet, M: int = 10, top_label: bool = False) -> float:
    """Adaptive calibration error: equal-population bins, averaged over classes and bins."""
    return _adaptive(preds, M, None, top_label)[0]


def tace_with_flag(preds: PredictionSet, M: int = 10, eps: float = 0.01,
                   top_label: bool = False) -> tuple[float, bool]:
    """TACE plus a flag that is true when no probability exceeded ``eps``."""
    return _adaptive(preds, M, eps, top_label)


def tace(preds: PredictionSet, M: int = 10, eps: float = 0.01, top_label: bool = False) -> float:
    """ACE restricted to probability entries strictly above ``eps``."""
    return _adaptive(preds, M, eps, top_label)[0]


def brier(preds: PredictionSet) -> float:
    onehot = np.eye(preds.n_classes)[preds.labels]
    return float(((preds.probs - onehot) ** 2).sum(axis=1).mean())


def accuracy(preds: PredictionSet) -> float:
    return float(preds.correct.mean())


def confusion_matrix(preds: PredictionSet) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((preds.n_classes, preds.n_classes), dtype=np.int64)
    np.add.at(cm, (preds.labels, preds.predictions), 1)
    return cm


def mcc(preds: PredictionSet) -> float:
    """Matthews correlation (multi-class form); 0 when undefined."""
    cm = confusion_matrix(preds).astype(np.float64)
    s = cm.sum()
    c = np.trace(cm)
    t = cm.sum(axis=1)
    p = cm.sum(axis=0)
    denom = math.sqrt((s * s - p @ p) * (s * s - t @ t))
    if denom == 0.0:
        return 0.0
    return float((c * s - t @ p) / denom)


def f1(preds: PredictionSet, positive_class: int = 1) -> float:
    pred_pos = preds.predictions == positive_class
    true_pos = preds.labels == positive_class
    tp = float(np.sum(pred_pos & true_pos))
    precision = tp / pred_pos.sum() if pred_pos.any() else 0.0
    recall = tp / true_pos.sum() if true_pos.any() else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class CalibrationReport:
    ece: float
    cece: float
    mce: float
    ace: float
    tace: float
    tace_eps: float
    tace_empty: bool
    brier: float
    accuracy: float
    mcc: float | None
    f1: float | None
    task_metric: str
    score: float
    n_samples: int
    n_classes: int
    n_bins: int
    ace_top_label: bool = False
    bins: list[BinStats] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> CalibrationReport:
        d = dict(d)
        d["bins"] = [BinStats(**b) for b in d.get("bins", [])]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> CalibrationReport:
        return cls.from_dict(json.loads(Path(path).read_text()))


def full_report(preds: PredictionSet, M: int = 10, eps: float = 0.01,
                task_metric: str = "accuracy", positive_class: int = 1,
                ace_top_label: bool = False) -> CalibrationReport:
    """Every calibration and task metric for one prediction set."""
    if task_metric not in TASK_METRICS:
        raise ValueError(f"task_metric must be one of {TASK_METRICS}, got {task_metric!r}")
    bins = bin_equal_width(preds.confidences, preds.correct, M)
    tace_value, empty = tace_with_flag(preds, M, eps, ace_top_label)
    acc = accuracy(preds)
    mcc_value = mcc(preds)
    f1_value = f1(preds, positive_class) if 0 <= positive_class < preds.n_classes else None
    score = {"accuracy": acc, "mcc": mcc_value, "f1": f1_value}[task_metric]
    if score is None:
        raise ValueError(f"positive_class={positive_class} is not a valid class")
    return CalibrationReport(
        ece=_weighted_gap(bins, preds.n),
        cece=cece(preds, M),
        mce=float(max(abs(b.accuracy - b.confidence) for b in bins if b.count)),
        ace=ace(preds, M, ace_top_label),
        tace=tace_value,
        tace_eps=float(eps),
        tace_empty=empty,
        brier=brier(preds),
        accuracy=acc,
        mcc=mcc_value,
        f1=f1_value,
        task_metric=task_metric,
        score=score,
        n_samples=preds.n,
        n_classes=preds.n_classes,
        n_bins=M,
        ace_top_label=ace_top_label,
        bins=bins,
    )


def read_predictions(path) -> PredictionSet:
    """Load ``{"probs": [...], "label": k}`` records, one per line."""
    probs, labels = [], []
    with Path(path).open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                probs.append([float(x) for x in rec["probs"]])
                labels.append(int(rec["label"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise PredictionError(f"line {lineno}: malformed record ({exc})") from None
            if len(probs[-1]) != len(probs[0]):
                raise PredictionError(f"line {lineno}: expected {len(probs[0])} probabilities")
            row_sum = math.fsum(probs[-1])
            if abs(row_sum - 1.0) > 1e-9:
                raise PredictionError(f"line {lineno}: probabilities sum to {row_sum!r}, not 1")
    if not probs:
        raise PredictionError(f"{path}: no predictions")
    return PredictionSet(np.array(probs), np.array(labels))


def write_predictions(preds: PredictionSet, path) -> None:
    with Path(path).open("w") as fh:
        for row, label in zip(preds.probs, preds.labels):
            fh.write(json.dumps({"probs": [float(x) for x in row], "label": int(label)}) + "\n")
