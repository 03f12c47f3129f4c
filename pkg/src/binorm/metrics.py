"""Accuracy, macro precision/recall/F1, confusion matrix and RMSE."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np


@dataclass
class ClassificationReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: np.ndarray  # rows = true class, columns = predicted

    def as_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = self.confusion.tolist()
        return d


def confusion_matrix(preds, labels, K: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels must have equal length")
    if preds.size == 0:
        raise ValueError("cannot evaluate an empty prediction set")
    if labels.min() < 0 or labels.max() >= K or preds.min() < 0 or preds.max() >= K:
        raise ValueError(f"classes must lie in [0, {K})")
    return np.bincount(labels * K + preds, minlength=K * K).reshape(K, K)


def classification_report(preds, labels, K: int) -> ClassificationReport:
    """Macro-averaged metrics; a class with a zero denominator scores 0 and still counts."""
    cm = confusion_matrix(preds, labels, K)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros(K), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros(K), where=actual > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros(K), where=pr > 0)
    return ClassificationReport(
        accuracy=float(tp.sum() / cm.sum()),
        precision=float(precision.mean()),
        recall=float(recall.mean()),
        f1=float(f1.mean()),
        confusion=cm,
    )


def rmse(preds, targets) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError("preds and targets must have equal length")
    if preds.size == 0:
        raise ValueError("cannot evaluate an empty prediction set")
    return float(np.sqrt(np.mean((preds - targets) ** 2)))


def format_report(metrics: dict) -> str:
    """Flat ``key = value`` block; nested confusion matrices are written row by row."""
    lines = []
    for key in sorted(metrics):
        value = metrics[key]
        if key == "confusion":
            for i, row in enumerate(value):
                lines.append(f"confusion[{i}] = {' '.join(str(int(v)) for v in row)}")
        elif isinstance(value, float):
            lines.append(f"{key} = {value:.6f}")
        else:
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def report_json(metrics: dict, config_hash: Optional[str] = None) -> str:
    """Machine-readable report: ``{"schema": "binorm-report/1", "config_hash": ..., "metrics": {...}}``."""
    return json.dumps({"schema": "binorm-report/1", "config_hash": config_hash, "metrics": metrics}, indent=2, sort_keys=True) + "\n"
