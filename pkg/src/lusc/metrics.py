"""Confusion matrices and one-vs-rest accuracy/precision/recall/F1."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import DatasetArchive, batches, standardize
from .nn import Model


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class
    class_names: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *self.class_names])
        for name, row in zip(self.class_names, self.counts):
            w.writerow([name, *(int(v) for v in row)])
        return buf.getvalue()


def confusion(predictions, labels, num_classes: int, class_names: Sequence[str] | None = None) -> ConfusionMatrix:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise ValueError(f"predictions {predictions.shape} and labels {labels.shape} must be equal-length vectors")
    for arr, what in ((predictions, "prediction"), (labels, "label")):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{what} index out of range for {num_classes} classes")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    names = list(class_names) if class_names is not None else [str(i) for i in range(num_classes)]
    return ConfusionMatrix(counts, names)


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, False) if den > 0 else (0.0, True)


@dataclass
class EvaluationReport:
    confusion: ConfusionMatrix
    per_class: dict[str, dict[str, float]]
    macro: dict[str, float]
    micro: dict[str, float]
    zero_division: list[str] = field(default_factory=list)
    eval_wall_seconds: float = 0.0
    config_hash: str = ""
    split_seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "split_seed": self.split_seed,
            "classes": self.confusion.class_names,
            "confusion": self.confusion.counts.tolist(),
            "per_class": self.per_class,
            "macro": self.macro,
            "zero_division": self.zero_division,
            "eval_wall_seconds": self.eval_wall_seconds,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def metrics(cm: ConfusionMatrix) -> EvaluationReport:
    """Per-class one-vs-rest metrics with unweighted macro averages.

    An empty precision or recall denominator yields 0 and is listed in
    ``zero_division`` as ``"<class>:precision"`` / ``"<class>:recall"``.
    """
    c = cm.counts
    total = cm.total
    if total == 0:
        raise ValueError("metrics need at least one evaluated sample")
    per_class: dict[str, dict[str, float]] = {}
    flags: list[str] = []
    for k, name in enumerate(cm.class_names):
        tp = int(c[k, k])
        fp = int(c[:, k].sum()) - tp
        fn = int(c[k, :].sum()) - tp
        precision, p_zero = _ratio(tp, tp + fp)
        recall, r_zero = _ratio(tp, tp + fn)
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        if p_zero:
            flags.append(f"{name}:precision")
        if r_zero:
            flags.append(f"{name}:recall")
        per_class[name] = {"precision": precision, "recall": recall, "f1": f1, "support": tp + fn}
    K = len(cm.class_names)
    accuracy = float(np.trace(c)) / total
    macro = {
        "accuracy": accuracy,
        "precision": sum(v["precision"] for v in per_class.values()) / K,
        "recall": sum(v["recall"] for v in per_class.values()) / K,
        "f1": sum(v["f1"] for v in per_class.values()) / K,
    }
    tp_all = float(np.trace(c))
    micro = {"precision": tp_all / total, "recall": tp_all / total}
    return EvaluationReport(cm, per_class, macro, micro, flags)


def one_vs_rest(cm: ConfusionMatrix, k: int) -> tuple[int, int, int, int]:
    """(TP, TN, FP, FN) for class ``k``."""
    c = cm.counts
    tp = int(c[k, k])
    fp = int(c[:, k].sum()) - tp
    fn = int(c[k, :].sum()) - tp
    return tp, cm.total - tp - fp - fn, fp, fn


def predict(model: Model, archive: DatasetArchive, indices, batch_size: int) -> np.ndarray:
    """Eval-mode argmax predictions; ties go to the lowest class index."""
    if not archive.standardized:
        archive = standardize(archive)
    out = []
    with ad.no_grad():
        for x, _ in batches(archive, indices, batch_size, None, image_size=model.input_shape[:2]):
            out.append(model(x, "eval").data.argmax(axis=1))
    return np.concatenate(out)


def evaluate(
    model: Model,
    archive: DatasetArchive,
    indices,
    batch_size: int = 32,
    config_hash: str = "",
    split_seed: int | None = None,
) -> EvaluationReport:
    if len(indices) == 0:
        raise ValueError("evaluate needs a non-empty index list")
    t0 = time.monotonic()
    preds = predict(model, archive, indices, batch_size)
    labels = archive.labels[np.asarray(indices, dtype=np.int64)]
    report = metrics(confusion(preds, labels, archive.num_classes, archive.class_names))
    report.eval_wall_seconds = time.monotonic() - t0
    report.config_hash = config_hash
    report.split_seed = split_seed
    return report
