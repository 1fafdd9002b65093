"""Accuracy, per-class accuracy, confusion matrices and report files."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray
    class_names: list

    @classmethod
    def from_labels(cls, truth, pred, class_names) -> "ConfusionMatrix":
        k = len(class_names)
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(counts, (np.asarray(truth), np.asarray(pred)), 1)
        return cls(counts, list(class_names))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total)

    def per_class_accuracy(self) -> np.ndarray:
        """Diagonal over row sum; NaN for classes absent from the ground truth."""
        rows = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.counts) / rows, np.nan)

    @property
    def average_error(self) -> float:
        """Mean over present classes of the per-class error rate."""
        return float(1.0 - np.nanmean(self.per_class_accuracy()))


@dataclass
class EvalResult:
    accuracy: float
    avg_error: float
    per_class: dict
    confusion: ConfusionMatrix

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "avg_error": self.avg_error,
                "per_class": self.per_class}


def summarize(truth, pred, class_names) -> EvalResult:
    if len(truth) == 0:
        raise ConfigError("cannot evaluate on an empty test set")
    cm = ConfusionMatrix.from_labels(truth, pred, class_names)
    per_class = {name: (None if np.isnan(a) else float(a))
                 for name, a in zip(cm.class_names, cm.per_class_accuracy())}
    return EvalResult(cm.accuracy, cm.average_error, per_class, cm)


def evaluate(model, samples, class_names=None) -> EvalResult:
    """Run ``model.predict`` over ``samples`` and tabulate the results."""
    if not samples:
        raise ConfigError("cannot evaluate on an empty test set")
    class_names = class_names or model.class_names
    pred = model.predict([s.image for s in samples])
    return summarize([s.label for s in samples], pred, class_names)


def _csv_text(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def write_reports(result: EvalResult, out_dir) -> list:
    """Write ``metrics.json``, ``confusion.csv`` and ``per_class.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cm = result.confusion
    names = cm.class_names
    confusion = [["truth\\pred", *names]]
    confusion += [[name, *map(int, row)] for name, row in zip(names, cm.counts)]
    per_class = [["class", "accuracy", "count"]]
    per_class += [[name, "" if result.per_class[name] is None else repr(result.per_class[name]),
                   int(n)] for name, n in zip(names, cm.counts.sum(axis=1))]
    files = {
        "metrics.json": json.dumps(result.to_json(), indent=2) + "\n",
        "confusion.csv": _csv_text(confusion),
        "per_class.csv": _csv_text(per_class),
    }
    paths = []
    for name, text in files.items():
        path = out / name
        path.write_text(text, encoding="utf-8")
        paths.append(path)
    return paths


def read_confusion_csv(path) -> ConfusionMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    counts = np.array([[int(v) for v in row[1:]] for row in rows[1:]], dtype=np.int64)
    return ConfusionMatrix(counts, names)
