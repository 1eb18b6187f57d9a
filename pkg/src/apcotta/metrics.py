"""Confusion-matrix accumulation, overall accuracy and (m)IoU."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .cloud import IGNORE


class ConfusionMatrix:
    """Rows are true classes, columns predicted classes. IGNORE truths are skipped."""

    def __init__(self, class_count: int):
        self.class_count = int(class_count)
        self.counts = np.zeros((self.class_count, self.class_count), dtype=np.int64)

    def update(self, truths, preds):
        truths = np.asarray(truths, dtype=np.int64).ravel()
        preds = np.asarray(preds, dtype=np.int64).ravel()
        if truths.shape != preds.shape:
            raise ValueError("truths and predictions differ in length")
        c = self.class_count
        if preds.size and (preds.min() < 0 or preds.max() >= c):
            raise ValueError(f"predicted label out of range [0, {c})")
        keep = truths != IGNORE
        t, p = truths[keep], preds[keep]
        if t.size and (t.min() < 0 or t.max() >= c):
            raise ValueError(f"true label out of range [0, {c})")
        self.counts += np.bincount(t * c + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.class_count)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _ratio(num: int, den: int, exact: bool):
    return Fraction(num, den) if exact else num / den


def overall_accuracy(cm: ConfusionMatrix, exact: bool = False):
    """trace / total; ``None`` when nothing has been scored.

    ``exact=True`` returns a ``Fraction`` instead of a float.
    """
    total = cm.total
    if total == 0:
        return None
    return _ratio(int(np.trace(cm.counts)), total, exact)


def iou_per_class(cm: ConfusionMatrix, exact: bool = False):
    """IoU per class, ``None`` where TP + FP + FN = 0."""
    tp = np.diag(cm.counts)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    out = []
    for i in range(cm.class_count):
        denom = int(tp[i] + fp[i] + fn[i])
        out.append(None if denom == 0 else _ratio(int(tp[i]), denom, exact))
    return out


def miou(cm: ConfusionMatrix, exact: bool = False):
    """Return ``(per_class, mean)``; undefined classes are left out of the mean."""
    per_class = iou_per_class(cm, exact)
    defined = [v for v in per_class if v is not None]
    mean = sum(defined) / len(defined) if defined else None
    return per_class, mean


@dataclass
class MetricsReport:
    domain: str
    oa: float | None
    iou: list
    miou: float | None
    class_points: list
    excluded_classes: int = 0

    @classmethod
    def from_confusion(cls, domain: str, cm: ConfusionMatrix) -> "MetricsReport":
        per_class, mean = miou(cm)
        return cls(domain, overall_accuracy(cm), per_class, mean,
                   [int(v) for v in cm.counts.sum(axis=1)],
                   sum(v is None for v in per_class))

    def as_dict(self) -> dict:
        return {
            "domain": self.domain,
            "oa": self.oa,
            "iou": self.iou,
            "miou": self.miou,
            "class_points": self.class_points,
            "excluded_classes": self.excluded_classes,
        }


@dataclass
class StreamReport:
    """Per-domain reports plus their mean (mean of per-domain values, not pooled)."""

    method: str
    domains: list = field(default_factory=list)

    @property
    def mean_miou(self):
        vals = [d.miou for d in self.domains if d.miou is not None]
        return sum(vals) / len(vals) if vals else None

    @property
    def mean_oa(self):
        vals = [d.oa for d in self.domains if d.oa is not None]
        return sum(vals) / len(vals) if vals else None

    def to_csv(self) -> str:
        class_count = max((len(d.iou) for d in self.domains), default=0)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["domain", "oa"] + [f"iou_{i}" for i in range(class_count)] + ["miou"])
        for d in self.domains:
            writer.writerow([d.domain, _fmt(d.oa)] + [_fmt(v) for v in d.iou] + [_fmt(d.miou)])
        writer.writerow(["mean", _fmt(self.mean_oa)] + [""] * class_count + [_fmt(self.mean_miou)])
        return buf.getvalue()

    def to_json(self) -> str:
        data = {
            "method": self.method,
            "domains": [d.as_dict() for d in self.domains],
            "mean": {"oa": self.mean_oa, "miou": self.mean_miou,
                     "aggregation": "mean of per-domain values"},
        }
        return json.dumps(data, indent=2, sort_keys=True) + "\n"


def _fmt(v):
    return "" if v is None else f"{v:.6f}"
