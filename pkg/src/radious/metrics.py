"""Confusion-matrix segmentation metrics (per-class IoU, mIoU, mAcc) and report ranking."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateEvaluationError, GeometryError, NamingError, ReportInputError

REPORT_VERSION = 1


class ConfusionMatrix:
    """Pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts.astype(np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        """A new matrix with the pixels of one (prediction, ground truth) pair added."""
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise GeometryError(f"prediction extent {pred.shape} != ground truth extent {gt.shape}")
        n = self.num_classes
        idx = gt.ravel().astype(np.int64) * n + pred.ravel().astype(np.int64)
        add = np.bincount(idx, minlength=n * n).reshape(n, n)
        return ConfusionMatrix(n, self.counts + add)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def _classes(cm: ConfusionMatrix, include_background: bool) -> range:
    return range(0 if include_background else 1, cm.num_classes)


def iou_per_class(cm: ConfusionMatrix, include_background: bool = True) -> dict[int, float]:
    """TP / (TP + FP + FN); classes that never occur in either map are omitted."""
    c = cm.counts
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    out = {}
    for k in _classes(cm, include_background):
        denom = tp[k] + fp[k] + fn[k]
        if denom:
            out[k] = float(tp[k] / denom)
    return out


def accuracy_per_class(cm: ConfusionMatrix, include_background: bool = True) -> dict[int, float]:
    c = cm.counts
    rows = c.sum(axis=1)
    return {k: float(c[k, k] / rows[k]) for k in _classes(cm, include_background) if rows[k]}


def miou(cm: ConfusionMatrix, include_background: bool = True) -> float:
    ious = iou_per_class(cm, include_background)
    if not ious:
        raise DegenerateEvaluationError("no class is present in predictions or ground truth")
    return float(np.mean(list(ious.values())))


def macc(cm: ConfusionMatrix, include_background: bool = True) -> float:
    accs = accuracy_per_class(cm, include_background)
    if not accs:
        raise DegenerateEvaluationError("no class has ground-truth pixels")
    return float(np.mean(list(accs.values())))


@dataclass
class ClassRow:
    id: int
    name: str
    iou: float | None
    acc: float | None


@dataclass
class MetricReport:
    model_name: str
    miou: float
    macc: float
    pixel_total: int = 0
    per_class: list[ClassRow] = field(default_factory=list)

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, model_name: str, names: list[str] | None = None,
                       include_background: bool = True) -> "MetricReport":
        ious = iou_per_class(cm, include_background)
        accs = accuracy_per_class(cm, include_background)
        rows = [
            ClassRow(k, names[k] if names else str(k), ious.get(k), accs.get(k))
            for k in sorted(set(ious) | set(accs))
        ]
        return cls(model_name, miou(cm, include_background), macc(cm, include_background), cm.total, rows)

    def to_json(self) -> dict:
        return {
            "format": "radious-report",
            "version": REPORT_VERSION,
            "model_name": self.model_name,
            "pixel_total": self.pixel_total,
            "per_class": [{"id": r.id, "name": r.name, "iou": r.iou, "acc": r.acc} for r in self.per_class],
            "miou": self.miou,
            "macc": self.macc,
        }

    @classmethod
    def from_json(cls, d: dict) -> "MetricReport":
        try:
            rows = [ClassRow(int(r["id"]), str(r["name"]), r.get("iou"), r.get("acc")) for r in d.get("per_class", [])]
            report = cls(str(d["model_name"]), float(d["miou"]), float(d["macc"]), int(d.get("pixel_total", 0)), rows)
        except (KeyError, TypeError, ValueError) as exc:
            raise ReportInputError(f"malformed report: {exc}") from exc
        ious = [r.iou for r in rows if r.iou is not None]
        # reports from external sources may carry only the headline numbers
        if ious and abs(np.mean(ious) - report.miou) > 1e-9:
            raise ReportInputError(f"report {report.model_name}: miou {report.miou} != mean of per-class IoU {np.mean(ious)}")
        return report

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ReportInputError(f"cannot read report {path}: {exc}") from exc
        return cls.from_json(data)


@dataclass
class ComparisonRow:
    rank: int
    model_name: str
    miou: float
    macc: float
    delta_miou: float
    delta_macc: float


def compare_reports(reports: list[MetricReport]) -> list[ComparisonRow]:
    """Rank by mIoU (descending, ties by name); deltas are relative to the best model."""
    if len(reports) < 2:
        raise ReportInputError(f"need at least two reports to compare, got {len(reports)}")
    names = [r.model_name for r in reports]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise NamingError(f"duplicate model names: {', '.join(dupes)}")
    ranked = sorted(reports, key=lambda r: (-r.miou, r.model_name))
    best = ranked[0]
    return [
        ComparisonRow(i + 1, r.model_name, r.miou, r.macc, r.miou - best.miou, r.macc - best.macc)
        for i, r in enumerate(ranked)
    ]


def format_comparison(rows: list[ComparisonRow]) -> str:
    width = max(len("Algorithm"), *(len(r.model_name) for r in rows))
    lines = [f"{'Algorithm':<{width}}  {'mIoU':>6}  {'mAcc':>6}  {'dmIoU':>7}  {'dmAcc':>7}"]
    for r in rows:
        lines.append(f"{r.model_name:<{width}}  {r.miou:6.2f}  {r.macc:6.2f}  {r.delta_miou:+7.2f}  {r.delta_macc:+7.2f}")
    return "\n".join(lines)
