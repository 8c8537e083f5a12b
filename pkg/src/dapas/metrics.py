"""Confusion matrices, per-class IoU, mIoU and the relative IoU ratios.

Four mIoU values enter the ratios: clean/undefended (``co``),
attacked/undefended (``ao``), clean/purified (``cp``) and attacked/purified
(``ap``). Each ratio divides one of them by the clean undefended mIoU.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from dapas.types import (
    DEFAULT_IGNORE_INDEX,
    IoURatio,
    LabelRangeError,
    MetricsReport,
    SegmentationMask,
    ShapeMismatchError,
    ValidationError,
)

RATIO_DEFINITIONS = {
    "ratio_att": "miou_ao",
    "ratio_rob": "miou_ap",
    "ratio_red": "miou_cp",
}


class EmptyAccumulatorError(ValidationError):
    pass


def _as_array(mask: SegmentationMask | np.ndarray | torch.Tensor) -> np.ndarray:
    if isinstance(mask, SegmentationMask):
        return mask.labels.numpy()
    if isinstance(mask, torch.Tensor):
        return mask.numpy()
    return np.asarray(mask)


@dataclass
class ConfusionAccumulator:
    """Rows index ground truth, columns index prediction."""

    num_classes: int
    ignore_index: int = DEFAULT_IGNORE_INDEX
    matrix: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.matrix is None:
            self.matrix = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def merge(self, other: ConfusionAccumulator) -> ConfusionAccumulator:
        if other.num_classes != self.num_classes:
            raise ShapeMismatchError("cannot merge accumulators with different class counts")
        return ConfusionAccumulator(self.num_classes, self.ignore_index, self.matrix + other.matrix)

    def copy(self) -> ConfusionAccumulator:
        return ConfusionAccumulator(self.num_classes, self.ignore_index, self.matrix.copy())


def accumulate(
    acc: ConfusionAccumulator,
    pred: SegmentationMask | np.ndarray,
    gt: SegmentationMask | np.ndarray,
) -> ConfusionAccumulator:
    """Return a new accumulator with ``(pred, gt)`` counted; ignore pixels skipped."""
    p, g = _as_array(pred).astype(np.int64).ravel(), _as_array(gt).astype(np.int64).ravel()
    if _as_array(pred).shape != _as_array(gt).shape:
        raise ShapeMismatchError(f"pred {_as_array(pred).shape} vs gt {_as_array(gt).shape}")
    keep = g != acc.ignore_index
    p, g = p[keep], g[keep]
    n = acc.num_classes
    if p.size and (g.min() < 0 or g.max() >= n):
        raise LabelRangeError(f"ground-truth label outside [0, {n})")
    if p.size and (p.min() < 0 or p.max() >= n):
        raise LabelRangeError(f"predicted label outside [0, {n})")
    counts = np.bincount(g * n + p, minlength=n * n).reshape(n, n)
    return ConfusionAccumulator(n, acc.ignore_index, acc.matrix + counts)


def per_class_iou(acc: ConfusionAccumulator) -> tuple[float | None, ...]:
    """IoU per class; None where a class appears in neither prediction nor truth."""
    m = acc.matrix
    tp = np.diag(m)
    union = m.sum(axis=0) + m.sum(axis=1) - tp
    return tuple(float(tp[c]) / float(union[c]) if union[c] > 0 else None for c in range(len(tp)))


def miou(acc: ConfusionAccumulator) -> float:
    if acc.total == 0:
        raise EmptyAccumulatorError("mIoU of an empty accumulator is undefined")
    present = [v for v in per_class_iou(acc) if v is not None]
    return float(sum(present) / len(present))


def iou_ratios(
    miou_co: float,
    miou_ao: float | None = None,
    miou_cp: float | None = None,
    miou_ap: float | None = None,
) -> dict[str, IoURatio]:
    """Ratios of the given mIoUs to ``miou_co``; omitted inputs give omitted ratios.

    Inputs may be fractions or percentages as long as they share one scale.
    """
    if not miou_co > 0:
        raise ValidationError(f"miou_co must be > 0 for ratios, got {miou_co}")
    values = {"miou_ao": miou_ao, "miou_cp": miou_cp, "miou_ap": miou_ap}
    out = {}
    for name, source in RATIO_DEFINITIONS.items():
        value = values[source]
        if value is None:
            continue
        if value < 0:
            raise ValidationError(f"{source} must be >= 0, got {value}")
        out[name] = IoURatio(name, value / miou_co, source, value, "miou_co", miou_co)
    return out


def build_report(acc: ConfusionAccumulator, ratios: dict[str, IoURatio] | None = None) -> MetricsReport:
    return MetricsReport(acc.matrix.copy(), per_class_iou(acc), miou(acc), dict(ratios or {}))


def report_to_json(report: MetricsReport, path: str | Path | None = None, **extra) -> str:
    payload = report.to_dict()
    payload.update(extra)
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text


def report_from_json(text: str) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(text))


CSV_COLUMNS = ("miou", "ratio_att", "ratio_rob", "ratio_red")


def report_csv_row(report: MetricsReport) -> dict[str, str]:
    row = {"miou": f"{report.miou:.6f}"}
    for name in CSV_COLUMNS[1:]:
        r = report.ratios.get(name)
        row[name] = f"{r.percent:.1f}" if r is not None else ""
    return row


def reports_to_csv(rows: list[dict[str, str]], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: row.get(c, "") for c in columns})
    return buf.getvalue()
