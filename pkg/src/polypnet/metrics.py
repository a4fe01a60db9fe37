"""Per-image confusion counts and the six segmentation scores.

Column order everywhere is mIoU, DSC, recall, precision, accuracy, F2.
An image with no foreground in either prediction or ground truth scores 1.0
on the overlap metrics instead of dividing by zero.
"""
from __future__ import annotations

import csv
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError

METRIC_NAMES = ("miou", "dsc", "recall", "precision", "accuracy", "f2")
DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ContractError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class MetricRow:
    miou: float
    dsc: float
    recall: float
    precision: float
    accuracy: float
    f2: float
    fps: Optional[float] = None

    def values(self) -> tuple[float, ...]:
        return astuple(self)[: len(METRIC_NAMES)]


def confusion_counts(pred: np.ndarray, gt: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> ConfusionCounts:
    """Count pixels with ``pred >= threshold`` against a binary ground truth."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    if not np.isin(gt, (0, 1)).all():
        raise ContractError("ground-truth mask must contain only 0 and 1")
    p = pred >= threshold
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def compute_metrics(c: ConfusionCounts) -> MetricRow:
    if c.total <= 0:
        raise ContractError("confusion counts cover no pixels")
    tp, fp, fn = c.tp, c.fp, c.fn
    if tp + fp + fn == 0:
        return MetricRow(1.0, 1.0, 1.0, 1.0, (tp + c.tn) / c.total, 1.0)
    # a lone empty side still has a defined ratio: 0 when the other side is non-empty
    recall = tp / (tp + fn) if tp + fn else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    return MetricRow(
        miou=tp / (tp + fp + fn),
        dsc=2 * tp / (2 * tp + fp + fn),
        recall=recall,
        precision=precision,
        accuracy=(tp + c.tn) / c.total,
        f2=5 * tp / (5 * tp + 4 * fn + fp),
    )


def aggregate_dataset(rows: Sequence[MetricRow]) -> MetricRow:
    """Macro average: the plain mean of each metric over images."""
    if not rows:
        raise ContractError("cannot aggregate an empty list of metric rows")
    means = np.mean([r.values() for r in rows], axis=0)
    return MetricRow(*(float(v) for v in means))


def aggregate_counts(counts: Iterable[ConfusionCounts]) -> MetricRow:
    """Micro average: pool every pixel, then score once."""
    counts = list(counts)
    if not counts:
        raise ContractError("cannot aggregate an empty list of counts")
    total = counts[0]
    for c in counts[1:]:
        total = total + c
    return compute_metrics(total)


def format_row(label: str, row: MetricRow) -> list[str]:
    return [label] + [f"{v:.4f}" for v in row.values()]


def write_report(path, names: Sequence[str], rows: Sequence[MetricRow], micro: Optional[MetricRow] = None) -> MetricRow:
    """Write the per-image CSV report with a closing ``MEAN`` row.

    The MEAN row is the macro average. When ``micro`` is given an extra
    ``MICRO`` row follows it.
    """
    if len(names) != len(rows):
        raise ContractError("one image name per metric row is required")
    mean = aggregate_dataset(rows)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("image",) + METRIC_NAMES)
        for name, row in zip(names, rows):
            w.writerow(format_row(name, row))
        w.writerow(format_row("MEAN", mean))
        if micro is not None:
            w.writerow(format_row("MICRO", micro))
    return mean


def read_report(path) -> dict[str, dict[str, float]]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return {r["image"]: {k: float(r[k]) for k in METRIC_NAMES} for r in reader}

