"""Mask-aware per-AU evaluation: confusion counts, F1/accuracy, catalog
means, and the association-inclusion filter."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .catalog import AU_IDS, N_AUS, validate_labels


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(preds, labels, mask) -> dict[int, ConfusionCounts]:
    """Per-AU counts over unmasked entries only; keys are AU ids."""
    preds = np.asarray(preds)
    labels = validate_labels(labels)
    mask = np.asarray(mask)
    if preds.shape != labels.shape or mask.shape != labels.shape:
        raise MetricsError("preds, labels, and mask shapes must agree")
    if not np.isin(preds, (0, 1)).all():
        raise MetricsError("predictions must be binary")
    if ((labels == -1) != (mask == 0)).any():
        raise MetricsError("mask must be 0 exactly where the label is -1")
    counts = {}
    for k, au in enumerate(AU_IDS):
        m = mask[:, k] == 1
        p, y = preds[m, k], labels[m, k]
        counts[au] = ConfusionCounts(
            tp=int(((p == 1) & (y == 1)).sum()),
            fp=int(((p == 1) & (y == 0)).sum()),
            tn=int(((p == 0) & (y == 0)).sum()),
            fn=int(((p == 0) & (y == 1)).sum()),
        )
    return counts


def f1_accuracy(counts: ConfusionCounts) -> tuple[float, float]:
    """F1 = 2tp/(2tp+fp+fn), 0 when undefined; accuracy over all entries."""
    if counts.total == 0:
        raise MetricsError("no unmasked entries for this AU")
    denom = 2 * counts.tp + counts.fp + counts.fn
    f1 = 2 * counts.tp / denom if denom else 0.0
    accuracy = (counts.tp + counts.tn) / counts.total
    return f1, accuracy


@dataclass(frozen=True)
class MetricsReport:
    f1: dict[int, float]
    accuracy: dict[int, float]

    def __post_init__(self):
        missing = set(AU_IDS) - set(self.f1) | set(AU_IDS) - set(self.accuracy)
        if missing:
            raise MetricsError(f"report missing AUs {sorted(missing)}")


def report_from_counts(counts: dict[int, ConfusionCounts]) -> MetricsReport:
    f1, acc = {}, {}
    for au in AU_IDS:
        f1[au], acc[au] = f1_accuracy(counts[au])
    return MetricsReport(f1=f1, accuracy=acc)


def mean_metrics(report: MetricsReport) -> tuple[float, float]:
    """Unweighted means over the 18 AUs (full precision; round for display)."""
    return (float(np.mean([report.f1[a] for a in AU_IDS])),
            float(np.mean([report.accuracy[a] for a in AU_IDS])))


def round_display(value: float, places: int = 2) -> float:
    """Half-up rounding for printed tables (0.885 -> 0.89)."""
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP))


def inclusion_filter(report: MetricsReport, f1_min: float = 0.5,
                     acc_min: float = 0.8) -> set[int]:
    """AUs reliable enough for association analysis (both thresholds inclusive)."""
    return {a for a in AU_IDS
            if report.f1[a] >= f1_min and report.accuracy[a] >= acc_min}


def write_report(path, report: MetricsReport) -> None:
    """One row per AU plus a mean row, values rounded half-up to 2 decimals."""
    mean_f1, mean_acc = mean_metrics(report)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["au", "f1", "accuracy"])
        for au in AU_IDS:
            writer.writerow([au, repr(report.f1[au]), repr(report.accuracy[au])])
        writer.writerow(["mean", round_display(mean_f1), round_display(mean_acc)])


def read_report(path) -> MetricsReport:
    f1, acc = {}, {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["au"] == "mean":
                continue
            f1[int(row["au"])] = float(row["f1"])
            acc[int(row["au"])] = float(row["accuracy"])
    return MetricsReport(f1=f1, accuracy=acc)
