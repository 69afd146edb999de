"""PCI regression metrics and the over/under-prediction error analysis."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .annotations import PciClass, pci_class


@dataclass(frozen=True)
class PairedSeries:
    """(item_id, predicted, actual) triples."""

    items: tuple[tuple[str, float, float], ...]

    def __post_init__(self) -> None:
        items = tuple((str(i), float(p), float(a)) for i, p, a in self.items)
        for item_id, p, a in items:
            if not (math.isfinite(p) and math.isfinite(a)):
                raise ValueError(f"non-finite value for item {item_id!r}")
        object.__setattr__(self, "items", items)

    @classmethod
    def from_arrays(cls, predicted: Sequence[float], actual: Sequence[float], ids: Sequence[str] | None = None) -> "PairedSeries":
        if len(predicted) != len(actual):
            raise ValueError("predicted and actual differ in length")
        ids = ids if ids is not None else [str(k) for k in range(len(predicted))]
        return cls(tuple(zip(ids, predicted, actual)))

    def __len__(self) -> int:
        return len(self.items)

    @property
    def predicted(self) -> np.ndarray:
        return np.array([p for _, p, _ in self.items], dtype=np.float64)

    @property
    def actual(self) -> np.ndarray:
        return np.array([a for _, _, a in self.items], dtype=np.float64)


def _require(series: PairedSeries) -> None:
    if len(series) == 0:
        raise ValueError("metric undefined on an empty series")


def mse(series: PairedSeries) -> float:
    _require(series)
    return float(np.mean((series.predicted - series.actual) ** 2))


def mae(series: PairedSeries) -> float:
    _require(series)
    return float(np.mean(np.abs(series.predicted - series.actual)))


def pearson(series: PairedSeries) -> float:
    """Sample Pearson correlation between predicted and actual."""
    if len(series) < 2:
        raise ValueError("undefined correlation: need at least two items")
    x = series.predicted - series.predicted.mean()
    y = series.actual - series.actual.mean()
    sxx, syy = float(np.dot(x, x)), float(np.dot(y, y))
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("undefined correlation: zero variance")
    r = float(np.dot(x, y)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass(frozen=True)
class ErrorGroup:
    count: int
    mean_abs_err: float
    std: float


def _group(abs_errors: np.ndarray) -> ErrorGroup:
    if abs_errors.size == 0:
        return ErrorGroup(0, 0.0, 0.0)
    return ErrorGroup(int(abs_errors.size), float(abs_errors.mean()), float(abs_errors.std()))


@dataclass
class ErrorAnalysis:
    over: ErrorGroup
    under: ErrorGroup
    exact: int
    pearson_r: float | None
    class_confusion: np.ndarray  # rows: actual class, cols: predicted class
    histogram: list[tuple[float, float, int]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.over.count + self.under.count + self.exact


def _histogram(errors: np.ndarray, bin_width: float) -> list[tuple[float, float, int]]:
    edges = np.arange(-100.0, 100.0 + bin_width / 2, bin_width)
    if edges[-1] < 100.0:
        edges = np.append(edges, edges[-1] + bin_width)
    clipped = np.clip(errors, -100.0, 100.0)
    counts, _ = np.histogram(clipped, bins=edges)
    return [(float(lo), float(hi), int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]


def error_analysis(series: PairedSeries, bin_width: float = 10.0) -> ErrorAnalysis:
    """Split errors by sign, bucket both values into PCI classes, histogram the signed error.

    Overprediction is ``predicted > actual``; ties count as exact. Errors
    outside [-100, 100] land in the edge bins.
    """
    _require(series)
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    err = series.predicted - series.actual
    over = _group(err[err > 0])
    under = _group(-err[err < 0])
    exact = int(np.count_nonzero(err == 0))

    classes = list(PciClass)
    index = {c: k for k, c in enumerate(classes)}
    confusion = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for _, p, a in series.items:
        confusion[index[pci_class(a)], index[pci_class(min(max(p, 0.0), 100.0))]] += 1

    try:
        r: float | None = pearson(series)
    except ValueError:
        r = None
    return ErrorAnalysis(over, under, exact, r, confusion, _histogram(err, bin_width))


def write_regression_reports(series: PairedSeries, analysis: ErrorAnalysis, out_dir) -> None:
    """Write pci_metrics.csv, pci_confusion.csv and pci_error_histogram.csv."""
    out = Path(out_dir)
    rows: list[tuple[str, float | str]] = [
        ("n", len(series)),
        ("mse", mse(series)),
        ("mae", mae(series)),
        ("pearson_r", "" if analysis.pearson_r is None else analysis.pearson_r),
        ("over_count", analysis.over.count),
        ("over_mean_abs_err", analysis.over.mean_abs_err),
        ("over_std", analysis.over.std),
        ("under_count", analysis.under.count),
        ("under_mean_abs_err", analysis.under.mean_abs_err),
        ("under_std", analysis.under.std),
        ("exact_count", analysis.exact),
    ]
    with open(out / "pci_metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for name, value in rows:
            writer.writerow([name, f"{value:.6f}" if isinstance(value, float) else value])

    labels = [c.label for c in PciClass]
    with open(out / "pci_confusion.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["actual \\ predicted", *labels])
        for label, row in zip(labels, analysis.class_confusion):
            writer.writerow([label, *map(int, row)])

    with open(out / "pci_error_histogram.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, count in analysis.histogram:
            writer.writerow([f"{lo:g}", f"{hi:g}", count])
