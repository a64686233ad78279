"""Accuracy, confusion matrices, relative error reduction, binary
collapse, and the cross-condition robustness grid."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError


def accuracy(preds: np.ndarray, labels: np.ndarray) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise DataError(f"predictions {preds.shape} and labels {labels.shape} differ in length")
    if len(labels) == 0:
        raise DataError("cannot compute accuracy of an empty set")
    return float((preds == labels).mean())


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K), rows = true class, cols = predicted
    class_names: list[str]

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.counts.sum())

    def row_percent(self) -> np.ndarray:
        totals = self.counts.sum(axis=1, keepdims=True)
        return 100.0 * self.counts / np.maximum(totals, 1)

    def render(self) -> str:
        """Paper-style text table: row percentages, sub-1% cells as '*'."""
        pct = self.row_percent()
        width = max(12, max(len(n) for n in self.class_names) + 2)
        header = " " * width + "".join(f"{n:>{width}}" for n in self.class_names)
        lines = [header]
        for i, name in enumerate(self.class_names):
            cells = []
            for j in range(len(self.class_names)):
                cells.append("*" if pct[i, j] < 1.0 else f"{pct[i, j]:.2f}%")
            lines.append(f"{name:<{width}}" + "".join(f"{c:>{width}}" for c in cells))
        return "\n".join(lines)


def confusion(preds: np.ndarray, labels: np.ndarray, k: int,
              class_names: list[str] | None = None) -> ConfusionMatrix:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k or preds.min() < 0 or preds.max() >= k:
        raise DataError(f"labels/predictions outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    names = class_names if class_names is not None else [str(i) for i in range(k)]
    if len(names) != k:
        raise DataError(f"expected {k} class names, got {len(names)}")
    return ConfusionMatrix(counts, list(names))


def rer(errors_worse: float, errors_better: float) -> float:
    """Relative error reduction (E1 - E2) / E1 from two error counts or rates."""
    if errors_worse <= 0:
        raise DataError("relative error reduction is undefined when the reference error is 0")
    if not 0 <= errors_better <= errors_worse:
        raise DataError(
            f"expected errors_worse > errors_better >= 0, got E1={errors_worse}, E2={errors_better}"
        )
    return (errors_worse - errors_better) / errors_worse


def rer_from_accuracy(acc_worse: float, acc_better: float) -> float:
    """RER from two accuracies measured on the same test set: the common
    set size cancels, leaving (acc_better - acc_worse) / (1 - acc_worse)."""
    return rer(1.0 - acc_worse, 1.0 - acc_better)


def binary_collapse(labels, real_classes) -> np.ndarray:
    """Map multi-class labels to 0 (real-source classes) / 1 (everything else).

    Accepts a label array or a manifest (list of records with a
    class_index attribute)."""
    if isinstance(labels, (list, tuple)) and labels and hasattr(labels[0], "class_index"):
        labels = [r.class_index for r in labels]
    labels = np.asarray(labels)
    real = set(int(c) for c in real_classes)
    if not real:
        raise DataError("need at least one real-source class")
    return np.where(np.isin(labels, sorted(real)), 0, 1).astype(labels.dtype)


@dataclass
class RobustnessGrid:
    """rows = training condition, cols = test condition, cells = accuracy."""

    row_labels: list[str]
    col_labels: list[str]
    cells: np.ndarray  # (rows, cols) accuracies

    def row_averages(self) -> np.ndarray:
        return self.cells.mean(axis=1)

    def render(self) -> str:
        width = max(10, max(len(l) for l in self.row_labels + self.col_labels) + 2)
        header = " " * width + "".join(f"{c:>{width}}" for c in self.col_labels)
        header += f"{'Average':>{width}}"
        lines = [header]
        for i, row in enumerate(self.row_labels):
            cells = "".join(f"{100 * v:>{width - 1}.2f}%" for v in self.cells[i])
            avg = f"{100 * self.cells[i].mean():>{width - 1}.2f}%"
            lines.append(f"{row:<{width}}" + cells + avg)
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["train_condition"] + self.col_labels + ["average"])
            for i, row in enumerate(self.row_labels):
                writer.writerow([row] + [repr(v) for v in self.cells[i]]
                                + [repr(float(self.cells[i].mean()))])


def robustness_grid(evaluate, row_labels: list[str], col_labels: list[str]) -> RobustnessGrid:
    """Fill the grid by calling evaluate(row_label, col_label) -> accuracy
    for every (training condition, test condition) pair."""
    cells = np.zeros((len(row_labels), len(col_labels)))
    for i, row in enumerate(row_labels):
        for j, col in enumerate(col_labels):
            cells[i, j] = evaluate(row, col)
    return RobustnessGrid(list(row_labels), list(col_labels), cells)
