from __future__ import annotations

import json
import os
from typing import Iterable, Sequence

import numpy as np

CSV_HEADER = "iter,miou,loss_seg,loss_cos,loss_adv"


class ConfusionMatrix:
    """Counts indexed [ground truth - 1, prediction - 1]; label 0 in gt is skipped."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        valid = gt != 0
        p, g = pred[valid].astype(np.int64), gt[valid].astype(np.int64)
        for name, arr in (("prediction", p), ("ground truth", g)):
            if arr.size and (arr.min() < 1 or arr.max() > self.num_classes):
                raise ValueError(f"{name} class id out of range 1..{self.num_classes}")
        flat = (g - 1) * self.num_classes + (p - 1)
        self.counts += np.bincount(flat, minlength=self.num_classes**2).reshape(self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self


def miou(cm: ConfusionMatrix, class_subset: Sequence[int] | None = None) -> tuple[list[float], float]:
    """Per-class IoU (NaN where the union is empty) and their mean over the subset.

    Classes whose union is empty are left out of the mean.
    """
    if cm.total == 0:
        raise ValueError("miou needs a nonempty confusion matrix")
    diag = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - diag
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, diag / np.maximum(union, 1), np.nan)
    if class_subset is None:
        classes = list(range(1, cm.num_classes + 1))
    else:
        classes = list(class_subset)
        if not classes:
            raise ValueError("class_subset must not be empty")
    picked = [iou[c - 1] for c in classes if not np.isnan(iou[c - 1])]
    mean = float(np.mean(picked)) if picked else float("nan")
    return [float(v) for v in iou], mean


def format_row(iteration: int, miou_value: float, loss_seg: float, loss_cos: float, loss_adv: float) -> str:
    return f"{iteration},{miou_value:.6f},{loss_seg:.6f},{loss_cos:.6f},{loss_adv:.6f}"


class MetricsLog:
    """Writes the CSV curve and the per-class JSON-lines record side by side."""

    def __init__(self, csv_path, jsonl_path, keep_until: int | None = None):
        """``keep_until`` preserves earlier rows up to that iteration (resumed runs)."""
        self.csv_path, self.jsonl_path = csv_path, jsonl_path
        self.rows: list[str] = []
        records: list[str] = []
        if keep_until is not None and os.path.exists(csv_path):
            with open(csv_path, encoding="utf-8") as fh:
                self.rows = [r.strip() for r in fh.readlines()[1:] if int(r.split(",")[0]) <= keep_until]
            if os.path.exists(jsonl_path):
                with open(jsonl_path, encoding="utf-8") as fh:
                    records = [r for r in fh if json.loads(r)["iter"] <= keep_until]
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write(CSV_HEADER + "\n" + "".join(r + "\n" for r in self.rows))
        with open(jsonl_path, "w", encoding="utf-8") as fh:
            fh.write("".join(records))

    def append(self, iteration: int, per_class: Iterable[float], miou_value: float, losses: dict[str, float]) -> None:
        row = format_row(iteration, miou_value, losses["seg"], losses["cos"], losses["adv"])
        self.rows.append(row)
        with open(self.csv_path, "a", encoding="utf-8") as fh:
            fh.write(row + "\n")
        record = {
            "iter": iteration,
            "miou": round(miou_value, 6),
            "iou": [None if np.isnan(v) else round(v, 6) for v in per_class],
        }
        with open(self.jsonl_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")


def read_metrics_csv(path) -> list[dict[str, float]]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        rows = []
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != 5:
                raise ValueError(f"{path}: malformed row {line!r}")
            rows.append({"iter": int(parts[0]), **{k: float(v) for k, v in zip(CSV_HEADER.split(",")[1:], parts[1:])}})
    return rows
