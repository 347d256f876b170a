"""Class-wise confidence thresholds and thresholded pseudo-labels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import netpbm
from .numerics import Tensor

TAU_CAP = 0.9
TAU_DEFAULT = 0.9


@dataclass
class ThresholdTable:
    tau: dict[int, float]
    coverage: dict[int, int]

    @property
    def num_classes(self) -> int:
        return len(self.tau)

    def as_array(self) -> np.ndarray:
        """Thresholds indexed by class id - 1."""
        return np.array([self.tau[c] for c in range(1, self.num_classes + 1)], dtype=np.float64)


def _as_probs(dump) -> np.ndarray:
    arr = np.asarray(dump.data if isinstance(dump, Tensor) else dump)
    if arr.ndim != 3:
        raise ValueError(f"prediction dump must be [C,H,W], got shape {arr.shape}")
    drift = np.abs(arr.sum(axis=0, dtype=np.float64) - 1.0).max() if arr.size else 0.0
    if drift > 1e-4:
        raise ValueError(f"prediction dump is not a softmax output (class sums off by {drift:.2e})")
    return arr


def compute_class_thresholds(prediction_dumps: Iterable, num_classes: int | None = None) -> ThresholdTable:
    """tau_c = the top-50% confidence among pixels predicted as c, capped at 0.9.

    Confidences of every pixel argmax-classified as c are pooled over all dumps,
    sorted in descending order, and the entry at index floor(n/2) is taken.
    """
    per_class: dict[int, list[np.ndarray]] = {}
    n_dumps = 0
    for dump in prediction_dumps:
        probs = _as_probs(dump)
        if num_classes is None:
            num_classes = probs.shape[0]
        elif probs.shape[0] != num_classes:
            raise ValueError(f"dump has {probs.shape[0]} classes, expected {num_classes}")
        n_dumps += 1
        pred = np.argmax(probs, axis=0)
        conf = probs.max(axis=0)
        for c in np.unique(pred):
            per_class.setdefault(int(c) + 1, []).append(conf[pred == c])
    if n_dumps == 0:
        raise ValueError("compute_class_thresholds needs at least one prediction dump")

    tau, coverage = {}, {}
    for c in range(1, num_classes + 1):
        chunks = per_class.get(c)
        if not chunks:
            tau[c], coverage[c] = TAU_DEFAULT, 0
            continue
        values = np.sort(np.concatenate(chunks))[::-1]
        tau[c] = min(float(values[values.size // 2]), TAU_CAP)
        coverage[c] = int(values.size)
    return ThresholdTable(tau, coverage)


def generate_pseudo_labels(prediction, table: ThresholdTable) -> np.ndarray:
    """argmax class where its confidence strictly exceeds that class's tau, else 0."""
    probs = _as_probs(prediction)
    if probs.shape[0] != table.num_classes:
        raise ValueError(f"prediction has {probs.shape[0]} classes but the threshold table has {table.num_classes}")
    pred = np.argmax(probs, axis=0)
    conf = probs.max(axis=0)
    keep = conf > table.as_array()[pred]
    return np.where(keep, pred + 1, 0).astype(np.uint8)


def write_thresholds(path, table: ThresholdTable) -> None:
    lines = [f"tau.{c} = {table.tau[c]!r}" for c in sorted(table.tau)]
    lines += [f"coverage.{c} = {table.coverage[c]}" for c in sorted(table.coverage)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_thresholds(path) -> ThresholdTable:
    tau, coverage = {}, {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = key.strip(), value.strip()
            kind, _, cls = key.partition(".")
            if kind == "tau":
                tau[int(cls)] = float(value)
            elif kind == "coverage":
                coverage[int(cls)] = int(value)
    if sorted(tau) != list(range(1, len(tau) + 1)):
        raise ValueError(f"{path}: tau entries must cover classes 1..C, got {sorted(tau)}")
    for c in tau:
        coverage.setdefault(c, 0)
    return ThresholdTable(tau, coverage)


def write_pseudo_label(path, labels: np.ndarray) -> None:
    netpbm.write(path, np.asarray(labels, dtype=np.uint8))


def read_pseudo_label(path) -> np.ndarray:
    arr = netpbm.read(path)
    if arr.ndim != 2:
        raise ValueError(f"{path}: pseudo-labels must be a graymap")
    return arr


def coverage_fraction(labels: Sequence[np.ndarray]) -> float:
    total = sum(l.size for l in labels)
    return sum(int((l != 0).sum()) for l in labels) / total if total else 0.0
