"""Class-wise cosine-similarity feature alignment.

Source features that the network classifies correctly are stored per class in
a rolling FIFO dictionary. Target features are split per class (by the
augmented pseudo-label or by the current argmax), compared against the stored
source features of the same class, and every cosine above ``threshold`` is
pulled toward 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .numerics import Tensor, add_n, argmax_labels, scale
from .numerics.ops import ShapeError

NORM_EPS = 1e-8


@dataclass
class ClassSplit:
    """Pixel indices per class into a live ``[k,h,w]`` feature map."""

    feature: Tensor
    indices: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted(c for c, idx in self.indices.items() if idx.size)

    def count(self, c: int) -> int:
        idx = self.indices.get(c)
        return 0 if idx is None else int(idx.size)

    def vectors(self, c: int) -> Tensor:
        """Rows ``[n,k]`` for class c, still attached to the feature map's graph."""
        return gather_pixels(self.feature, self.indices.get(c, np.zeros(0, np.int64)))

    def values(self, c: int) -> np.ndarray:
        k = self.feature.shape[0]
        idx = self.indices.get(c, np.zeros(0, np.int64))
        return self.feature.data.reshape(k, -1)[:, idx].T.copy()

    def all_indices(self) -> np.ndarray:
        parts = [self.indices[c] for c in self.classes]
        return np.sort(np.concatenate(parts)) if parts else np.zeros(0, np.int64)


def gather_pixels(feature: Tensor, flat_idx: np.ndarray) -> Tensor:
    """Select pixels of ``feature[k,h,w]`` by flat index; returns ``[n,k]``."""
    k = feature.shape[0]
    flat = feature.data.reshape(k, -1)
    rows = flat[:, flat_idx].T

    def backward(g):
        full = np.zeros_like(flat)
        # indices are unique within a split, so plain assignment is safe
        full[:, flat_idx] = g.T
        return (full.reshape(feature.shape),)

    return Tensor.from_op(np.ascontiguousarray(rows), (feature,), backward)


def _split_by(feature: Tensor, governing: np.ndarray) -> ClassSplit:
    flat = governing.reshape(-1)
    indices = {}
    for c in np.unique(flat):
        if c == 0:
            continue
        indices[int(c)] = np.flatnonzero(flat == c)
    return ClassSplit(feature, indices)


def _check_spatial(feature: Tensor, other: np.ndarray, what: str) -> None:
    if feature.ndim != 3:
        raise ShapeError(f"feature map must be [k,h,w], got shape {feature.shape}")
    if tuple(other.shape[-2:]) != tuple(feature.shape[1:]):
        raise ShapeError(f"{what} spatial shape {tuple(other.shape[-2:])} != feature shape {feature.shape[1:]}")


def split_source(feature: Tensor, logits: Tensor | np.ndarray, label_small: np.ndarray) -> ClassSplit:
    """Keep features whose argmax prediction equals the (resized) ground truth."""
    logits_data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    label_small = np.asarray(label_small)
    _check_spatial(feature, logits_data, "logits")
    _check_spatial(feature, label_small, "label")
    pred = argmax_labels(logits_data)
    correct = np.where((pred == label_small) & (label_small != 0), pred, 0)
    return _split_by(feature, correct)


def split_source_by_prediction(feature: Tensor, pred_classes: np.ndarray, label_small: np.ndarray) -> ClassSplit:
    """As ``split_source`` but with precomputed predicted classes (multi-tap path)."""
    pred_classes, label_small = np.asarray(pred_classes), np.asarray(label_small)
    _check_spatial(feature, pred_classes, "prediction")
    _check_spatial(feature, label_small, "label")
    correct = np.where((pred_classes == label_small) & (label_small != 0), pred_classes, 0)
    return _split_by(feature, correct)


def augment_pseudo_label(pseudo_small: np.ndarray, pred_classes: np.ndarray) -> np.ndarray:
    pseudo_small, pred_classes = np.asarray(pseudo_small), np.asarray(pred_classes)
    if pseudo_small.shape != pred_classes.shape:
        raise ShapeError(f"pseudo-label shape {pseudo_small.shape} != prediction shape {pred_classes.shape}")
    return np.where(pseudo_small != 0, pseudo_small, pred_classes)


def split_target(feature: Tensor, governing: np.ndarray) -> ClassSplit:
    governing = np.asarray(governing)
    _check_spatial(feature, governing, "governing map")
    return _split_by(feature, governing)


class FeatureDictionary:
    """Per-class FIFO of detached k-vectors, oldest first."""

    def __init__(self, capacity: int, feature_dim: int):
        if capacity < 1:
            raise ValueError(f"dictionary capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.feature_dim = feature_dim
        self.buckets: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return sum(b.shape[0] for b in self.buckets.values())

    def bucket(self, c: int) -> np.ndarray:
        b = self.buckets.get(c)
        return np.zeros((0, self.feature_dim), np.float32) if b is None else b

    def push(self, c: int, vectors: np.ndarray) -> None:
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[1] != self.feature_dim:
            raise ShapeError(f"expected vectors of shape [n,{self.feature_dim}], got {vectors.shape}")
        if vectors.shape[0] == 0:
            return
        old = self.buckets.get(c)
        merged = vectors if old is None else np.concatenate([old, vectors], axis=0)
        self.buckets[c] = np.array(merged[-self.capacity :], copy=True)

    def enqueue(self, split: ClassSplit) -> None:
        for c in split.classes:
            self.push(c, split.values(c))

    @classmethod
    def from_split(cls, split: ClassSplit) -> "FeatureDictionary":
        """A bank holding exactly the current split (no history)."""
        k = split.feature.shape[0]
        d = cls(max([split.count(c) for c in split.classes] + [1]), k)
        d.enqueue(split)
        return d

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for c in sorted(self.buckets):
            for slot, vec in enumerate(self.buckets[c]):
                out[f"{c}/{slot}"] = vec
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        per_class: dict[int, list[tuple[int, np.ndarray]]] = {}
        for key, vec in state.items():
            c, slot = key.split("/")
            per_class.setdefault(int(c), []).append((int(slot), np.asarray(vec, np.float32).reshape(-1)))
        self.buckets = {}
        for c, items in per_class.items():
            items.sort(key=lambda t: t[0])
            self.push(c, np.stack([v for _, v in items]))


def cosine_matrix(targets: Tensor | np.ndarray, bank: np.ndarray) -> Tensor | None:
    """Cosines ``[n,m]`` between target rows and bank rows; ``None`` if the bank is empty.

    Norms are floored at 1e-8. The bank is a constant: no gradient reaches it.
    """
    if not isinstance(targets, Tensor):
        targets = Tensor(targets)
    bank = np.asarray(bank)
    if bank.ndim != 2 or bank.shape[0] == 0:
        return None
    if targets.ndim != 2 or targets.shape[0] == 0:
        raise ShapeError(f"targets must be a nonempty [n,k] matrix, got {targets.shape}")
    if targets.shape[1] != bank.shape[1]:
        raise ShapeError(f"feature size mismatch: targets k={targets.shape[1]}, bank k={bank.shape[1]}")
    dtype = targets.data.dtype
    t = targets.data
    b = bank.astype(dtype, copy=False)
    t_norm = np.maximum(np.sqrt((t * t).sum(axis=1)), dtype.type(NORM_EPS))
    b_norm = np.maximum(np.sqrt((b * b).sum(axis=1)), dtype.type(NORM_EPS))
    u = t / t_norm[:, None]
    b_unit = b / b_norm[:, None]
    values = u @ b_unit.T
    floored = t_norm <= NORM_EPS

    def backward(g):
        gu = g @ b_unit
        radial = (gu * u).sum(axis=1, keepdims=True)
        gt = np.where(floored[:, None], gu, gu - u * radial) / t_norm[:, None]
        return (gt,)

    return Tensor.from_op(values, (targets,), backward)


@dataclass
class SimilarityMatrix:
    class_id: int
    values: Tensor
    threshold: float

    @property
    def mask(self) -> np.ndarray:
        return self.values.data > self.threshold

    @property
    def selected(self) -> int:
        return int(self.mask.sum())


def selected_l1(values: Tensor, mask: np.ndarray, target: float = 1.0) -> Tensor:
    """Sum of |v - target| over the entries where mask is true."""
    dev = values.data - values.data.dtype.type(target)
    out = np.asarray(np.abs(dev)[mask].sum(), dtype=values.data.dtype)
    sign = np.sign(dev) * mask
    return Tensor.from_op(out, (values,), lambda g: (g * sign,))


def class_similarities(split: ClassSplit, dictionary: FeatureDictionary, threshold: float) -> tuple[list[SimilarityMatrix], list[int]]:
    """Build one matrix per class present in the split; report classes with an empty bank."""
    matrices, skipped = [], []
    for c in split.classes:
        values = cosine_matrix(split.vectors(c), dictionary.bucket(c))
        if values is None:
            skipped.append(c)
        else:
            matrices.append(SimilarityMatrix(c, values, threshold))
    return matrices, skipped


def cosine_loss(matrices: Sequence[SimilarityMatrix], threshold: float, num_classes: int) -> Tensor:
    """(1/C) * sum over classes of the L1 gap to 1 of entries above ``threshold``."""
    if not -1.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (-1, 1), got {threshold}")
    terms = [selected_l1(m.values, m.values.data > threshold) for m in matrices]
    if not terms:
        return Tensor(0.0)
    return scale(add_n(terms), 1.0 / num_classes)


def multi_layer_thresholds(baseline: float, num_taps: int = 3, increment: float = 0.1) -> list[float]:
    """Deepest tap gets ``baseline``; each shallower tap adds ``increment``."""
    return [round(baseline + increment * i, 10) for i in range(num_taps)]


def multi_layer_cosine_loss(
    splits: Sequence[ClassSplit],
    dictionaries: Sequence[FeatureDictionary],
    baseline_threshold: float,
    num_classes: int,
    num_taps: int = 3,
) -> tuple[Tensor, list[list[int]]]:
    """Per-tap losses with rising thresholds, normalized by 1/(num_taps * C).

    Returns the loss and, per tap, the classes skipped for lack of source features.
    """
    if len(splits) != num_taps or len(dictionaries) != num_taps:
        raise ValueError(f"expected {num_taps} taps, got {len(splits)} splits and {len(dictionaries)} dictionaries")
    per_tap, skipped = [], []
    for split, dictionary, thr in zip(splits, dictionaries, multi_layer_thresholds(baseline_threshold, num_taps)):
        matrices, miss = class_similarities(split, dictionary, thr)
        per_tap.append(cosine_loss(matrices, thr, num_classes))
        skipped.append(miss)
    return scale(add_n(per_tap), 1.0 / num_taps), skipped


def unsplit_cosine_loss(
    target_feature: Tensor,
    target_governing: np.ndarray,
    source_feature: Tensor,
    source_label: np.ndarray,
    threshold: float,
    num_classes: int,
) -> tuple[Tensor, SimilarityMatrix | None]:
    """One class-agnostic matrix between all eligible target and source pixels."""
    tgt = split_target(target_feature, np.where(np.asarray(target_governing) != 0, 1, 0))
    src = split_target(source_feature, np.where(np.asarray(source_label) != 0, 1, 0))
    if not tgt.classes or not src.classes:
        return Tensor(0.0), None
    values = cosine_matrix(tgt.vectors(1), src.values(1))
    matrix = SimilarityMatrix(0, values, threshold)
    return cosine_loss([matrix], threshold, num_classes), matrix


def total_loss(stage: int, seg_source: Tensor, seg_target: Tensor | None, cos: Tensor, lambda_cos: float) -> Tensor:
    if stage == 1:
        terms = [seg_source]
    elif stage == 2:
        if seg_target is None:
            raise ValueError("stage 2 needs the target segmentation loss from pseudo-labels")
        terms = [seg_source, seg_target]
    else:
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if lambda_cos:
        terms.append(scale(cos, lambda_cos))
    return add_n(terms)
