"""Per-image Top-K class selection and the matching cost-volume / label pruning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractError, Tensor

IGNORE = -1


@dataclass(frozen=True)
class ClassSelection:
    selected: tuple[int, ...]   # original class indices, descending mean activation
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "selected", tuple(int(i) for i in self.selected))
        if len(set(self.selected)) != len(self.selected):
            raise ContractError("selected classes must be unique")
        if any(not 0 <= i < self.num_classes for i in self.selected):
            raise ContractError("selected class index out of range")

    @property
    def K(self) -> int:
        return len(self.selected)

    def __len__(self) -> int:
        return len(self.selected)

    def is_full(self) -> bool:
        return self.K >= self.num_classes


def class_means(probs: np.ndarray) -> np.ndarray:
    probs = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return probs.reshape(-1, probs.shape[-1]).mean(axis=0)


def select_topk(teacher_probs, K: int) -> ClassSelection:
    """Classes with the K largest mean probabilities; ties go to the lower index."""
    if K < 1:
        raise ValueError("K must be at least 1")
    means = class_means(teacher_probs)
    n = means.shape[0]
    # stable sort on the negated means keeps lower indices first among ties
    order = np.argsort(-means, kind="stable")
    return ClassSelection(tuple(order[: min(K, n)]), n)


def prune_cost_volume(cv: Tensor, sel: ClassSelection) -> Tensor:
    """Keep only the selected classes on the last (class) axis, in selection order."""
    if cv.shape[-1] != sel.num_classes:
        raise ContractError(f"cost volume has {cv.shape[-1]} classes, selection expects {sel.num_classes}")
    return cv.take(np.asarray(sel.selected), axis=cv.ndim - 1)


def remap_pseudo_labels(labels: np.ndarray, sel: ClassSelection) -> np.ndarray:
    """Map labels to positions within ``sel``; unselected classes become ``IGNORE``."""
    labels = np.asarray(labels)
    lut = np.full(sel.num_classes + 1, IGNORE, dtype=np.int64)
    lut[np.asarray(sel.selected, dtype=np.int64)] = np.arange(sel.K)
    out = np.where(labels == IGNORE, sel.num_classes, labels)
    return lut[out]


def unmap_labels(remapped: np.ndarray, sel: ClassSelection) -> np.ndarray:
    """Inverse of :func:`remap_pseudo_labels` on non-ignored pixels."""
    remapped = np.asarray(remapped)
    back = np.asarray(sel.selected, dtype=np.int64)
    return np.where(remapped == IGNORE, IGNORE, back[np.clip(remapped, 0, None)])


def randomized_selection(sel: ClassSelection, fraction: float, rng: np.random.Generator) -> ClassSelection:
    """Swap the ``floor(fraction * K)`` lowest-ranked picks for random unselected classes."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    pool = np.array([c for c in range(sel.num_classes) if c not in sel.selected], dtype=np.int64)
    n_replace = min(int(np.floor(fraction * sel.K + 1e-12)), len(pool))
    if n_replace == 0:
        return sel
    draws = rng.choice(pool, size=n_replace, replace=False)
    kept = list(sel.selected[: sel.K - n_replace])
    return ClassSelection(tuple(kept) + tuple(int(d) for d in draws), sel.num_classes)
