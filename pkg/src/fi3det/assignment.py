"""Center-based positive sample assignment.

Every box nominates the ``k`` interior locations closest to its center. A
location nominated by several boxes goes to the box whose center is
nearest; remaining ties go to the smaller box, then the lower box index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import points_in_box

DEFAULT_K = 6


@dataclass
class AssignmentResult:
    box_index: np.ndarray  # (M,) int, -1 = negative
    category: list  # (M,) category or None
    distance: np.ndarray  # (M,) distance to assigned center, inf for negatives
    empty_boxes: list  # boxes that nominated nothing

    def positives(self, j=None) -> np.ndarray:
        if j is None:
            return np.flatnonzero(self.box_index >= 0)
        return np.flatnonzero(self.box_index == j)

    def by_category(self) -> dict:
        out: dict = {}
        for m in self.positives():
            out.setdefault(self.category[m], []).append(m)
        return {c: np.asarray(v) for c, v in out.items()}


def _unpack(boxes):
    bs, cats = [], []
    for item in boxes:
        if isinstance(item, tuple):
            bs.append(item[0])
            cats.append(item[1])
        else:
            bs.append(item)
            cats.append(None)
    return bs, cats


def assign_centers(locations, boxes, k: int = DEFAULT_K) -> AssignmentResult:
    """``boxes`` is a sequence of ``(Box3, category)`` pairs (bare boxes allowed)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    loc = np.asarray(locations, dtype=np.float64).reshape(-1, 3)
    bs, cats = _unpack(boxes)
    m = len(loc)
    best_box = np.full(m, -1, dtype=np.int64)
    best_key = [None] * m
    dist = np.full(m, np.inf)
    empty = []
    for j, b in enumerate(bs):
        inside = np.flatnonzero(points_in_box(loc, b))
        if len(inside) == 0:
            empty.append(j)
            continue
        d = np.linalg.norm(loc[inside] - b.center, axis=1)
        # stable sort: distance, then location index
        order = np.lexsort((inside, d))[:k]
        for idx, dd in zip(inside[order], d[order]):
            key = (dd, b.volume, j)
            if best_key[idx] is None or key < best_key[idx]:
                best_key[idx] = key
                best_box[idx] = j
                dist[idx] = dd
    category = [cats[j] if j >= 0 else None for j in best_box]
    return AssignmentResult(best_box, category, dist, empty)
