"""Soft confidence weights for pseudo-box supervision.

Each (point, pseudo box) pair inside the box gets a Gaussian spatial weight
around the box center; each box gets a semantic-consistency weight equal to
the norm of the mean unit aligned feature of its member points. The
supervision target is their product.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyBox, InvalidSigma, ZeroNormFeature
from .geometry import points_in_box

DEFAULT_SIGMA = 0.5


def point_weight(p, c, sigma: float = DEFAULT_SIGMA, half_extent=None):
    """exp(-|p - c|^2 / (2 sigma^2)); vectorized over rows of ``p``.

    If ``half_extent`` is given, offsets are divided by it per axis first
    (size-normalized mode).
    """
    if not sigma > 0:
        raise InvalidSigma(f"sigma must be positive, got {sigma}")
    d = np.asarray(p, dtype=np.float64) - np.asarray(c, dtype=np.float64)
    if half_extent is not None:
        d = d / np.asarray(half_extent, dtype=np.float64)
    return np.exp(-np.sum(d * d, axis=-1) / (2.0 * sigma * sigma))


def box_weight(aligned_feats) -> float:
    f = np.asarray(aligned_feats, dtype=np.float64)
    if f.ndim == 1:
        f = f[None, :]
    if len(f) == 0:
        raise EmptyBox("no features inside box")
    norms = np.linalg.norm(f, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise ZeroNormFeature("box_weight needs nonzero, finite features")
    return min(1.0, float(np.linalg.norm((f / norms[:, None]).mean(axis=0))))


@dataclass
class WeightField:
    """Sparse (point, box) weights in COO layout.

    ``box_weight`` is indexed by box; boxes without interior points are
    NaN there and counted in ``n_dropped``.
    """

    point_index: np.ndarray
    box_index: np.ndarray
    point_weight: np.ndarray
    box_weight: np.ndarray
    sigma: float
    n_dropped: int = 0
    n_excluded_zero: int = 0

    @property
    def weight(self) -> np.ndarray:
        return self.box_weight[self.box_index] * self.point_weight

    def __len__(self):
        return len(self.point_index)

    def entries(self, j: int) -> np.ndarray:
        """Indices into the COO arrays belonging to box ``j``."""
        return np.flatnonzero(self.box_index == j)

    def as_dict(self) -> dict:
        return {(int(e), int(j)): float(w) for e, j, w in zip(self.point_index, self.box_index, self.weight)}

    def to_blocks(self) -> dict:
        return {
            "pair_index": np.column_stack([self.point_index, self.box_index]).astype(np.uint32).reshape(-1, 2),
            "point_weight": self.point_weight,
            "box_weight": np.nan_to_num(self.box_weight, nan=0.0),
            "weight": self.weight,
        }


def combined_weights(points, boxes, aligned_feats, sigma: float = DEFAULT_SIGMA,
                     normalized: bool = False, use_point: bool = True, use_box: bool = True) -> WeightField:
    """Weight field for ``boxes`` (Box3 or objects with ``.box``) over scene points.

    Zero-norm aligned features (e.g. empty background) still receive an
    entry but are left out of the box-consistency mean. ``use_point`` /
    ``use_box`` switch either factor to a constant 1 for ablations.
    """
    if not sigma > 0:
        raise InvalidSigma(f"sigma must be positive, got {sigma}")
    pts = np.asarray(points, dtype=np.float64)[:, :3]
    feats = np.asarray(aligned_feats, dtype=np.float64)
    if len(feats) != len(pts):
        raise ValueError(f"aligned_feats has {len(feats)} rows for {len(pts)} points")
    norms = np.linalg.norm(feats, axis=1)
    nonzero = norms > 0
    pi, bi, pw = [], [], []
    bw = np.full(len(boxes), np.nan)
    dropped = excluded = 0
    for j, obj in enumerate(boxes):
        box = getattr(obj, "box", obj)
        members = np.flatnonzero(points_in_box(pts, box))
        if len(members) == 0:
            dropped += 1
            continue
        usable = members[nonzero[members]]
        excluded += len(members) - len(usable)
        if use_box:
            if len(usable) == 0:
                dropped += 1
                continue
            bw[j] = box_weight(feats[usable])
        else:
            bw[j] = 1.0
        if use_point:
            half = 0.5 * box.size if normalized else None
            w = point_weight(pts[members], box.center, sigma, half)
        else:
            w = np.ones(len(members))
        pi.append(members)
        bi.append(np.full(len(members), j))
        pw.append(w)
    cat = (lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt))
    return WeightField(cat(pi, np.int64), cat(bi, np.int64), cat(pw, np.float64), bw, float(sigma),
                       dropped, excluded)
