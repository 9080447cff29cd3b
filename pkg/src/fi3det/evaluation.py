"""Detection matching and mean average precision (Base / Novel / All)."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySplit, ZeroGroundTruth
from .geometry import Box3, iou3d, nms

log = logging.getLogger(__name__)

IOU_THRESH = 0.25


@dataclass(frozen=True, eq=False)
class Detection:
    box: Box3
    category: str
    score: float
    scene_id: str

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("detection score must be finite")

    def to_dict(self) -> dict:
        return {"scene_id": self.scene_id, "category": self.category,
                "box": [float(v) for v in self.box.to_array()], "score": float(self.score)}

    @classmethod
    def from_dict(cls, d) -> "Detection":
        return cls(Box3.from_array(d["box"]), d["category"], float(d.get("score", 1.0)), str(d["scene_id"]))

    def key(self) -> tuple:
        """Exact, hashable identity (used for bit-level comparisons)."""
        return (self.scene_id, self.category, self.box.to_array().tobytes(), float(self.score))


def score_order(scores) -> np.ndarray:
    """Descending score, ties broken by input index."""
    s = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(s)), -s))


def match_detections(det_boxes, scores, gt_boxes, iou_thresh: float = IOU_THRESH, aligned: bool = False) -> np.ndarray:
    """TP flags for one category in one scene, in descending-score order.

    Each detection is matched to the unconsumed ground truth box with the
    highest IoU; it is a true positive iff that IoU reaches ``iou_thresh``.
    """
    if not 0 < iou_thresh < 1:
        raise ValueError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    order = score_order(scores)
    free = np.ones(len(gt_boxes), dtype=bool)
    flags = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        if not free.any():
            break
        ious = np.array([iou3d(det_boxes[i], g, aligned) if free[k] else -1.0 for k, g in enumerate(gt_boxes)])
        k = int(np.argmax(ious))
        if ious[k] >= iou_thresh:
            flags[rank] = True
            free[k] = False
    return flags


def average_precision(flags, n_gt: int, mode: str = "all_point") -> float:
    """Area under the monotone PR envelope; ``flags`` sorted by score."""
    if n_gt < 1:
        raise ZeroGroundTruth("average precision needs at least one ground truth box")
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    if len(tp) == 0:
        return 0.0
    fp = np.arange(1, len(tp) + 1) - tp
    recall = tp / n_gt
    precision = tp / (tp + fp)
    if mode == "11_point":
        return float(np.mean([precision[recall >= t].max() if np.any(recall >= t) else 0.0
                              for t in np.linspace(0, 1, 11)]))
    if mode != "all_point":
        raise ValueError(f"unknown AP mode {mode!r}")
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def category_ap(dets, gts, category, iou_thresh=IOU_THRESH, aligned=False, mode="all_point"):
    """AP of one category over all scenes; returns (ap, n_gt)."""
    gt_by_scene: dict = {}
    for g in gts:
        if g.category == category:
            gt_by_scene.setdefault(g.scene_id, []).append(g.box)
    n_gt = sum(len(v) for v in gt_by_scene.values())
    mine = [d for d in dets if d.category == category]
    records = []  # (score, global index, flag)
    by_scene: dict = {}
    for i, d in enumerate(mine):
        by_scene.setdefault(d.scene_id, []).append(i)
    for scene, idx in by_scene.items():
        scores = [mine[i].score for i in idx]
        flags = match_detections([mine[i].box for i in idx], scores, gt_by_scene.get(scene, []), iou_thresh, aligned)
        for rank, o in enumerate(score_order(scores)):
            records.append((mine[idx[o]].score, idx[o], bool(flags[rank])))
    if n_gt == 0:
        return None, 0
    records.sort(key=lambda r: (-r[0], r[1]))
    return average_precision([r[2] for r in records], n_gt, mode), n_gt


@dataclass
class MetricsReport:
    per_category: dict
    gt_counts: dict
    base: list
    novel: list
    base_map: float
    novel_map: float
    all_map: float
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"base_map": self.base_map, "novel_map": self.novel_map, "all_map": self.all_map,
                "per_category": dict(self.per_category), "gt_counts": dict(self.gt_counts),
                "base": list(self.base), "novel": list(self.novel), "meta": dict(self.meta)}

    def row(self) -> list:
        """Base / Novel / All as percentages, two decimals."""
        pct = lambda v: "" if v is None or np.isnan(v) else f"{100 * v:.2f}"
        return [pct(self.base_map), pct(self.novel_map), pct(self.all_map)]


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


def map_report(dets, gts, base, novel, iou_thresh=IOU_THRESH, aligned=False, mode="all_point", meta=None) -> MetricsReport:
    base, novel = list(base), list(novel)
    cats = base + novel
    if not cats:
        raise EmptySplit("split has no categories")
    uncovered = {g.category for g in gts} - set(cats)
    if uncovered:
        raise EmptySplit(f"ground truth categories outside the split: {sorted(uncovered)}")
    per_cat, counts = {}, {}
    for c in cats:
        ap, n = category_ap(dets, gts, c, iou_thresh, aligned, mode)
        counts[c] = n
        if ap is None:
            log.warning("category %s has no ground truth; excluded from means", c)
        per_cat[c] = ap
    return MetricsReport(per_cat, counts, base, novel, _mean(per_cat[c] for c in base),
                         _mean(per_cat[c] for c in novel), _mean(per_cat[c] for c in cats), dict(meta or {}))


def nms_per_scene(dets, iou_thresh: float = 0.5, aligned: bool = False) -> list:
    """Class-wise greedy NMS per scene for raw proposal inputs."""
    groups: dict = {}
    for i, d in enumerate(dets):
        groups.setdefault((d.scene_id, d.category), []).append(i)
    keep = []
    for idx in groups.values():
        kept = nms([dets[i].box for i in idx], [dets[i].score for i in idx], iou_thresh, aligned)
        keep.extend(idx[k] for k in kept)
    return [dets[i] for i in sorted(keep)]


def read_jsonl(path) -> list[Detection]:
    out = []
    with open(os.fspath(path)) as fh:
        for line in fh:
            if line.strip():
                out.append(Detection.from_dict(json.loads(line)))
    return out


def write_jsonl(path, dets) -> None:
    with open(os.fspath(path), "w") as fh:
        for d in dets:
            fh.write(json.dumps(d.to_dict()) + "\n")
