"""Auxiliary unknown-object losses and the incremental gate loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyRegion, ShapeMismatch, ZeroNormFeature
from .geometry import diou3d

PROB_EPS = 1e-7
DICE_SMOOTH = 1e-6


def bce_dice_objectness(pred_o, target_w, region=None, eps: float = PROB_EPS, smooth: float = DICE_SMOOTH) -> float:
    """Mean binary cross-entropy plus soft Dice, over the supervised region.

    Dice uses squared denominators, 1 - (2 sum(pw) + s) / (sum(p^2) + sum(w^2) + s),
    so it vanishes whenever predictions equal soft targets.
    """
    p = np.asarray(pred_o, dtype=np.float64).reshape(-1)
    w = np.asarray(target_w, dtype=np.float64).reshape(-1)
    if p.shape != w.shape:
        raise ShapeMismatch(f"pred {p.shape} vs target {w.shape}")
    if region is not None:
        region = np.asarray(region, dtype=bool).reshape(-1)
        p, w = p[region], w[region]
    if len(p) == 0:
        raise EmptyRegion("objectness supervision region is empty")
    p = np.clip(p, eps, 1.0 - eps)
    bce = -np.mean(w * np.log(p) + (1.0 - w) * np.log1p(-p))
    dice = 1.0 - (2.0 * np.sum(p * w) + smooth) / (np.sum(p * p) + np.sum(w * w) + smooth)
    return float(bce + dice)


def cosine_alignment_loss(aligned_feats, instance_feat, weights, z=None) -> float:
    """(1/Z) sum_e (1 - cos(f_e, f_j)) w_e; Z defaults to the member count."""
    f = np.atleast_2d(np.asarray(aligned_feats, dtype=np.float64))
    g = np.asarray(instance_feat, dtype=np.float64).reshape(-1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != len(f):
        raise ShapeMismatch(f"{len(w)} weights for {len(f)} features")
    nf, ng = np.linalg.norm(f, axis=1), np.linalg.norm(g)
    if ng == 0 or np.any(nf == 0):
        raise ZeroNormFeature("cosine alignment needs nonzero features")
    z = len(f) if z is None else z
    if not z > 0:
        raise ValueError(f"normalizer must be positive, got {z}")
    cos = np.clip((f @ g) / (nf * ng), -1.0, 1.0)
    return float(np.sum((1.0 - cos) * w) / z)


def weighted_diou_regression(pred_boxes, pseudo_box, weights, z=None, aligned: bool = False) -> float:
    """(1/Z) sum_e (1 - DIoU(pred_e, pseudo)) w_e."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != len(pred_boxes):
        raise ShapeMismatch(f"{len(w)} weights for {len(pred_boxes)} predicted boxes")
    z = len(w) if z is None else z
    if not z > 0:
        raise ValueError(f"normalizer must be positive, got {z}")
    terms = np.array([1.0 - diou3d(b, pseudo_box, aligned) for b in pred_boxes])
    return float(np.sum(terms * w) / z) if len(w) else 0.0


def incremental_loss(s, y) -> float:
    """Mean of (1 - s) y + s (1 - y) over all entries (rows are samples)."""
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if s.shape != y.shape:
        raise ShapeMismatch(f"scores {s.shape} vs targets {y.shape}")
    if s.size == 0:
        raise ShapeMismatch("empty score matrix")
    return float(np.mean((1.0 - s) * y + s * (1.0 - y)))


def incremental_loss_grad(s, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return (1.0 - 2.0 * y) / y.size


@dataclass
class LossReport:
    obj: float = 0.0
    feat: float = 0.0
    reg: float = 0.0
    inc: float = 0.0
    n_points: int = 0
    n_boxes: int = 0
    skipped: list = field(default_factory=list)

    @property
    def aux_total(self) -> float:
        return self.obj + self.feat + self.reg

    def to_dict(self) -> dict:
        return {"obj": self.obj, "feat": self.feat, "reg": self.reg, "aux_total": self.aux_total,
                "inc": self.inc, "n_points": self.n_points, "n_boxes": self.n_boxes,
                "skipped": list(self.skipped)}


def aux_total(obj: float, feat: float, reg: float, n_points: int = 0, n_boxes: int = 0) -> LossReport:
    return LossReport(obj=float(obj), feat=float(feat), reg=float(reg), n_points=n_points, n_boxes=n_boxes)


def scene_aux_losses(field_, pseudo_objects, pred_objectness, aligned_feats, pred_boxes, aligned: bool = False) -> LossReport:
    """All three auxiliary terms for one scene.

    ``field_`` is the scene's WeightField; ``pred_boxes[e]`` is the box the
    regression head predicts at point ``e``. The feature and regression
    terms are per-box normalized sums, averaged over supervised boxes.
    """
    report = LossReport()
    if len(field_) == 0:
        report.skipped.append("EmptyRegion")
        return report
    w = field_.weight
    report.obj = bce_dice_objectness(np.asarray(pred_objectness)[field_.point_index], w)
    feats = np.asarray(aligned_feats, dtype=np.float64)
    feat_terms, reg_terms = [], []
    for j in np.unique(field_.box_index):
        sel = field_.entries(j)
        members = field_.point_index[sel]
        usable = np.linalg.norm(feats[members], axis=1) > 0
        if usable.any():
            feat_terms.append(cosine_alignment_loss(feats[members[usable]], pseudo_objects[j].feature,
                                                    w[sel][usable], z=len(members)))
        reg_terms.append(weighted_diou_regression([pred_boxes[e] for e in members], pseudo_objects[j].box,
                                                  w[sel], z=len(members), aligned=aligned))
    report.feat = float(np.mean(feat_terms)) if feat_terms else 0.0
    report.reg = float(np.mean(reg_terms))
    report.n_points = int(len(np.unique(field_.point_index)))
    report.n_boxes = int(len(reg_terms))
    return report
