"""Ingest externally produced VLM frame outputs and mine pseudo 3D objects.

A frame carries a depth map, a pinhole camera with a camera-to-world pose,
``J`` binary instance masks and a 2D feature source (a dense ``H x W x K``
map or ``J`` precomputed vectors). Each mask is lifted to world points,
boxed, and paired with its pooled feature; per-scene candidates from all
frames are merged and filtered against annotated base boxes.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_fi3d, write_fi3d
from .errors import (
    DegenerateGeometry,
    EmptyInput,
    EmptyMask,
    FormatError,
    InsufficientDepth,
    NonOrthonormalPose,
    ShapeMismatch,
)
from .geometry import Box3, fit_box, iou3d

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray  # 4x4 camera-to-world

    def __post_init__(self):
        pose = np.array(self.pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise ShapeMismatch(f"pose must be 4x4, got {pose.shape}")
        if not (self.fx > 0 and self.fy > 0):
            raise FormatError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        rot = pose[:3, :3]
        if (
            not np.all(np.isfinite(pose))
            or np.abs(rot.T @ rot - np.eye(3)).max() > ORTHO_TOL
            or abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL
            or np.abs(pose[3] - [0, 0, 0, 1]).max() > ORTHO_TOL
        ):
            raise NonOrthonormalPose("pose rotation block is not a proper rotation")
        pose.setflags(write=False)
        object.__setattr__(self, "pose", pose)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])


@dataclass(eq=False)
class VlmFrame:
    depth: np.ndarray  # H x W, meters, 0 = invalid
    camera: CameraModel
    masks: np.ndarray  # J x H x W bool
    featmap: np.ndarray | None = None  # H x W x K
    maskfeat: np.ndarray | None = None  # J x K
    frame_id: str = ""

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2:
            raise ShapeMismatch(f"depth must be H x W, got {self.depth.shape}")
        h, w = self.depth.shape
        masks = np.asarray(self.masks)
        if masks.ndim == 2 and masks.size == 0:
            masks = masks.reshape(0, h, w)
        if masks.ndim != 3 or masks.shape[1:] != (h, w):
            raise ShapeMismatch(f"masks {masks.shape} do not match depth {self.depth.shape}")
        self.masks = masks.astype(bool)
        if (self.featmap is None) == (self.maskfeat is None):
            raise FormatError("exactly one of featmap / maskfeat must be provided")
        if self.featmap is not None:
            self.featmap = np.asarray(self.featmap, dtype=np.float64)
            if self.featmap.ndim != 3 or self.featmap.shape[:2] != (h, w) or self.featmap.shape[2] == 0:
                raise ShapeMismatch(f"featmap {self.featmap.shape} does not match depth {self.depth.shape}")
        else:
            self.maskfeat = np.asarray(self.maskfeat, dtype=np.float64)
            if self.maskfeat.ndim != 2 or self.maskfeat.shape[0] != len(self.masks) or self.maskfeat.shape[1] == 0:
                raise ShapeMismatch(f"maskfeat {self.maskfeat.shape} does not match {len(self.masks)} masks")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def n_masks(self) -> int:
        return len(self.masks)

    @property
    def feature_dim(self) -> int:
        src = self.featmap if self.featmap is not None else self.maskfeat
        return src.shape[-1]


@dataclass(frozen=True, eq=False)
class PseudoObject:
    box: Box3
    feature: np.ndarray
    support_count: int
    source_frame: str
    points: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "box": self.box.to_array().tolist(),
            "feature": np.asarray(self.feature).tolist(),
            "support_count": int(self.support_count),
            "source_frame": self.source_frame,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PseudoObject":
        return cls(Box3.from_array(d["box"]), np.asarray(d["feature"], dtype=np.float64),
                   int(d["support_count"]), d["source_frame"])


@dataclass
class MiningConfig:
    min_points: int = 20
    merge_iou: float = 0.5
    gt_suppress_iou: float = 0.25
    fit_mode: str = "axis_aligned"
    merge: bool = True
    suppress_gt: bool = True
    aligned_iou: bool = False


# ---------------------------------------------------------------- file io

_REQUIRED = ("depth", "intrinsics", "pose", "masks")


def frame_to_blocks(frame: VlmFrame) -> dict:
    blocks = {
        "depth": frame.depth,
        "intrinsics": frame.camera.intrinsics,
        "pose": frame.camera.pose,
        "masks": frame.masks,
    }
    if frame.featmap is not None:
        blocks["featmap"] = np.transpose(frame.featmap, (2, 0, 1))
    else:
        blocks["maskfeat"] = frame.maskfeat
    return blocks


def save_vlm_frame(path, frame: VlmFrame) -> None:
    write_fi3d(path, frame_to_blocks(frame))


def frame_from_blocks(blocks: dict, frame_id: str = "") -> VlmFrame:
    missing = [k for k in _REQUIRED if k not in blocks]
    if missing:
        raise FormatError(f"missing required blocks: {missing}")
    if ("featmap" in blocks) == ("maskfeat" in blocks):
        raise FormatError("frame needs exactly one of 'featmap' or 'maskfeat'")
    intr = np.asarray(blocks["intrinsics"], dtype=np.float64)
    pose = np.asarray(blocks["pose"], dtype=np.float64)
    if intr.shape != (4,):
        raise ShapeMismatch(f"intrinsics must have 4 entries, got {intr.shape}")
    if pose.size != 16:
        raise ShapeMismatch(f"pose must have 16 entries, got {pose.shape}")
    camera = CameraModel(*intr.tolist(), pose=pose.reshape(4, 4))
    featmap = None
    if "featmap" in blocks:
        fm = np.asarray(blocks["featmap"], dtype=np.float64)
        if fm.ndim != 3:
            raise ShapeMismatch(f"featmap must be K x H x W, got {fm.shape}")
        featmap = np.transpose(fm, (1, 2, 0))
    maskfeat = blocks.get("maskfeat")
    return VlmFrame(blocks["depth"], camera, blocks["masks"], featmap=featmap,
                    maskfeat=maskfeat, frame_id=frame_id)


def load_vlm_frame(path) -> VlmFrame:
    """Read and validate one FI3D frame file."""
    return frame_from_blocks(read_fi3d(path), frame_id=Path(path).stem)


# ---------------------------------------------------------------- lifting

def backproject(depth, camera: CameraModel, pixels_uv) -> np.ndarray:
    """World points for integer pixels (u = column, v = row)."""
    uv = np.asarray(pixels_uv, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    cam = np.column_stack([(uv[:, 0] - camera.cx) * d / camera.fx, (uv[:, 1] - camera.cy) * d / camera.fy, d])
    return cam @ camera.pose[:3, :3].T + camera.pose[:3, 3]


def lift_mask(frame: VlmFrame, j: int, min_points: int = 20) -> np.ndarray:
    """World coordinates of mask ``j`` pixels with valid depth."""
    if not 0 <= j < frame.n_masks:
        raise IndexError(f"mask index {j} out of range for {frame.n_masks} masks")
    rows, cols = np.nonzero(frame.masks[j])
    d = frame.depth[rows, cols]
    ok = np.isfinite(d) & (d > 0)
    if np.count_nonzero(ok) < min_points:
        raise InsufficientDepth(f"mask {j}: {np.count_nonzero(ok)} valid depth pixels < {min_points}")
    return backproject(d[ok], frame.camera, np.column_stack([cols[ok], rows[ok]]))


def pool_instance_feature(frame: VlmFrame, j: int) -> np.ndarray:
    """Mean VLM feature over mask ``j`` (or the precomputed vector)."""
    if frame.maskfeat is not None:
        return frame.maskfeat[j].copy()
    sel = frame.masks[j]
    if not sel.any():
        raise EmptyMask(f"mask {j} is empty")
    return frame.featmap[sel].mean(axis=0)


# ---------------------------------------------------------------- mining

@dataclass
class MiningStats:
    candidates: int = 0
    skipped: dict = field(default_factory=dict)
    merged: int = 0
    suppressed: int = 0

    def skip(self, reason: str):
        self.skipped[reason] = self.skipped.get(reason, 0) + 1


def _candidates(frames, cfg: MiningConfig, stats: MiningStats):
    out = []
    for frame in frames:
        for j in range(frame.n_masks):
            try:
                pts = lift_mask(frame, j, cfg.min_points)
                box = fit_box(pts, cfg.fit_mode)
                feat = pool_instance_feature(frame, j)
            except (InsufficientDepth, DegenerateGeometry, EmptyInput, EmptyMask) as exc:
                stats.skip(type(exc).__name__)
                continue
            if not np.all(np.isfinite(feat)) or not np.linalg.norm(feat) > 0:
                stats.skip("ZeroNormFeature")
                continue
            out.append(PseudoObject(box, feat, len(pts), f"{frame.frame_id}#{j}", pts))
    stats.candidates = len(out)
    return out


def _merge(cands, cfg: MiningConfig, stats: MiningStats):
    order = sorted(range(len(cands)), key=lambda i: (-cands[i].support_count, i))
    taken = np.zeros(len(cands), dtype=bool)
    merged = []
    for i in order:
        if taken[i]:
            continue
        leader = cands[i]
        taken[i] = True
        group = [leader]
        for k in order:
            if not taken[k] and iou3d(leader.box, cands[k].box, cfg.aligned_iou) > cfg.merge_iou:
                taken[k] = True
                group.append(cands[k])
        if len(group) == 1:
            merged.append(leader)
            continue
        stats.merged += len(group) - 1
        support = np.array([g.support_count for g in group], dtype=np.float64)
        feat = (support[:, None] * np.stack([g.feature for g in group])).sum(axis=0) / support.sum()
        pts = np.vstack([g.points for g in group])
        try:
            box = fit_box(pts, cfg.fit_mode)
        except DegenerateGeometry:
            box = leader.box
        merged.append(PseudoObject(box, feat, int(support.sum()), leader.source_frame, pts))
    return merged


def mine_unknown_objects(frames, base_gt, cfg: MiningConfig | None = None, stats: MiningStats | None = None):
    """Lift, box and pool every mask in ``frames``; merge across frames;
    drop candidates overlapping an annotated base box.

    Per-mask failures are counted in ``stats`` and skipped. The result is
    deterministic: candidates are ranked by support with frame/mask order
    breaking ties.
    """
    cfg = cfg or MiningConfig()
    stats = stats if stats is not None else MiningStats()
    frames = list(frames)
    dims = {f.feature_dim for f in frames}
    if len(dims) > 1:
        raise ShapeMismatch(f"frames disagree on feature dimension: {sorted(dims)}")
    objs = _candidates(frames, cfg, stats)
    if cfg.merge:
        objs = _merge(objs, cfg, stats)
    if cfg.suppress_gt and len(base_gt):
        kept = []
        for o in objs:
            if any(iou3d(o.box, g, cfg.aligned_iou) > cfg.gt_suppress_iou for g in base_gt):
                stats.suppressed += 1
            else:
                kept.append(o)
        objs = kept
    log.debug("mined %d pseudo objects from %d candidates", len(objs), stats.candidates)
    return objs


def frames_in_dir(path) -> list[VlmFrame]:
    files = sorted(p for p in Path(path).iterdir() if p.suffix == ".fi3d")
    return [load_vlm_frame(p) for p in files]


def save_pseudo_objects(path, objs) -> None:
    with open(os.fspath(path), "w") as fh:
        json.dump({"version": 1, "objects": [o.to_dict() for o in objs]}, fh, indent=1)


def load_pseudo_objects(path) -> list[PseudoObject]:
    with open(os.fspath(path)) as fh:
        doc = json.load(fh)
    return [PseudoObject.from_dict(d) for d in doc["objects"]]
