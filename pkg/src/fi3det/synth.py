"""Deterministic synthetic indoor world standing in for the frozen backbone.

Scenes are rooms with non-overlapping boxes resting on the floor. Point
clouds sample box surfaces plus floor clutter. Category embeddings form an
orthonormal basis, so prototype classification has an exact answer at zero
noise. A ray-cast renderer produces depth/mask frames shaped like VLM
outputs for the mining pipeline.

All randomness flows through ``numpy.random.Philox`` (a counter-based
generator) keyed by ``(seed, stream)`` so results do not depend on call
order across streams.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from .container import write_fi3d
from .errors import PlacementFailure
from .geometry import Box3, box_corners, box_corners_bev, convex_intersection_area, points_in_box
from .vlm_ingest import CameraModel, VlmFrame

# stream ids for independent random substreams
SCENE, FEATURES, DETECTOR, FRAMES, SUPPORT = range(5)


def make_rng(seed: int, stream: int = SCENE, *extra: int) -> np.random.Generator:
    key = np.random.SeedSequence([int(seed), int(stream), *map(int, extra)])
    return np.random.Generator(np.random.Philox(key))


@dataclass
class CategorySpec:
    name: str
    size_min: tuple = (0.4, 0.4, 0.4)
    size_max: tuple = (1.2, 1.2, 1.4)
    count: tuple = (0, 1)


@dataclass
class WorldConfig:
    categories: list = field(default_factory=lambda: [CategorySpec(f"c{i:02d}") for i in range(9)])
    room: tuple = (8.0, 8.0, 3.0)
    points_per_object: int = 400
    floor_points: int = 300
    dim3d: int = 32
    dim2d: int = 32
    feature_noise: float = 0.0
    vlm_feature_noise: float = 0.0
    box_jitter: float = 0.0
    clutter_rate: float = 0.0
    min_gap: float = 0.3
    max_yaw: float = 0.0
    image_size: tuple = (96, 72)  # W, H
    views_per_object: int = 3
    mask_dropout: float = 0.0
    false_mask_rate: float = 0.0
    merge_mask_rate: float = 0.0
    embedding_seed: int = 1234
    max_tries: int = 200

    def __post_init__(self):
        self.categories = [c if isinstance(c, CategorySpec) else CategorySpec(**c) for c in self.categories]
        if not all(v > 0 for v in self.room):
            raise ValueError("room extents must be positive")
        if self.dim3d < len(self.categories) or self.dim2d < len(self.categories):
            raise ValueError("feature dims must be >= number of categories for orthonormal embeddings")
        for name in ("feature_noise", "vlm_feature_noise", "box_jitter", "clutter_rate", "mask_dropout"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.categories]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        for key in ("room", "image_size"):
            if key in d:
                d[key] = tuple(d[key])
        if "categories" in d:
            d["categories"] = [CategorySpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in c.items()})
                               if isinstance(c, dict) else CategorySpec(c) for c in d["categories"]]
        return cls(**d)


@dataclass(eq=False)
class Scene:
    scene_id: str
    points: np.ndarray  # N x 6, xyz + rgb in [0, 1]
    gt_boxes: list
    gt_labels: np.ndarray  # indices into the world's category list
    instance: np.ndarray  # per point GT index, -1 for clutter

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    def to_blocks(self) -> dict:
        boxes = np.array([b.to_array() for b in self.gt_boxes]).reshape(-1, 7)
        return {"points": self.points, "gt_boxes": boxes, "gt_labels": self.gt_labels.astype(np.uint32)}

    def digest(self) -> bytes:
        h = hashlib.sha256()
        for v in self.to_blocks().values():
            h.update(np.ascontiguousarray(v, dtype=np.float64).tobytes())
        return h.digest()


class FeatureProvider(Protocol):
    """Per-point 3D features (N x L) and aligned 2D features (N x K)."""

    def __call__(self, scene: Scene) -> tuple[np.ndarray, np.ndarray]: ...


# ------------------------------------------------------------------ scenes

def _bev_separated(a: Box3, b: Box3, gap: float) -> bool:
    grown = Box3(a.center, a.size + np.array([2 * gap, 2 * gap, 0.0]), a.yaw)
    return convex_intersection_area(box_corners_bev(grown), box_corners_bev(b)) == 0.0


def _surface_points(box: Box3, n: int, rng) -> np.ndarray:
    w, l, h = box.size
    # side and top faces; the bottom rests on the floor and is never observed
    faces = np.array([l * h, l * h, w * h, w * h, w * l])
    face = rng.choice(5, size=n, p=faces / faces.sum())
    uv = rng.uniform(-0.5, 0.5, size=(n, 2))
    local = np.empty((n, 3))
    axis_val = {0: (0, 0.5), 1: (0, -0.5), 2: (1, 0.5), 3: (1, -0.5), 4: (2, 0.5)}
    for f, (axis, val) in axis_val.items():
        sel = face == f
        others = [a for a in range(3) if a != axis]
        local[sel, axis] = val
        local[sel, others[0]] = uv[sel, 0]
        local[sel, others[1]] = uv[sel, 1]
    local *= box.size
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.column_stack([c * local[:, 0] - s * local[:, 1], s * local[:, 0] + c * local[:, 1], local[:, 2]])
    return world + box.center


def _palette(n):
    return np.array([[(0.15 + 0.7 * ((i * 37) % 11) / 10), (0.15 + 0.7 * ((i * 53) % 13) / 12),
                      (0.15 + 0.7 * ((i * 71) % 7) / 6)] for i in range(n)])


def generate_scene(cfg: WorldConfig, seed: int, scene_id: str | None = None) -> Scene:
    rng = make_rng(seed, SCENE)
    rx, ry, _ = cfg.room
    boxes, labels = [], []
    for ci, cat in enumerate(cfg.categories):
        lo, hi = cat.count
        for _ in range(int(rng.integers(lo, hi + 1))):
            size = rng.uniform(cat.size_min, cat.size_max)
            for _attempt in range(cfg.max_tries):
                yaw = rng.uniform(-cfg.max_yaw, cfg.max_yaw) if cfg.max_yaw > 0 else 0.0
                reach = 0.5 * math.hypot(size[0], size[1])
                if 2 * reach >= min(rx, ry):
                    raise PlacementFailure(f"category {cat.name} does not fit in the room")
                xy = rng.uniform([reach, reach], [rx - reach, ry - reach])
                cand = Box3([xy[0], xy[1], size[2] / 2], size, yaw)
                if all(_bev_separated(cand, b, cfg.min_gap) for b in boxes):
                    boxes.append(cand)
                    labels.append(ci)
                    break
            else:
                raise PlacementFailure(f"could not place {cat.name} after {cfg.max_tries} attempts")
    colors = _palette(len(cfg.categories))
    chunks, inst = [], []
    for j, (b, c) in enumerate(zip(boxes, labels)):
        p = _surface_points(b, cfg.points_per_object, rng)
        chunks.append(np.column_stack([p, np.tile(colors[c], (len(p), 1))]))
        inst.append(np.full(len(p), j))
    floor = rng.uniform([0, 0], [rx, ry], size=(cfg.floor_points, 2))
    floor = np.column_stack([floor, np.zeros(len(floor))])
    if boxes:
        covered = np.zeros(len(floor), dtype=bool)
        for b in boxes:
            covered |= points_in_box(floor, Box3(b.center, b.size + [0.05, 0.05, 0.0], b.yaw))
        floor = floor[~covered]
    chunks.append(np.column_stack([floor, np.full((len(floor), 3), 0.5)]))
    inst.append(np.full(len(floor), -1))
    return Scene(scene_id if scene_id is not None else f"scene{seed}", np.vstack(chunks), boxes,
                 np.asarray(labels, dtype=np.int64), np.concatenate(inst))


def export_scene(path, scene: Scene, features=None) -> None:
    """Write a scene container; ``features`` adds feat3d / feat2d blocks."""
    blocks = scene.to_blocks()
    if features is not None:
        blocks["feat3d"], blocks["feat2d"] = features
    write_fi3d(path, blocks)


# ---------------------------------------------------------------- features

def category_embeddings(cfg: WorldConfig):
    """Orthonormal rows (C x L, C x K), fixed by ``cfg.embedding_seed``."""
    rng = make_rng(cfg.embedding_seed, FEATURES, 999)
    out = []
    for dim in (cfg.dim3d, cfg.dim2d):
        q, r = np.linalg.qr(rng.standard_normal((dim, len(cfg.categories))))
        out.append((q * np.sign(np.diag(r))).T)
    return out[0], out[1]


def oracle_features(scene: Scene, cfg: WorldConfig, seed: int):
    """Category embedding plus Gaussian noise for object points; pure noise
    (zero at zero noise) for clutter points."""
    e3, e2 = category_embeddings(cfg)
    rng = make_rng(seed, FEATURES)
    n = len(scene.points)
    f3 = np.zeros((n, cfg.dim3d))
    f2 = np.zeros((n, cfg.dim2d))
    obj = scene.instance >= 0
    labels = scene.gt_labels[scene.instance[obj]]
    f3[obj] = e3[labels]
    f2[obj] = e2[labels]
    if cfg.feature_noise > 0:
        f3 += cfg.feature_noise * rng.standard_normal(f3.shape)
        f2 += cfg.feature_noise * rng.standard_normal(f2.shape)
    return f3, f2


class OracleFeatures:
    """FeatureProvider backed by :func:`oracle_features`."""

    def __init__(self, cfg: WorldConfig, seed: int):
        self.cfg, self.seed = cfg, seed

    def __call__(self, scene: Scene):
        return oracle_features(scene, self.cfg, self.seed)


def nonzero_rows(feats) -> np.ndarray:
    return np.linalg.norm(feats, axis=1) > 0


# ---------------------------------------------------------------- detector

@dataclass(frozen=True, eq=False)
class Proposal:
    box: Box3
    objectness: float
    gt_index: int = -1  # -1 for clutter


def oracle_detector(scene: Scene, cfg: WorldConfig, seed: int) -> list[Proposal]:
    """One jittered proposal per GT box plus Poisson clutter proposals that
    overlap no GT footprint."""
    rng = make_rng(seed, DETECTOR)
    out = []
    for j, b in enumerate(scene.gt_boxes):
        dc = cfg.box_jitter * rng.standard_normal(3)
        ds = cfg.box_jitter * rng.standard_normal(3)
        size = np.maximum(b.size + ds, 0.05)
        jitter = np.concatenate([dc, size - b.size])
        out.append(Proposal(Box3(b.center + dc, size, b.yaw), float(np.exp(-np.linalg.norm(jitter))), j))
    rx, ry, _ = cfg.room
    for _ in range(int(rng.poisson(cfg.clutter_rate)) if cfg.clutter_rate > 0 else 0):
        for _attempt in range(cfg.max_tries):
            size = rng.uniform([0.3, 0.3, 0.3], [1.0, 1.0, 1.0])
            xy = rng.uniform(size[:2] / 2, [rx - size[0] / 2, ry - size[1] / 2])
            cand = Box3([xy[0], xy[1], size[2] / 2], size)
            if all(_bev_separated(cand, b, 0.0) for b in scene.gt_boxes):
                out.append(Proposal(cand, float(rng.uniform(0.2, 0.6))))
                break
    return out


def oracle_point_predictions(scene: Scene, proposals, floor_objectness: float = 0.02):
    """Per-point objectness and predicted box from the proposal set.

    A point takes the highest objectness among proposals containing it and
    regresses the proposal whose center is nearest.
    """
    xyz = scene.xyz
    obj = np.full(len(xyz), floor_objectness)
    if not proposals:
        return obj, [None] * len(xyz)
    centers = np.array([p.box.center for p in proposals])
    for p in proposals:
        inside = points_in_box(xyz, p.box)
        obj[inside] = np.maximum(obj[inside], p.objectness)
    nearest = np.argmin(((xyz[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    return obj, [proposals[i].box for i in nearest]


# ---------------------------------------------------------------- rendering

def look_at(eye, target) -> np.ndarray:
    """Camera-to-world pose, OpenCV axes (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, :3] = np.column_stack([right, down, fwd])
    pose[:3, 3] = eye
    return pose


def raycast(camera: CameraModel, size_wh, boxes):
    """Depth (camera z) and first-hit index per pixel; -1 floor, -2 miss."""
    w, h = size_wh
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    d_cam = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=-1)
    rot, eye = camera.pose[:3, :3], camera.pose[:3, 3]
    dirs = d_cam @ rot.T  # ray parameter t equals camera depth
    depth = np.full((h, w), np.inf)
    hit = np.full((h, w), -2, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_floor = np.where(dirs[..., 2] < 0, -eye[2] / dirs[..., 2], np.inf)
    floor = np.isfinite(t_floor) & (t_floor > 0)
    depth[floor] = t_floor[floor]
    hit[floor] = -1
    for j, b in enumerate(boxes):
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        to_local = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
        o = to_local @ (eye - b.center)
        dl = dirs @ to_local.T
        half = 0.5 * b.size
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - o) / dl
            t2 = (half - o) / dl
        t_lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
        t_hi = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
        # rays parallel to a slab miss unless the origin lies within it
        par = dl == 0
        outside = par & (np.abs(o) > half)
        t_near = t_lo.max(axis=-1)
        t_far = t_hi.min(axis=-1)
        ok = (t_near <= t_far) & (t_near > 0) & ~outside.any(axis=-1) & (t_near < depth)
        depth[ok] = t_near[ok]
        hit[ok] = j
    depth[~np.isfinite(depth)] = 0.0
    return depth, hit


def _camera_for(box: Box3, azimuth: float, size_wh, fov_deg=90.0) -> CameraModel:
    w, h = size_wh
    f = 0.5 * w / math.tan(math.radians(fov_deg) / 2)
    cx, cy = (w - 1) / 2, (h - 1) / 2
    corners = box_corners(box)
    diag = float(np.linalg.norm(box.size))
    radius = 0.5 * diag + 0.2
    height = box.center[2] + 0.5 * box.size[2] + 0.5 * diag + 0.2
    for _ in range(40):
        eye = box.center + np.array([radius * math.cos(azimuth), radius * math.sin(azimuth), 0.0])
        eye[2] = height
        pose = look_at(eye, box.center)
        cam = (corners - eye) @ pose[:3, :3]
        if np.all(cam[:, 2] > 0.1):
            u = f * cam[:, 0] / cam[:, 2] + cx
            v = f * cam[:, 1] / cam[:, 2] + cy
            if u.min() >= 1 and v.min() >= 1 and u.max() <= w - 2 and v.max() <= h - 2:
                break
        radius *= 1.15
        height += 0.1
    return CameraModel(f, f, cx, cy, pose)


def render_frames(scene: Scene, cfg: WorldConfig, seed: int, targets=None) -> list[VlmFrame]:
    """Simulated VLM output: for each target object, ``views_per_object``
    frames each carrying that object's visible mask and a noisy 2D
    instance feature. Optional corruptions: pixel dropout, spurious floor
    masks and masks bleeding into a neighbouring object."""
    rng = make_rng(seed, FRAMES)
    _, e2 = category_embeddings(cfg)
    targets = range(len(scene.gt_boxes)) if targets is None else targets
    frames = []
    for j in targets:
        box = scene.gt_boxes[j]
        az0 = rng.uniform(0, 2 * math.pi)
        for view in range(cfg.views_per_object):
            cam = _camera_for(box, az0 + 2 * math.pi * view / cfg.views_per_object, cfg.image_size)
            depth, hit = raycast(cam, cfg.image_size, scene.gt_boxes)
            masks = [hit == j]
            feats = [e2[scene.gt_labels[j]]]
            if cfg.merge_mask_rate > 0 and rng.uniform() < cfg.merge_mask_rate:
                visible = [k for k in np.unique(hit) if k >= 0 and k != j]
                if visible:
                    k = int(visible[int(rng.integers(len(visible)))])
                    masks[0] = masks[0] | (hit == k)
                    feats[0] = 0.5 * (feats[0] + e2[scene.gt_labels[k]])
            if cfg.false_mask_rate > 0 and rng.uniform() < cfg.false_mask_rate:
                hh, ww = hit.shape
                cu, cv, r = rng.uniform(0, ww), rng.uniform(0, hh), rng.uniform(4, 10)
                vv, uu = np.mgrid[0:hh, 0:ww]
                blob = ((uu - cu) ** 2 + (vv - cv) ** 2 <= r * r) & (hit == -1)
                if blob.any():
                    masks.append(blob)
                    feats.append(rng.standard_normal(cfg.dim2d) / math.sqrt(cfg.dim2d))
            masks = np.stack(masks)
            if cfg.mask_dropout > 0:
                masks &= rng.uniform(size=masks.shape) >= cfg.mask_dropout
            feats = np.stack(feats)
            if cfg.vlm_feature_noise > 0:
                feats = feats + cfg.vlm_feature_noise * rng.standard_normal(feats.shape)
            frames.append(VlmFrame(depth, cam, masks, maskfeat=feats, frame_id=f"{scene.scene_id}_o{j}_v{view}"))
    return frames
