"""3D box arithmetic: rotated IoU, DIoU, box fitting and containment.

Boxes are 7-parameter, yaw-only (rotation about +z). Bird's-eye-view (BEV)
polygons are float64 arrays of shape (n, 2) in counter-clockwise order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, EmptyInput

SLIVER_AREA = 1e-12
SIZE_FLOOR = 1e-6
CONTAIN_EPS = 1e-9


def normalize_yaw(yaw: float) -> float:
    """Map an angle into [-pi, pi)."""
    y = (float(yaw) + math.pi) % (2.0 * math.pi) - math.pi
    # float modulo can land exactly on +pi
    return -math.pi if y >= math.pi else y


@dataclass(frozen=True, eq=False)
class Box3:
    """Yaw-rotated 3D box: center (m), extents w, l, h (m), yaw (rad)."""

    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        c = np.array(self.center, dtype=np.float64).reshape(3)
        s = np.array(self.size, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(s)) and math.isfinite(self.yaw)):
            raise ValueError("box parameters must be finite")
        if np.any(s <= 0):
            raise ValueError(f"box extents must be positive, got {s.tolist()}")
        c.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @classmethod
    def from_array(cls, arr) -> "Box3":
        a = np.asarray(arr, dtype=np.float64).reshape(7)
        return cls(a[:3], a[3:6], float(a[6]))

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.center, self.size, [self.yaw]])

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    @property
    def z_range(self) -> tuple[float, float]:
        half = 0.5 * self.size[2]
        return float(self.center[2] - half), float(self.center[2] + half)

    def __eq__(self, other):
        if not isinstance(other, Box3):
            return NotImplemented
        return bool(np.array_equal(self.to_array(), other.to_array()))

    def __hash__(self):
        return hash(self.to_array().tobytes())

    def __repr__(self):
        c = ", ".join(f"{v:.4g}" for v in self.center)
        s = ", ".join(f"{v:.4g}" for v in self.size)
        return f"Box3(center=({c}), size=({s}), yaw={self.yaw:.4g})"


def _rot2(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def box_corners_bev(b: Box3, aligned: bool = False) -> np.ndarray:
    """Four CCW footprint vertices of ``b``; ``aligned`` ignores the yaw."""
    hw, hl = 0.5 * b.size[0], 0.5 * b.size[1]
    local = np.array([[-hw, -hl], [hw, -hl], [hw, hl], [-hw, hl]])
    yaw = 0.0 if aligned else b.yaw
    return local @ _rot2(yaw).T + b.center[:2]


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for CCW)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _clip(subject, a, b):
    # keep the part of subject left of the directed edge a->b
    out = []
    n = len(subject)
    if n == 0:
        return out
    ex, ey = b[0] - a[0], b[1] - a[1]

    def side(p):
        return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

    prev = subject[-1]
    sp = side(prev)
    for cur in subject:
        sc = side(cur)
        if sc >= 0:
            if sp < 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            out.append((cur[0], cur[1]))
        elif sp >= 0:
            t = sp / (sp - sc)
            out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
        prev, sp = cur, sc
    return out


def convex_intersection(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of convex CCW polygon ``a`` by convex CCW ``b``."""
    poly = [tuple(p) for p in np.asarray(a, dtype=np.float64)]
    clip = np.asarray(b, dtype=np.float64)
    m = len(clip)
    for i in range(m):
        poly = _clip(poly, clip[i], clip[(i + 1) % m])
        if not poly:
            break
    return np.array(poly, dtype=np.float64).reshape(-1, 2)


def convex_intersection_area(a: np.ndarray, b: np.ndarray) -> float:
    area = polygon_area(convex_intersection(a, b))
    return area if area >= SLIVER_AREA else 0.0


def _vertical_overlap(a: Box3, b: Box3) -> float:
    lo_a, hi_a = a.z_range
    lo_b, hi_b = b.z_range
    return max(0.0, min(hi_a, hi_b) - max(lo_a, lo_b))


def intersection_volume(a: Box3, b: Box3, aligned: bool = False) -> float:
    dz = _vertical_overlap(a, b)
    if dz <= 0.0:
        return 0.0
    if aligned or (a.yaw == 0.0 and b.yaw == 0.0):
        lo = np.maximum(a.center[:2] - a.size[:2] / 2, b.center[:2] - b.size[:2] / 2)
        hi = np.minimum(a.center[:2] + a.size[:2] / 2, b.center[:2] + b.size[:2] / 2)
        area = float(np.prod(np.clip(hi - lo, 0.0, None)))
        area = area if area >= SLIVER_AREA else 0.0
    else:
        area = convex_intersection_area(box_corners_bev(a), box_corners_bev(b))
    return area * dz


def iou3d(a: Box3, b: Box3, aligned: bool = False) -> float:
    """Volumetric IoU of two yaw-rotated boxes.

    With ``aligned=True`` both yaws are ignored (axis-aligned evaluation
    convention).
    """
    inter = intersection_volume(a, b, aligned)
    if inter <= 0.0:
        return 0.0
    union = a.volume + b.volume - inter
    return min(1.0, inter / union)


def iou3d_matrix(boxes_a, boxes_b, aligned: bool = False) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = iou3d(a, b, aligned)
    return out


def box_corners(b: Box3) -> np.ndarray:
    """All 8 corners, shape (8, 3)."""
    bev = box_corners_bev(b)
    lo, hi = b.z_range
    return np.vstack([np.column_stack([bev, np.full(4, lo)]), np.column_stack([bev, np.full(4, hi)])])


def diou3d(pred: Box3, target: Box3, aligned: bool = False) -> float:
    """Distance-IoU: IoU minus squared center distance over the squared
    diagonal of the smallest axis-aligned box enclosing both boxes."""
    iou = iou3d(pred, target, aligned)
    if aligned:
        pred, target = Box3(pred.center, pred.size), Box3(target.center, target.size)
    corners = np.vstack([box_corners(pred), box_corners(target)])
    diag2 = float(np.sum((corners.max(axis=0) - corners.min(axis=0)) ** 2))
    dist2 = float(np.sum((pred.center - target.center) ** 2))
    return iou - dist2 / diag2


def points_in_box(points, b: Box3, eps: float = CONTAIN_EPS) -> np.ndarray:
    """Closed containment mask; points on a face count as inside."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rel = pts - b.center
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    local_x = c * rel[:, 0] + s * rel[:, 1]
    local_y = -s * rel[:, 0] + c * rel[:, 1]
    half = 0.5 * b.size + eps
    return (np.abs(local_x) <= half[0]) & (np.abs(local_y) <= half[1]) & (np.abs(rel[:, 2]) <= half[2])


def convex_hull_2d(points) -> np.ndarray:
    """Monotone-chain hull, CCW, collinear points dropped."""
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(pts) < 3:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def canonical_rect_yaw(theta: float) -> float:
    """Representative of a rectangle orientation in [-pi/4, pi/4)."""
    q = math.pi / 2
    return (theta + math.pi / 4) % q - math.pi / 4


def _clamp_extent(lo, hi):
    size = hi - lo
    degenerate = size < SIZE_FLOOR
    center = 0.5 * (lo + hi)
    return center, np.where(degenerate, SIZE_FLOOR, size), int(np.count_nonzero(degenerate))


def fit_box(points, mode: str = "axis_aligned") -> Box3:
    """Fit a box around ``points``.

    ``axis_aligned`` takes coordinate min/max with yaw 0. ``min_area_yaw``
    finds the minimum-area rectangle around the BEV convex hull by rotating
    calipers and takes the vertical min/max.

    Extents thinner than ``SIZE_FLOOR`` are clamped to it (planar objects);
    if two or more axes collapse the point set has no area in any
    orientation and ``DegenerateGeometry`` is raised.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyInput("cannot fit a box to zero points")
    if mode == "axis_aligned":
        center, size, n_degenerate = _clamp_extent(pts.min(axis=0), pts.max(axis=0))
        if n_degenerate >= 2:
            raise DegenerateGeometry(f"point set collapses on {n_degenerate} axes")
        return Box3(center, size, 0.0)
    if mode != "min_area_yaw":
        raise ValueError(f"unknown fit mode {mode!r}")

    hull = convex_hull_2d(pts[:, :2])
    if len(hull) < 3 or polygon_area(hull) < SLIVER_AREA:
        raise DegenerateGeometry("BEV hull is collinear")
    best = None
    for i in range(len(hull)):
        edge = hull[(i + 1) % len(hull)] - hull[i]
        yaw = canonical_rect_yaw(math.atan2(edge[1], edge[0]))
        local = hull @ _rot2(yaw)  # rotate by -yaw
        lo, hi = local.min(axis=0), local.max(axis=0)
        area = float(np.prod(hi - lo))
        if best is None or area < best[0] * (1 - 1e-12):
            best = (area, yaw, lo, hi)
    _, yaw, lo, hi = best
    center_xy = _rot2(yaw) @ (0.5 * (lo + hi))
    zc, zs, _ = _clamp_extent(pts[:, 2].min(), pts[:, 2].max())
    size = np.maximum(np.array([hi[0] - lo[0], hi[1] - lo[1], float(zs)]), SIZE_FLOOR)
    return Box3([center_xy[0], center_xy[1], float(zc)], size, yaw)


def transform_box(b: Box3, yaw: float, translation) -> Box3:
    """Rigidly move ``b``: rotate about the origin by ``yaw`` then translate."""
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    xy = _rot2(yaw) @ b.center[:2]
    return Box3([xy[0] + t[0], xy[1] + t[1], b.center[2] + t[2]], b.size, b.yaw + yaw)


def nms(boxes, scores, iou_thresh: float = 0.5, aligned: bool = False) -> list[int]:
    """Greedy NMS; returns kept indices in descending score order.

    Ties in score are broken by input index.
    """
    order = sorted(range(len(boxes)), key=lambda i: (-float(scores[i]), i))
    keep: list[int] = []
    for i in order:
        if all(iou3d(boxes[i], boxes[k], aligned) <= iou_thresh for k in keep):
            keep.append(i)
    return keep
