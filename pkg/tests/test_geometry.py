import math

import numpy as np
import pytest
import shapely.geometry as sg
from hypothesis import assume, given
from hypothesis import strategies as st

from conftest import angle, boxes, mc_iou, random_box
from fi3det.errors import DegenerateGeometry, EmptyInput
from fi3det.geometry import (
    Box3,
    box_corners,
    box_corners_bev,
    convex_intersection_area,
    diou3d,
    fit_box,
    iou3d,
    iou3d_matrix,
    nms,
    normalize_yaw,
    points_in_box,
    polygon_area,
    transform_box,
)

UNIT = Box3([0, 0, 0], [1, 1, 1])


def square(offset=(0, 0), yaw=0.0):
    return box_corners_bev(Box3([*offset, 0], [1, 1, 1], yaw))


class TestBox3:
    def test_rejects_nonpositive_size(self):
        with pytest.raises(ValueError):
            Box3([0, 0, 0], [1, 0, 1])

    def test_yaw_normalized(self):
        assert Box3([0, 0, 0], [1, 1, 1], math.pi).yaw == -math.pi
        assert Box3([0, 0, 0], [1, 1, 1], 3 * math.pi / 2).yaw == pytest.approx(-math.pi / 2)

    def test_round_trip_and_immutable(self):
        b = Box3([1, 2, 3], [0.5, 0.6, 0.7], 0.3)
        assert Box3.from_array(b.to_array()) == b
        with pytest.raises(ValueError):
            b.center[0] = 9.0

    @given(angle)
    def test_normalize_yaw_range(self, y):
        n = normalize_yaw(y)
        assert -math.pi <= n < math.pi
        assert math.isclose(math.cos(n), math.cos(y), abs_tol=1e-12)


class TestCorners:
    def test_axis_aligned_square(self):
        c = box_corners_bev(UNIT)
        assert {tuple(p) for p in c} == {(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)}
        assert polygon_area(c) == pytest.approx(1.0)

    def test_quarter_turn_same_vertex_set(self):
        a = np.round(box_corners_bev(UNIT), 12)
        b = np.round(box_corners_bev(Box3([0, 0, 0], [1, 1, 1], math.pi / 2)), 12) + 0.0
        assert sorted(map(tuple, a)) == sorted(map(tuple, b))

    def test_eighth_turn_diamond(self):
        c = box_corners_bev(Box3([0, 0, 0], [1, 1, 1], math.pi / 4))
        r = math.sqrt(2) / 2
        expected = [(r, 0), (0, r), (-r, 0), (0, -r)]
        for e in expected:
            assert np.min(np.linalg.norm(c - e, axis=1)) < 1e-12
        assert polygon_area(c) > 0  # CCW

    def test_eight_corners(self):
        assert box_corners(UNIT).shape == (8, 3)


class TestIntersectionArea:
    def test_identical(self):
        assert convex_intersection_area(square(), square()) == pytest.approx(1.0)

    def test_half_overlap(self):
        assert convex_intersection_area(square(), square((0.5, 0))) == pytest.approx(0.5)

    def test_octagon(self):
        area = convex_intersection_area(square(), square(yaw=math.pi / 4))
        assert area == pytest.approx(2 * (math.sqrt(2) - 1), abs=1e-12)

    def test_disjoint_and_touching(self):
        assert convex_intersection_area(square(), square((3, 0))) == 0.0
        assert convex_intersection_area(square(), square((1, 0))) == 0.0

    @given(boxes(), boxes())
    def test_matches_shapely(self, a, b):
        pa, pb = box_corners_bev(a), box_corners_bev(b)
        ref = sg.Polygon(pa).intersection(sg.Polygon(pb)).area
        got = convex_intersection_area(pa, pb)
        assert got == pytest.approx(ref, abs=1e-9)
        assert got <= min(polygon_area(pa), polygon_area(pb)) + 1e-12


class TestIou:
    def test_examples(self):
        assert iou3d(UNIT, UNIT) == pytest.approx(1.0)
        assert iou3d(UNIT, Box3([0.5, 0, 0], [1, 1, 1])) == pytest.approx(1 / 3)
        assert iou3d(UNIT, Box3([0, 0, 0], [1, 1, 1], math.pi / 4)) == pytest.approx(math.sqrt(2) / 2, abs=1e-12)

    def test_aligned_mode_ignores_yaw(self):
        assert iou3d(UNIT, Box3([0, 0, 0], [1, 1, 1], math.pi / 4), aligned=True) == pytest.approx(1.0)

    def test_monte_carlo_spot_check(self, rng):
        for _ in range(5):
            a = random_box(rng, 0.5)
            b = random_box(rng, 0.5)
            assert abs(iou3d(a, b) - mc_iou(a, b, rng, 200_000)) < 5e-3

    def test_vertical_separation(self):
        assert iou3d(UNIT, Box3([0, 0, 1.5], [1, 1, 1])) == 0.0

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = iou3d(a, b)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(iou3d(b, a), abs=1e-12)

    @given(boxes(), boxes(), angle, st.tuples(*[st.floats(-5, 5)] * 3))
    def test_rigid_invariance(self, a, b, yaw, t):
        moved = iou3d(transform_box(a, yaw, t), transform_box(b, yaw, t))
        assert moved == pytest.approx(iou3d(a, b), abs=1e-9)

    @given(boxes(), boxes())
    def test_zero_iff_disjoint(self, a, b):
        bev = sg.Polygon(box_corners_bev(a)).intersection(sg.Polygon(box_corners_bev(b))).area
        (alo, ahi), (blo, bhi) = a.z_range, b.z_range
        dz = min(ahi, bhi) - max(alo, blo)
        assume(abs(dz) > 1e-6 and (bev > 1e-6 or bev == 0.0))
        assert (iou3d(a, b) == 0.0) == (bev == 0.0 or dz < 0)

    def test_matrix(self, rng):
        a = [random_box(rng) for _ in range(3)]
        b = [random_box(rng) for _ in range(4)]
        m = iou3d_matrix(a, b)
        assert m.shape == (3, 4)
        assert m[2, 1] == iou3d(a[2], b[1])


class TestDiou:
    def test_examples(self):
        assert diou3d(UNIT, UNIT) == pytest.approx(1.0)
        big = Box3([0, 0, 0], [2, 1.5, 3])
        assert diou3d(UNIT, big) == iou3d(UNIT, big)
        assert diou3d(UNIT, Box3([0.5, 0, 0], [1, 1, 1])) == pytest.approx(1 / 3 - 0.25 / 4.25, abs=1e-12)

    @given(boxes(), boxes())
    def test_bounded_by_iou(self, a, b):
        d, i = diou3d(a, b), iou3d(a, b)
        assert -1.0 < d <= i + 1e-15
        if not np.allclose(a.center, b.center):
            assert d < i


class TestContainment:
    def test_center_and_face(self):
        b = Box3([1, 1, 1], [2, 2, 2], 0.4)
        face = b.center + np.array([math.cos(0.4), math.sin(0.4), 0.0])
        assert points_in_box([b.center, face], b).all()
        assert not points_in_box([b.center + [0, 0, 1.01]], b).any()

    def test_matches_shapely(self, rng):
        for _ in range(20):
            b = random_box(rng)
            pts = rng.uniform(-3, 3, (400, 3))
            poly = sg.Polygon(box_corners_bev(b))
            lo, hi = b.z_range
            ref = np.array([poly.contains(sg.Point(p[:2])) and lo < p[2] < hi for p in pts])
            assert np.array_equal(points_in_box(pts, b), ref)


class TestFitBox:
    def test_cube_corners_both_modes(self):
        cube = Box3([1, -2, 0.5], [1, 1, 1])
        for mode in ("axis_aligned", "min_area_yaw"):
            fit = fit_box(box_corners(cube), mode)
            assert np.allclose(fit.center, cube.center) and np.allclose(fit.size, cube.size)

    def test_single_point_rejected(self):
        with pytest.raises(DegenerateGeometry):
            fit_box([[1, 2, 3]])

    def test_planar_points_clamped(self):
        pts = [[0, 0, 0], [1, 0, 0], [0, 0, 1], [1, 0, 1]]
        assert fit_box(pts).size[1] == pytest.approx(1e-6)

    def test_empty(self):
        with pytest.raises(EmptyInput):
            fit_box(np.zeros((0, 3)))

    def test_collinear_bev(self):
        with pytest.raises(DegenerateGeometry):
            fit_box([[0, 0, 0], [1, 1, 0], [2, 2, 1], [3, 3, 0]], "min_area_yaw")

    @pytest.mark.parametrize("yaw", [0.3, -0.7, 1.2, 0.0, math.pi / 4 - 1e-3])
    def test_recovers_yaw(self, rng, yaw):
        truth = Box3([0.3, -0.2, 0.5], [1.6, 0.9, 1.0], yaw)
        pts = box_corners(truth)
        extra = rng.uniform(-0.5, 0.5, (200, 3)) * truth.size
        c, s = math.cos(yaw), math.sin(yaw)
        extra = np.column_stack([c * extra[:, 0] - s * extra[:, 1], s * extra[:, 0] + c * extra[:, 1],
                                 extra[:, 2]]) + truth.center
        fit = fit_box(np.vstack([pts, extra]), "min_area_yaw")
        assert -math.pi / 4 <= fit.yaw < math.pi / 4
        d = (fit.yaw - yaw) % (math.pi / 2)
        assert min(d, math.pi / 2 - d) < 1e-6
        assert np.prod(fit.size[:2]) == pytest.approx(1.6 * 0.9, abs=1e-9)
        assert iou3d(fit, truth) == pytest.approx(1.0, abs=1e-9)

    @given(st.lists(st.tuples(*[st.floats(-5, 5)] * 3), min_size=4, max_size=40))
    def test_axis_aligned_contains_inputs(self, pts):
        pts = np.array(pts)
        assume(np.sum(np.ptp(pts, axis=0) < 1e-6) < 2)
        assert points_in_box(pts, fit_box(pts)).all()

    @given(st.lists(st.tuples(*[st.floats(-5, 5)] * 3), min_size=4, max_size=40))
    def test_min_area_contains_and_not_larger(self, pts):
        pts = np.array(pts)
        try:
            rot = fit_box(pts, "min_area_yaw")
        except DegenerateGeometry:
            return
        assume(np.all(np.ptp(pts, axis=0) > 1e-3))
        aa = fit_box(pts)
        assert points_in_box(pts, rot, eps=1e-7).all()
        assert rot.size[0] * rot.size[1] <= aa.size[0] * aa.size[1] * (1 + 1e-9)


class TestNms:
    def test_suppresses_overlaps_keeps_order(self):
        bs = [UNIT, Box3([0.05, 0, 0], [1, 1, 1]), Box3([3, 0, 0], [1, 1, 1])]
        assert nms(bs, [0.9, 0.95, 0.1]) == [1, 2]

    def test_tie_broken_by_index(self):
        assert nms([UNIT, UNIT], [0.5, 0.5]) == [0]
