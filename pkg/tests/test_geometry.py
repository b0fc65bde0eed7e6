"""Oriented-box geometry tests: analytic fixtures plus an independent
polygon-library oracle for the clipping path."""

import math

import numpy as np
import pytest
from shapely.geometry import Polygon

from pillardet import geometry as geo


class TestNormalizeAngle:
    def test_half_open_interval(self):
        assert geo.normalize_angle(math.pi) == pytest.approx(math.pi)
        assert geo.normalize_angle(-math.pi) == pytest.approx(math.pi)
        assert geo.normalize_angle(1.5 * math.pi) == pytest.approx(-0.5 * math.pi)
        assert geo.normalize_angle(0.0) == 0.0

    def test_periodic(self):
        rng = np.random.default_rng(0)
        theta = rng.uniform(-10, 10, size=200)
        base = geo.normalize_angle(theta)
        assert np.all(base > -math.pi) and np.all(base <= math.pi)
        shifted = geo.normalize_angle(theta + 4 * math.pi)
        np.testing.assert_allclose(shifted, base, atol=1e-9)


class TestCorners:
    def test_axis_aligned(self):
        c = geo.box_corners_bev(0.0, 0.0, 2.0, 4.0, 0.0)
        np.testing.assert_allclose(sorted(map(tuple, c)),
                                   [(-2, -1), (-2, 1), (2, -1), (2, 1)])

    def test_quarter_turn_swaps_extents(self):
        c = geo.box_corners_bev(1.0, 2.0, 2.0, 4.0, math.pi / 2.0)
        np.testing.assert_allclose(sorted(map(tuple, c)),
                                   [(0, 0), (0, 4), (2, 0), (2, 4)], atol=1e-12)

    def test_counter_clockwise(self):
        c = geo.box_corners_bev(3.0, -1.0, 1.0, 2.0, 0.7)
        assert geo.polygon_area(c) == pytest.approx(2.0)
        signed = 0.5 * np.sum(c[:, 0] * np.roll(c[:, 1], -1) - c[:, 1] * np.roll(c[:, 0], -1))
        assert signed > 0


class TestRotatedIoU:
    def test_identical_boxes(self):
        box = (1.0, 2.0, 1.5, 3.0, 0.4)
        assert geo.rotated_iou_bev(box, box) == pytest.approx(1.0)

    def test_offset_unit_squares_exact_third(self):
        """Unit squares offset by 0.5 in x: intersection 0.5, union 1.5."""
        a = (0.0, 0.0, 1.0, 1.0, 0.0)
        b = (0.5, 0.0, 1.0, 1.0, 0.0)
        assert geo.rotated_iou_bev(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_square_vs_its_45_degree_rotation(self):
        """Intersection is the regular octagon 2*sqrt(2)-2, IoU = 1/sqrt(2)."""
        a = (0.0, 0.0, 1.0, 1.0, 0.0)
        b = (0.0, 0.0, 1.0, 1.0, math.pi / 4.0)
        assert geo.rotated_iou_bev(a, b) == pytest.approx(1.0 / math.sqrt(2.0), abs=1e-12)

    def test_disjoint(self):
        a = (0.0, 0.0, 1.0, 1.0, 0.3)
        b = (10.0, 0.0, 1.0, 1.0, -0.3)
        assert geo.rotated_iou_bev(a, b) == 0.0

    def test_containment(self):
        outer = (0.0, 0.0, 4.0, 4.0, 0.0)
        inner = (0.0, 0.0, 2.0, 2.0, 1.0)
        assert geo.rotated_iou_bev(outer, inner) == pytest.approx(4.0 / 16.0, abs=1e-12)

    def test_matches_polygon_library_on_random_pairs(self):
        rng = np.random.default_rng(42)
        for _ in range(300):
            a = (rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.5, 3),
                 rng.uniform(0.5, 4), rng.uniform(-math.pi, math.pi))
            b = (rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.5, 3),
                 rng.uniform(0.5, 4), rng.uniform(-math.pi, math.pi))
            pa = Polygon(geo.box_corners_bev(*a))
            pb = Polygon(geo.box_corners_bev(*b))
            inter = pa.intersection(pb).area
            expect = inter / (pa.area + pb.area - inter)
            assert geo.rotated_iou_bev(a, b) == pytest.approx(expect, abs=1e-9)

    def test_matrix_matches_pairwise(self):
        rng = np.random.default_rng(7)
        boxes_a = np.column_stack([rng.uniform(-1, 1, 8), rng.uniform(-1, 1, 8),
                                   rng.uniform(0.5, 2, 8), rng.uniform(0.5, 2, 8),
                                   rng.uniform(-3, 3, 8)])
        boxes_b = boxes_a[::-1].copy()
        mat = geo.iou_bev_matrix(boxes_a, boxes_b)
        for i in range(8):
            for j in range(8):
                assert mat[i, j] == pytest.approx(
                    geo.rotated_iou_bev(boxes_a[i], boxes_b[j]), abs=1e-12)

    def test_matrix_empty(self):
        assert geo.iou_bev_matrix(np.zeros((0, 5)), np.zeros((3, 5))).shape == (0, 3)


class TestIoU3d:
    def test_identical(self):
        box = (1.0, 2.0, -0.5, 1.5, 3.0, 1.2, 0.4)
        assert geo.rotated_iou_3d(box, box) == pytest.approx(1.0)

    def test_vertical_offset_only(self):
        """Same footprint, half the height overlapping: inter = V/2, union = 3V/2."""
        a = (0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0)
        b = (0.0, 0.0, 1.0, 2.0, 2.0, 2.0, 0.0)
        assert geo.rotated_iou_3d(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_no_vertical_overlap(self):
        a = (0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0)
        b = (0.0, 0.0, 5.0, 2.0, 2.0, 1.0, 0.0)
        assert geo.rotated_iou_3d(a, b) == 0.0


class TestPointsInBox:
    def test_axis_aligned(self):
        pts = np.array([[0.0, 0.0, 0.0], [1.9, 0.0, 0.0], [2.1, 0.0, 0.0],
                        [0.0, 0.9, 0.0], [0.0, 1.1, 0.0], [0.0, 0.0, 0.6]])
        mask = geo.points_in_box_mask(pts, (0, 0, 0), (2.0, 4.0, 1.0), 0.0)
        np.testing.assert_array_equal(mask, [True, True, False, True, False, False])

    def test_rotation_vs_rotated_points(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(-3, 3, size=(500, 3))
        heading = 0.77
        mask = geo.points_in_box_mask(pts, (0.5, -0.2, 0.1), (1.0, 2.0, 1.0), heading)
        # rotate the points into the box frame by hand and compare
        c, s = math.cos(-heading), math.sin(-heading)
        rel = pts - np.array([0.5, -0.2, 0.1])
        lx = c * rel[:, 0] - s * rel[:, 1]
        ly = s * rel[:, 0] + c * rel[:, 1]
        expect = (np.abs(lx) <= 1.0) & (np.abs(ly) <= 0.5) & (np.abs(rel[:, 2]) <= 0.5)
        np.testing.assert_array_equal(mask, expect)

    def test_dilation(self):
        pts = np.array([[1.05, 0.0, 0.0]])
        assert not geo.points_in_box_mask(pts, (0, 0, 0), (2.0, 2.0, 2.0), 0.0)[0]
        assert geo.points_in_box_mask(pts, (0, 0, 0), (2.0, 2.0, 2.0), 0.0, dilation=0.1)[0]
