import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crackdet.errors import ShapeError
from crackdet.geometry import (BoxCenter, BoxCorner, SizeBucket, center_to_corner,
                               corner_to_center, giou, iou, iou_matrix, size_bucket)

coords = st.floats(min_value=-500, max_value=500, allow_nan=False, width=32)
sizes = st.floats(min_value=0.0, max_value=300, allow_nan=False, width=32)
# sizes bounded away from zero so translations cannot absorb a box's extent
solid_sizes = st.floats(min_value=0.0009765625, max_value=300, allow_nan=False, width=32)


def boxes(size_strategy=sizes):
    return st.builds(lambda x, y, w, h: BoxCorner(x, y, x + w, y + h),
                     coords, coords, size_strategy, size_strategy)


class TestIoU:
    def test_identical_boxes(self):
        b = BoxCorner(1, 2, 5, 6)
        assert iou(b, b) == 1.0

    def test_disjoint_boxes(self):
        assert iou(BoxCorner(0, 0, 1, 1), BoxCorner(5, 5, 6, 6)) == 0.0

    def test_known_overlap(self):
        assert abs(iou(BoxCorner(0, 0, 2, 2), BoxCorner(1, 0, 3, 2)) - 2.0 / 6.0) < 1e-12

    def test_degenerate_box_is_zero(self):
        z = BoxCorner(1, 1, 1, 1)
        assert iou(z, z) == 0.0
        assert iou(z, BoxCorner(0, 0, 2, 2)) == 0.0

    @given(boxes(), boxes())
    @settings(max_examples=150, deadline=None)
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0

    @given(boxes(), boxes(), st.floats(min_value=0.125, max_value=7, width=32))
    @settings(max_examples=100, deadline=None)
    def test_scale_invariance(self, a, b, s):
        scaled = lambda bx: BoxCorner(bx.x1 * s, bx.y1 * s, bx.x2 * s, bx.y2 * s)
        assert abs(iou(a, b) - iou(scaled(a), scaled(b))) < 1e-6


class TestGIoU:
    def test_identical_boxes(self):
        b = BoxCorner(0, 0, 3, 3)
        assert giou(b, b) == 1.0

    def test_touching_boxes(self):
        # enclosing box equals the union, so the penalty vanishes
        assert giou(BoxCorner(0, 0, 1, 1), BoxCorner(0, 1, 1, 2)) == 0.0

    def test_separated_boxes(self):
        v = giou(BoxCorner(0, 0, 1, 1), BoxCorner(2, 0, 3, 1))
        assert abs(v - (-1.0 / 3.0)) < 1e-12

    @given(boxes(), boxes())
    @settings(max_examples=150, deadline=None)
    def test_never_exceeds_iou(self, a, b):
        assert giou(a, b) <= iou(a, b) + 1e-12

    @given(boxes(solid_sizes), boxes(solid_sizes), coords, coords)
    @settings(max_examples=100, deadline=None)
    def test_translation_invariance(self, a, b, dx, dy):
        shift = lambda bx: BoxCorner(bx.x1 + dx, bx.y1 + dy, bx.x2 + dx, bx.y2 + dy)
        assert abs(giou(a, b) - giou(shift(a), shift(b))) < 1e-6


class TestConversions:
    def test_center_to_corner(self):
        c = center_to_corner(BoxCenter(5, 5, 4, 2))
        assert c.as_tuple() == (3.0, 4.0, 7.0, 6.0)

    def test_round_trip(self):
        b = BoxCorner(1.5, 2.25, 8.0, 11.0)
        back = center_to_corner(corner_to_center(b))
        assert np.allclose(back.as_tuple(), b.as_tuple())

    def test_zero_size_fixed_point(self):
        c = corner_to_center(BoxCorner(4, 4, 4, 4))
        assert (c.w, c.h) == (0.0, 0.0)
        assert center_to_corner(c).as_tuple() == (4.0, 4.0, 4.0, 4.0)

    def test_negative_size_rejected(self):
        with pytest.raises(ShapeError):
            BoxCenter(0, 0, -1, 2)
        with pytest.raises(ShapeError):
            BoxCorner(5, 0, 4, 1)


class TestSizeBuckets:
    @pytest.mark.parametrize("area,expected", [
        (900, SizeBucket.SMALL),
        (1023.999, SizeBucket.SMALL),
        (1024, SizeBucket.MEDIUM),
        (5000, SizeBucket.MEDIUM),
        (9216, SizeBucket.LARGE),
        (1e9, SizeBucket.LARGE),
        (0, SizeBucket.SMALL),
    ])
    def test_boundaries(self, area, expected):
        assert size_bucket(area) is expected

    def test_negative_area_rejected(self):
        with pytest.raises(ShapeError):
            size_bucket(-1.0)

    @given(st.floats(min_value=0, max_value=1e8, allow_nan=False))
    @settings(max_examples=100, deadline=None)
    def test_buckets_partition(self, area):
        assert size_bucket(area) in (SizeBucket.SMALL, SizeBucket.MEDIUM, SizeBucket.LARGE)


def test_iou_matrix_matches_scalar(rng):
    a = rng.uniform(0, 50, size=(6, 2))
    aw = rng.uniform(1, 20, size=(6, 2))
    b = rng.uniform(0, 50, size=(4, 2))
    bw = rng.uniform(1, 20, size=(4, 2))
    boxes_a = np.concatenate([a, a + aw], axis=1)
    boxes_b = np.concatenate([b, b + bw], axis=1)
    mat = iou_matrix(boxes_a, boxes_b)
    for i in range(6):
        for j in range(4):
            assert abs(mat[i, j] - iou(tuple(boxes_a[i]), tuple(boxes_b[j]))) < 1e-12
