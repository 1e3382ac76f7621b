import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ocpsps.errors import DegenerateBox, EmptyLevels, InvariantViolation, ShapeMismatch
from ocpsps.geometry import (
    BBox,
    GridMap,
    Quad,
    SlotClass,
    box_mask_overlap,
    epsilon_diff,
    fuse_levels,
    iou,
    mask_target,
    match_corners,
    size_loss,
)

from oracles import coverage_by_area, nearest_upsample_loops, point_in_polygon


def _span():
    return st.tuples(st.floats(0, 1), st.floats(0, 1)).map(sorted).filter(lambda p: p[1] - p[0] > 1e-6)


@st.composite
def boxes(draw):
    x1, x2 = draw(_span())
    y1, y2 = draw(_span())
    return BBox(x1, y1, x2, y2)


@st.composite
def grids(draw, max_side=6):
    h = draw(st.integers(1, max_side))
    w = draw(st.integers(1, max_side))
    vals = draw(st.lists(st.floats(0, 1), min_size=h * w, max_size=h * w))
    return GridMap.from_flat(h, w, vals)


# ---------------------------------------------------------------- types

def test_bbox_rejects_bad_coordinates():
    with pytest.raises(InvariantViolation):
        BBox(0.5, 0.1, 0.5, 0.2)
    with pytest.raises(InvariantViolation):
        BBox(0.1, 0.1, 1.2, 0.2)
    with pytest.raises(InvariantViolation):
        BBox(0.3, 0.1, 0.2, 0.2)


def test_quad_rejects_self_intersection_and_wrong_count():
    with pytest.raises(InvariantViolation):
        Quad(((0.1, 0.1), (0.5, 0.5), (0.5, 0.1), (0.1, 0.5)))  # bow tie
    with pytest.raises(InvariantViolation):
        Quad(((0.1, 0.1), (0.5, 0.5), (0.5, 0.1)))
    q = Quad(((0.1, 0.2), (0.4, 0.1), (0.5, 0.6), (0.2, 0.5)))
    assert q.bbox == BBox(0.1, 0.1, 0.5, 0.6)


def test_gridmap_invariants():
    with pytest.raises(InvariantViolation):
        GridMap.from_flat(2, 2, [0.1, 0.2, 0.3])
    with pytest.raises(InvariantViolation):
        GridMap([[0.1, 1.5]])
    g = GridMap.from_flat(2, 3, [0, 0.1, 0.2, 0.3, 0.4, 0.5])
    assert g.shape == (2, 3)
    assert g.values[1, 0] == 0.3
    with pytest.raises(ValueError):
        g.values[0, 0] = 1.0


def test_slot_class_serializes_lowercase():
    assert [c.value for c in SlotClass] == ["available", "occupied", "illegal", "restricted"]
    assert SlotClass("illegal") is SlotClass.ILLEGAL


# ---------------------------------------------------------------- iou

def test_iou_identity():
    b = BBox(0, 0, 1, 1)
    assert iou(b, b) == 1.0


def test_iou_disjoint():
    assert iou(BBox(0, 0, 0.2, 0.2), BBox(0.5, 0.5, 0.9, 0.9)) == 0.0


def test_iou_half_overlap():
    # intersection 0.125, union 0.375
    assert iou(BBox(0, 0, 0.5, 0.5), BBox(0.25, 0, 0.75, 0.5)) == pytest.approx(1 / 3, abs=1e-12)


@settings(max_examples=300)
@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0


@settings(max_examples=200)
@given(boxes())
def test_iou_self_is_one(a):
    assert iou(a, a) == 1.0


# ---------------------------------------------------------------- size loss

def test_size_loss_zero_when_corners_on_keypoints():
    b = BBox(0.1, 0.2, 0.5, 0.7)
    assert size_loss(b, b.corners()) == 0.0


def test_size_loss_single_keypoint():
    # corner (1,1): distance to (2,1) is 1, to the center sqrt(2)
    assert size_loss((-1, -1, 1, 1), [(2, 1)]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_size_loss_two_unit_ratios():
    # keypoints sit exactly one center-distance beyond corners (1,1) and (-1,-1)
    r = math.sqrt(2)
    kps = [(1 + r, 1), (-1 - r, -1)]
    assert size_loss((-1, -1, 1, 1), kps) == pytest.approx(2.0, abs=1e-12)


def test_size_loss_explicit_matching():
    # pairing keypoint (2,1) with the top-left corner (-1,-1)
    expected = math.dist((-1, -1), (2, 1)) / math.sqrt(2)
    assert size_loss((-1, -1, 1, 1), [(2, 1)], matching=[0]) == pytest.approx(expected)


def test_size_loss_degenerate_box():
    with pytest.raises(DegenerateBox):
        size_loss((0.5, 0.5, 0.5, 0.5), [(0.1, 0.1)])


def test_size_loss_rejects_bad_counts():
    with pytest.raises(ValueError):
        size_loss((0, 0, 1, 1), [])
    with pytest.raises(ValueError):
        size_loss((0, 0, 1, 1), [(0, 0)] * 5)


def test_match_corners_minimal_and_tie_break():
    # all corners equidistant from the center: ties go to corner 0
    assert match_corners((0, 0, 1, 1), [(0.5, 0.5)]) == (0,)
    assert match_corners((0, 0, 1, 1), [(1.0, 1.0), (0.0, 0.0)]) == (2, 0)


@settings(max_examples=200)
@given(
    st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 5), st.floats(0.1, 5),
    st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=1, max_size=4),
    st.floats(0.1, 10),
)
def test_size_loss_scale_invariance(cx, cy, hw, hh, kps, s):
    box = (cx - hw, cy - hh, cx + hw, cy + hh)
    scaled_box = (cx - s * hw, cy - s * hh, cx + s * hw, cy + s * hh)
    scaled_kps = [(cx + s * (x - cx), cy + s * (y - cy)) for x, y in kps]
    m = match_corners(box, kps)
    assert size_loss(scaled_box, scaled_kps, m) == pytest.approx(size_loss(box, kps, m), rel=1e-9, abs=1e-9)


# ---------------------------------------------------------------- mask target

def test_mask_target_empty():
    assert np.all(mask_target((3, 5), []).values == 0)


def test_mask_target_full_image():
    g = mask_target((4, 6), [Quad.from_box(0, 0, 1, 1)])
    assert np.all(g.values == 1)


def test_mask_target_top_left_quadrant():
    g = mask_target((4, 4), [Quad.from_box(0, 0, 0.5, 0.5)])
    expected = np.zeros((4, 4))
    expected[:2, :2] = 1
    assert np.array_equal(g.values, expected)


def test_mask_target_matches_ray_casting():
    rng = np.random.default_rng(3)
    for _ in range(50):
        pts = rng.uniform(0, 1, size=(4, 2))
        # order around the centroid to keep the quad simple
        c = pts.mean(axis=0)
        pts = pts[np.argsort(np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0]))]
        quad = Quad(tuple(map(tuple, pts)))
        h, w = rng.integers(1, 12, size=2)
        g = mask_target((h, w), [quad])
        for i in range(h):
            for j in range(w):
                inside = point_in_polygon((j + 0.5) / w, (i + 0.5) / h, quad.keypoints)
                assert g.values[i, j] == float(inside)


def test_mask_target_rejects_bad_shape():
    with pytest.raises(ValueError):
        mask_target((0, 3), [])


# ---------------------------------------------------------------- epsilon diff

def test_epsilon_diff_examples():
    ones, zeros = GridMap.full(3, 3, 1.0), GridMap.full(3, 3, 0.0)
    assert epsilon_diff(ones, ones, 0.1) == 0.0
    assert epsilon_diff(ones, zeros, 0.1) == pytest.approx(0.9)
    assert epsilon_diff(ones, zeros, 1.0) == 0.0


def test_epsilon_diff_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        epsilon_diff(GridMap.full(2, 2), GridMap.full(2, 3))


@settings(max_examples=100)
@given(grids(), st.floats(0, 2))
def test_epsilon_diff_self_zero(g, e):
    assert epsilon_diff(g, g, e) == 0.0


# ---------------------------------------------------------------- fusion

def test_fuse_single_level_identity():
    g = GridMap([[0.1, 0.2], [0.3, 0.4]])
    assert fuse_levels([g], (2, 2)) == g


def test_fuse_with_zero_level():
    g = GridMap([[0.1, 0.9], [0.2, 0.3]])
    assert fuse_levels([GridMap.full(1, 1, 0.0), g], (2, 2)) == g


def test_fuse_two_levels():
    fused = fuse_levels([GridMap([[0.8]]), GridMap([[0.1, 0.9], [0.2, 0.3]])], (2, 2))
    assert np.allclose(fused.values, [[0.8, 0.9], [0.8, 0.8]])


def test_fuse_empty():
    with pytest.raises(EmptyLevels):
        fuse_levels([], (2, 2))


@settings(max_examples=100)
@given(st.lists(grids(), min_size=1, max_size=3), st.integers(1, 9), st.integers(1, 9))
def test_fuse_dominates_inputs(levels, h, w):
    fused = fuse_levels(levels, (h, w))
    for lv in levels:
        up = nearest_upsample_loops(lv.values, h, w)
        assert np.all(fused.values >= up)
    assert np.array_equal(fused.values, np.max([nearest_upsample_loops(l.values, h, w) for l in levels], axis=0))


# ---------------------------------------------------------------- box / mask overlap

def test_overlap_all_active():
    assert box_mask_overlap(BBox(0.1, 0.2, 0.7, 0.9), GridMap.full(4, 4, 0.6), 0.5) == pytest.approx(1.0)


def test_overlap_all_zero():
    assert box_mask_overlap(BBox(0.1, 0.2, 0.7, 0.9), GridMap.full(4, 4, 0.0), 0.5) == 0.0


def test_overlap_left_half():
    s = GridMap([[1.0, 0.0], [1.0, 0.0]])
    assert box_mask_overlap(BBox(0, 0, 0.5, 1), s, 0.5) == pytest.approx(1.0)
    assert box_mask_overlap(BBox(0, 0, 1, 1), s, 0.5) == pytest.approx(0.5)


@settings(max_examples=150, deadline=None)
@given(boxes(), grids(max_side=5), st.floats(0, 1))
def test_overlap_matches_polygon_area(b, g, t):
    assert box_mask_overlap(b, g, t) == pytest.approx(coverage_by_area(b.as_tuple(), g.values, t), abs=1e-9)


@settings(max_examples=150)
@given(boxes(), grids(), st.floats(0, 1), st.floats(0, 1))
def test_overlap_monotone_in_threshold(b, g, t1, t2):
    lo, hi = sorted((t1, t2))
    assert box_mask_overlap(b, g, lo) >= box_mask_overlap(b, g, hi) - 1e-12
