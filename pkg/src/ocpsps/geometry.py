"""Box, quad and activation-grid primitives plus the keypoint coverage loss.

All coordinates are normalized to the unit image square, x to the right and
y downwards. Grid cell ``(i, j)`` covers ``[j/w, (j+1)/w] x [i/h, (i+1)/h]``.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import shapely

from .errors import DegenerateBox, EmptyLevels, InvariantViolation, ShapeMismatch

Point = Tuple[float, float]

DEFAULT_EPS = 0.1
DEFAULT_BIN_THRESH = 0.5


class SlotClass(str, enum.Enum):
    AVAILABLE = "available"
    OCCUPIED = "occupied"
    ILLEGAL = "illegal"
    RESTRICTED = "restricted"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True, order=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0) or math.isnan(v):
                raise InvariantViolation(name, f"{v} outside [0, 1]")
        if not self.x_min < self.x_max:
            raise InvariantViolation("x_max", "x_min must be < x_max")
        if not self.y_min < self.y_max:
            raise InvariantViolation("y_max", "y_min must be < y_max")
        if self.area <= 0.0:
            raise InvariantViolation("area", "box area underflows to zero")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> Point:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def corners(self) -> Tuple[Point, Point, Point, Point]:
        """Corners clockwise from the top-left (image coordinates)."""
        return _corners(self.as_tuple())

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def from_points(cls, points: Sequence[Point]) -> "BBox":
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        return cls(min(xs), min(ys), max(xs), max(ys))


@dataclass(frozen=True)
class Quad:
    keypoints: Tuple[Point, Point, Point, Point]

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.keypoints)
        if len(pts) != 4:
            raise InvariantViolation("keypoints", f"expected 4 points, got {len(pts)}")
        object.__setattr__(self, "keypoints", pts)
        for k, (x, y) in enumerate(pts):
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise InvariantViolation(f"keypoints[{k}]", f"({x}, {y}) outside [0, 1]")
        if not shapely.LinearRing(pts).is_simple:
            raise InvariantViolation("keypoints", "quad is self-intersecting")
        # raises if the wrapping box is degenerate
        BBox.from_points(pts)

    @property
    def bbox(self) -> BBox:
        return BBox.from_points(self.keypoints)

    def polygon(self) -> shapely.Polygon:
        return shapely.Polygon(self.keypoints)

    @classmethod
    def from_box(cls, x_min: float, y_min: float, x_max: float, y_max: float) -> "Quad":
        return cls(((x_min, y_min), (x_max, y_min), (x_max, y_max), (x_min, y_max)))


class GridMap:
    """Immutable ``height x width`` grid of activations in [0, 1]."""

    __slots__ = ("_values",)

    def __init__(self, values):
        arr = np.array(values, dtype=float)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvariantViolation("values", f"expected a non-empty 2D grid, got shape {arr.shape}")
        if not np.all((arr >= 0.0) & (arr <= 1.0)):
            raise InvariantViolation("values", "activations must lie in [0, 1]")
        arr.setflags(write=False)
        self._values = arr

    @classmethod
    def from_flat(cls, height: int, width: int, values: Sequence[float]) -> "GridMap":
        if len(values) != height * width:
            raise InvariantViolation("values", f"expected {height * width} values, got {len(values)}")
        return cls(np.asarray(values, dtype=float).reshape(height, width))

    @classmethod
    def full(cls, height: int, width: int, value: float = 0.0) -> "GridMap":
        return cls(np.full((height, width), value, dtype=float))

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def height(self) -> int:
        return self._values.shape[0]

    @property
    def width(self) -> int:
        return self._values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self._values.shape

    def flat(self) -> list:
        return self._values.ravel().tolist()

    def __eq__(self, other) -> bool:
        return isinstance(other, GridMap) and self.shape == other.shape and bool(
            np.array_equal(self._values, other._values)
        )

    def __hash__(self):
        return hash((self.shape, self._values.tobytes()))

    def __repr__(self) -> str:
        return f"GridMap({self.height}x{self.width})"


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _corners(box) -> Tuple[Point, Point, Point, Point]:
    x1, y1, x2, y2 = box
    return ((x1, y1), (x2, y1), (x2, y2), (x1, y2))


def match_corners(box, keypoints: Sequence[Point]) -> Tuple[int, ...]:
    """Injective keypoint -> corner assignment of minimal total distance.

    Returns ``m`` with ``m[k]`` the corner index paired with keypoint ``k``.
    Permutations are scanned in lexicographic order and only a strictly
    better total replaces the incumbent, so ties go to the lowest corner index.
    """
    corners = _corners(_box_tuple(box))
    best, best_total = None, math.inf
    for perm in itertools.permutations(range(4), len(keypoints)):
        total = sum(math.dist(corners[c], kp) for c, kp in zip(perm, keypoints))
        if total < best_total:
            best, best_total = perm, total
    return best


def size_loss(box, keypoints: Sequence[Point], matching: Optional[Sequence[int]] = None) -> float:
    """Keypoint coverage loss: sum of corner-to-keypoint over corner-to-center distances.

    ``box`` may be a :class:`BBox` or any ``(x1, y1, x2, y2)`` tuple; unlike
    ``BBox`` it is not restricted to the unit square, since the loss is
    evaluated on raw regression outputs. ``matching[k]`` names the corner
    (clockwise from top-left) pulled towards keypoint ``k``; by default the
    minimal-distance injective matching is used.
    """
    kps = [(float(x), float(y)) for x, y in keypoints]
    if not 1 <= len(kps) <= 4:
        raise ValueError(f"expected 1..4 keypoints, got {len(kps)}")
    box_t = _box_tuple(box)
    if matching is None:
        matching = match_corners(box_t, kps)
    if len(matching) != len(kps) or len(set(matching)) != len(matching):
        raise ValueError("matching must assign each keypoint a distinct corner")
    corners = _corners(box_t)
    center = ((box_t[0] + box_t[2]) / 2.0, (box_t[1] + box_t[3]) / 2.0)
    total = 0.0
    for kp, c in zip(kps, matching):
        d_pc = math.dist(corners[c], center)
        if d_pc == 0.0:
            raise DegenerateBox(f"corner {c} coincides with the box center")
        total += math.dist(corners[c], kp) / d_pc
    return total


def _box_tuple(box) -> Tuple[float, float, float, float]:
    if isinstance(box, BBox):
        return box.as_tuple()
    x1, y1, x2, y2 = box
    return (float(x1), float(y1), float(x2), float(y2))


def cell_centers(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    return np.meshgrid(xs, ys)


def mask_target(level_shape: Tuple[int, int], truths: Sequence[Quad]) -> GridMap:
    """Binary target map: a cell is on when its center lies in (or on) a quad."""
    h, w = level_shape
    if h < 1 or w < 1:
        raise ValueError(f"level shape must be positive, got {level_shape}")
    cx, cy = cell_centers(h, w)
    out = np.zeros((h, w), dtype=bool)
    for quad in truths:
        out |= shapely.intersects_xy(quad.polygon(), cx, cy)
    return GridMap(out.astype(float))


def epsilon_diff(m: GridMap, c: GridMap, eps: float = DEFAULT_EPS) -> float:
    if m.shape != c.shape:
        raise ShapeMismatch(f"{m.shape} vs {c.shape}")
    return float(np.mean(np.maximum(0.0, np.abs(m.values - c.values) - eps)))


def upsample_nearest(grid: GridMap, resolution: Tuple[int, int]) -> np.ndarray:
    h, w = resolution
    rows = np.minimum(((np.arange(h) + 0.5) * grid.height / h).astype(int), grid.height - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * grid.width / w).astype(int), grid.width - 1)
    return grid.values[np.ix_(rows, cols)]


def fuse_levels(levels: Sequence[GridMap], resolution: Tuple[int, int]) -> GridMap:
    if not levels:
        raise EmptyLevels("at least one soft-mask level is required")
    fused = upsample_nearest(levels[0], resolution)
    for level in levels[1:]:
        fused = np.maximum(fused, upsample_nearest(level, resolution))
    return GridMap(fused)


def box_mask_overlap(d: BBox, s: GridMap, bin_thresh: float = DEFAULT_BIN_THRESH) -> float:
    """Fraction of the box area covered by grid cells with activation >= ``bin_thresh``."""
    h, w = s.shape
    edges_x = np.arange(w + 1) / w
    edges_y = np.arange(h + 1) / h
    ox = np.clip(np.minimum(edges_x[1:], d.x_max) - np.maximum(edges_x[:-1], d.x_min), 0.0, None)
    oy = np.clip(np.minimum(edges_y[1:], d.y_max) - np.maximum(edges_y[:-1], d.y_min), 0.0, None)
    active = (s.values >= bin_thresh).astype(float)
    covered = float(oy @ active @ ox)
    return min(1.0, max(0.0, covered / d.area))
