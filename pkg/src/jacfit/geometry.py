"""Rectangles, segments, and raster masks over axis-aligned planar domains.

A :class:`RasterMask` samples a rectangle at pixel centers and stands in for
an exact planar set.  Neighborhood and component operations are computed from
center-to-center Euclidean distances, so every consumer inherits an O(pixel)
resolution error and is expected to budget for it.

All types are immutable values after construction and safe to share between
concurrent tasks.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "Rect",
    "Segment",
    "SegmentSet",
    "RasterMask",
    "UNIT_SQUARE",
    "neighborhoods",
    "connected_component",
    "inscribed_square",
    "square_at",
]

# 4-connectivity structuring element for component extraction.  8-connectivity
# would merge diagonally touching regions and change sub-level components.
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle with x0 < x1 and y0 < y1 (positive area)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(
                f"degenerate rectangle [{self.x0},{self.x1}]x[{self.y0},{self.y1}]:"
                " need x0 < x1 and y0 < y1"
            )

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def contains_point(self, x: float, y: float, tol: float = 0.0) -> bool:
        return (self.x0 - tol <= x <= self.x1 + tol) and (
            self.y0 - tol <= y <= self.y1 + tol
        )

    def contains_rect(self, other: "Rect", tol: float = 1e-12) -> bool:
        return (
            other.x0 >= self.x0 - tol
            and other.x1 <= self.x1 + tol
            and other.y0 >= self.y0 - tol
            and other.y1 <= self.y1 + tol
        )

    def intersection(self, other: "Rect") -> "Rect":
        """Intersection rectangle; raises if the overlap is degenerate."""
        return Rect(
            max(self.x0, other.x0),
            max(self.y0, other.y0),
            min(self.x1, other.x1),
            min(self.y1, other.y1),
        )

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_list(cls, vals: Sequence[float]) -> "Rect":
        if len(vals) != 4:
            raise ValueError("rect must be a list [x0, y0, x1, y1]")
        return cls(float(vals[0]), float(vals[1]), float(vals[2]), float(vals[3]))


UNIT_SQUARE = Rect(0.0, 0.0, 1.0, 1.0)


def square_at(center: Sequence[float], side: float) -> Rect:
    """Axis-aligned square of the given side length centered at a point."""
    if side <= 0:
        raise ValueError("square side must be positive")
    cx, cy = float(center[0]), float(center[1])
    h = 0.5 * side
    return Rect(cx - h, cy - h, cx + h, cy + h)


@dataclass(frozen=True)
class Segment:
    """Straight segment between two distinct points."""

    p: tuple[float, float]
    q: tuple[float, float]

    def __post_init__(self):
        p = (float(self.p[0]), float(self.p[1]))
        q = (float(self.q[0]), float(self.q[1]))
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        if p == q:
            raise ValueError("segment endpoints must be distinct")

    @property
    def length(self) -> float:
        return float(np.hypot(self.q[0] - self.p[0], self.q[1] - self.p[1]))

    def as_list(self) -> list[float]:
        return [self.p[0], self.p[1], self.q[0], self.q[1]]

    @classmethod
    def from_list(cls, vals: Sequence[float]) -> "Segment":
        if len(vals) != 4:
            raise ValueError("segment must be a list [px, py, qx, qy]")
        return cls((float(vals[0]), float(vals[1])), (float(vals[2]), float(vals[3])))


def _orient(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def _strictly_inside_colinear(px, py, ax, ay, bx, by, tol=1e-14):
    # point assumed colinear with (a, b); True if strictly between them
    if abs(bx - ax) >= abs(by - ay):
        lo, hi = min(ax, bx), max(ax, bx)
        return lo + tol < px < hi - tol
    lo, hi = min(ay, by), max(ay, by)
    return lo + tol < py < hi - tol


def open_segments_intersect(s: Segment, t: Segment) -> bool:
    """True if the open segments meet (shared endpoints do not count)."""
    ax, ay = s.p
    bx, by = s.q
    cx, cy = t.p
    dx, dy = t.q
    d1 = _orient(ax, ay, bx, by, cx, cy)
    d2 = _orient(ax, ay, bx, by, dx, dy)
    d3 = _orient(cx, cy, dx, dy, ax, ay)
    d4 = _orient(cx, cy, dx, dy, bx, by)
    if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and (
        (d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)
    ):
        return True
    # colinear or touching configurations: an endpoint lying strictly inside
    # the other segment counts, a shared endpoint does not
    if d1 == 0 and _strictly_inside_colinear(cx, cy, ax, ay, bx, by):
        return True
    if d2 == 0 and _strictly_inside_colinear(dx, dy, ax, ay, bx, by):
        return True
    if d3 == 0 and _strictly_inside_colinear(ax, ay, cx, cy, dx, dy):
        return True
    if d4 == 0 and _strictly_inside_colinear(bx, by, cx, cy, dx, dy):
        return True
    return False


class SegmentSet:
    """Ordered collection of pairwise non-intersecting segments.

    Open segments must be disjoint; touching at endpoints is allowed.
    """

    __slots__ = ("segments",)

    def __init__(self, segments: Iterable[Segment]):
        segs = tuple(segments)
        for i in range(len(segs)):
            for j in range(i + 1, len(segs)):
                if open_segments_intersect(segs[i], segs[j]):
                    raise ValueError(f"segments {i} and {j} intersect")
        object.__setattr__(self, "segments", segs)

    def __setattr__(self, name, value):
        raise AttributeError("SegmentSet is immutable")

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self) -> Iterator[Segment]:
        return iter(self.segments)

    def __getitem__(self, i: int) -> Segment:
        return self.segments[i]

    def to_json_list(self) -> list[list[float]]:
        return [s.as_list() for s in self.segments]

    @classmethod
    def from_json_list(cls, data: Iterable[Sequence[float]]) -> "SegmentSet":
        return cls(Segment.from_list(row) for row in data)


class RasterMask:
    """Boolean pixel grid over a rectangle, row-major from the bottom row.

    Pixel (ix, iy) has center (x0 + (ix+0.5)*dx, y0 + (iy+0.5)*dy) and the
    bit array is indexed bits[iy, ix].  The measure of the mask is the number
    of set bits times the pixel area.
    """

    __slots__ = ("rect", "nx", "ny", "bits")

    def __init__(self, rect: Rect, bits: np.ndarray):
        bits = np.ascontiguousarray(np.asarray(bits, dtype=bool))
        if bits.ndim != 2:
            raise ValueError("mask bits must be a 2-d boolean array")
        object.__setattr__(self, "rect", rect)
        object.__setattr__(self, "ny", int(bits.shape[0]))
        object.__setattr__(self, "nx", int(bits.shape[1]))
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    def __setattr__(self, name, value):
        raise AttributeError("RasterMask is immutable")

    # --- grid geometry -------------------------------------------------

    @property
    def dx(self) -> float:
        return self.rect.width / self.nx

    @property
    def dy(self) -> float:
        return self.rect.height / self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    def x_centers(self) -> np.ndarray:
        return self.rect.x0 + (np.arange(self.nx) + 0.5) * self.dx

    def y_centers(self) -> np.ndarray:
        return self.rect.y0 + (np.arange(self.ny) + 0.5) * self.dy

    def center_grids(self) -> tuple[np.ndarray, np.ndarray]:
        """Meshgrids (X, Y) of pixel centers, each shaped (ny, nx)."""
        return np.meshgrid(self.x_centers(), self.y_centers())

    def index_of_point(self, x: float, y: float) -> tuple[int, int]:
        """(iy, ix) of the pixel containing the point; raises if outside."""
        r = self.rect
        if not (r.x0 <= x <= r.x1 and r.y0 <= y <= r.y1):
            raise ValueError(f"point ({x}, {y}) outside the mask rectangle")
        ix = min(int((x - r.x0) / self.dx), self.nx - 1)
        iy = min(int((y - r.y0) / self.dy), self.ny - 1)
        return iy, ix

    def same_grid(self, other: "RasterMask", tol: float = 1e-12) -> bool:
        return (
            self.nx == other.nx
            and self.ny == other.ny
            and abs(self.rect.x0 - other.rect.x0) <= tol
            and abs(self.rect.y0 - other.rect.y0) <= tol
            and abs(self.rect.x1 - other.rect.x1) <= tol
            and abs(self.rect.y1 - other.rect.y1) <= tol
        )

    # --- measure and set algebra ---------------------------------------

    def count(self) -> int:
        return int(self.bits.sum())

    def measure(self) -> float:
        return self.count() * self.cell_area

    def is_empty(self) -> bool:
        return not self.bits.any()

    def _check_compatible(self, other: "RasterMask"):
        if not self.same_grid(other):
            raise ValueError("masks live on different grids")

    def union(self, other: "RasterMask") -> "RasterMask":
        self._check_compatible(other)
        return RasterMask(self.rect, self.bits | other.bits)

    def intersection(self, other: "RasterMask") -> "RasterMask":
        self._check_compatible(other)
        return RasterMask(self.rect, self.bits & other.bits)

    def is_subset_of(self, other: "RasterMask") -> bool:
        self._check_compatible(other)
        return not bool((self.bits & ~other.bits).any())

    # --- constructors ----------------------------------------------------

    @classmethod
    def full(cls, rect: Rect, nx: int, ny: int) -> "RasterMask":
        return cls(rect, np.ones((ny, nx), dtype=bool))

    @classmethod
    def empty(cls, rect: Rect, nx: int, ny: int) -> "RasterMask":
        return cls(rect, np.zeros((ny, nx), dtype=bool))

    @classmethod
    def from_predicate(cls, rect: Rect, nx: int, ny: int, fn) -> "RasterMask":
        """Mask of pixels whose center satisfies fn(X, Y) (vectorized)."""
        xs = rect.x0 + (np.arange(nx) + 0.5) * (rect.width / nx)
        ys = rect.y0 + (np.arange(ny) + 0.5) * (rect.height / ny)
        X, Y = np.meshgrid(xs, ys)
        return cls(rect, np.asarray(fn(X, Y), dtype=bool))

    @classmethod
    def from_region(cls, rect: Rect, nx: int, ny: int, region: Rect) -> "RasterMask":
        """Mask of pixels whose center lies inside the given sub-rectangle."""
        return cls.from_predicate(
            rect,
            nx,
            ny,
            lambda X, Y: (X >= region.x0)
            & (X <= region.x1)
            & (Y >= region.y0)
            & (Y <= region.y1),
        )

    # --- serialization ---------------------------------------------------

    def to_json_dict(self) -> dict:
        packed = np.packbits(self.bits.reshape(-1))
        return {
            "nx": self.nx,
            "ny": self.ny,
            "rect": self.rect.as_list(),
            "bits": base64.b64encode(packed.tobytes()).decode("ascii"),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "RasterMask":
        for key in ("nx", "ny", "rect", "bits"):
            if key not in data:
                err = ValueError(f"mask object: missing field '{key}'")
                err.field = key
                raise err
        nx, ny = int(data["nx"]), int(data["ny"])
        rect = Rect.from_list(data["rect"])
        raw = np.frombuffer(base64.b64decode(data["bits"]), dtype=np.uint8)
        bits = np.unpackbits(raw, count=nx * ny).astype(bool).reshape(ny, nx)
        return cls(rect, bits)


def neighborhoods(image_mask: RasterMask, eps: float) -> tuple[RasterMask, RasterMask]:
    """Outer eps-neighborhood and inner eps-core of a raster set.

    The outer mask collects pixels whose center lies within ``eps`` of a set
    pixel center.  The inner mask keeps the set pixels whose center is farther
    than ``eps`` from every unset pixel center, where the grid is treated as
    surrounded by a ring of unset pixels (so a full mask still loses a
    boundary strip).  Set pixels within one pixel diagonal of the complement
    never count as core, so degenerate sets (a lone pixel) have empty cores;
    for eps above a pixel diagonal this guard changes nothing.  Satisfies
    int <= mask <= ext as bit sets.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if image_mask.is_empty():
        raise ValueError("empty set has no neighborhoods")
    bits = image_mask.bits
    sampling = (image_mask.dy, image_mask.dx)

    dist_to_set = ndimage.distance_transform_edt(~bits, sampling=sampling)
    ext = dist_to_set <= eps

    padded = np.zeros((image_mask.ny + 2, image_mask.nx + 2), dtype=bool)
    padded[1:-1, 1:-1] = bits
    dist_to_unset = ndimage.distance_transform_edt(padded, sampling=sampling)
    threshold = max(eps, float(np.hypot(image_mask.dx, image_mask.dy)))
    core = bits & (dist_to_unset[1:-1, 1:-1] > threshold)

    return RasterMask(image_mask.rect, ext), RasterMask(image_mask.rect, core)


def connected_component(mask: RasterMask, seed: Sequence[float]) -> RasterMask:
    """Maximal 4-connected set of set pixels containing the seed point."""
    try:
        iy, ix = mask.index_of_point(float(seed[0]), float(seed[1]))
    except ValueError:
        raise ValueError("seed outside set") from None
    if not mask.bits[iy, ix]:
        raise ValueError("seed outside set")
    labels, _ = ndimage.label(mask.bits, structure=_CROSS)
    return RasterMask(mask.rect, labels == labels[iy, ix])


def largest_component(mask: RasterMask) -> RasterMask:
    """The 4-connected component of maximal pixel count."""
    if mask.is_empty():
        raise ValueError("empty set has no components")
    labels, n = ndimage.label(mask.bits, structure=_CROSS)
    counts = np.bincount(labels.reshape(-1))
    counts[0] = 0
    return RasterMask(mask.rect, labels == int(np.argmax(counts)))


def inscribed_square(mask: RasterMask, margin: int = 0) -> Rect:
    """Largest axis-aligned pixel-block square fully inside the mask.

    Returns the square's rectangle snapped to pixel boundaries, shrunk by
    ``margin`` pixels per side.  Works on the pixel lattice, so the result is
    square in pixel units (exactly square when dx == dy).
    """
    bits = mask.bits
    if not bits.any():
        raise ValueError("empty set contains no square")
    acc = np.zeros((mask.ny + 1, mask.nx + 1), dtype=np.int64)
    np.cumsum(np.cumsum(bits, axis=0), axis=1, out=acc[1:, 1:])

    def block_exists(k):
        if k > mask.ny or k > mask.nx:
            return None
        w = (
            acc[k:, k:]
            - acc[:-k or None, k:]
            - acc[k:, : -k or None]
            + acc[: -k or None, : -k or None]
        )
        hits = np.argwhere(w == k * k)
        return tuple(hits[0]) if hits.size else None

    best_k, best_pos = 0, None
    lo, hi = 1, min(mask.nx, mask.ny)
    while lo <= hi:
        mid = (lo + hi) // 2
        pos = block_exists(mid)
        if pos is not None:
            best_k, best_pos = mid, pos
            lo = mid + 1
        else:
            hi = mid - 1
    if best_pos is None:
        raise ValueError("empty set contains no square")
    if best_k - 2 * margin < 1:
        margin = 0
    iy, ix = best_pos
    iy += margin
    ix += margin
    k = best_k - 2 * margin
    r = mask.rect
    return Rect(
        r.x0 + ix * mask.dx,
        r.y0 + iy * mask.dy,
        r.x0 + (ix + k) * mask.dx,
        r.y0 + (iy + k) * mask.dy,
    )
