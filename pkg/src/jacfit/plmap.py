"""Piecewise-affine maps on a triangulated grid of a rectangle.

Each grid cell is split along its SW-NE diagonal into two triangles, and a
map is determined by the image positions of the (nx+1)*(ny+1) grid vertices.
The map is affine on each triangle, so its Jacobian is constant per triangle
and the distortion of every point pair is governed by the per-triangle
singular values of the affine differential.
"""

from __future__ import annotations

import numpy as np

from .density import DensityField
from .geometry import Rect, RasterMask, Segment, SegmentSet, UNIT_SQUARE

__all__ = [
    "PiecewiseAffineMap",
    "StretchReport",
    "identity_map",
    "jacobian_field",
    "bilipschitz_constant",
    "stretch_pairs",
    "singular_value_fields",
    "certified_injective",
    "rasterize_image",
]

# image triangles with signed area below this are numerically degenerate:
# determinant signs are meaningless at double precision underneath it
DEGENERATE_AREA = 1e-14


class PiecewiseAffineMap:
    """Vertex images of a triangulated grid; affine on each triangle.

    ``vertices`` has shape (ny+1, nx+1, 2), row-major from the bottom row of
    the domain rectangle.  Orientation preservation (positive triangle areas)
    is a contract of the operations, not of the constructor, so candidate
    maps can be built first and vetted afterwards.
    """

    __slots__ = ("rect", "nx", "ny", "vertices")

    def __init__(self, nx: int, ny: int, vertices: np.ndarray, rect: Rect = UNIT_SQUARE):
        if nx < 1 or ny < 1:
            raise ValueError("need at least one grid cell per axis")
        vertices = np.ascontiguousarray(np.asarray(vertices, dtype=float))
        if vertices.shape != (ny + 1, nx + 1, 2):
            raise ValueError(
                f"vertex array has shape {vertices.shape}, expected"
                f" {(ny + 1, nx + 1, 2)}"
            )
        if not np.all(np.isfinite(vertices)):
            raise ValueError("vertex coordinates must be finite")
        object.__setattr__(self, "rect", rect)
        object.__setattr__(self, "nx", int(nx))
        object.__setattr__(self, "ny", int(ny))
        vertices.flags.writeable = False
        object.__setattr__(self, "vertices", vertices)

    def __setattr__(self, name, value):
        raise AttributeError("PiecewiseAffineMap is immutable")

    @property
    def hx(self) -> float:
        return self.rect.width / self.nx

    @property
    def hy(self) -> float:
        return self.rect.height / self.ny

    def with_vertices(self, vertices: np.ndarray) -> "PiecewiseAffineMap":
        return PiecewiseAffineMap(self.nx, self.ny, vertices, self.rect)

    # --- per-triangle differentials -------------------------------------

    def differentials(self) -> tuple[np.ndarray, np.ndarray]:
        """Affine differentials (F_lower, F_upper), each (ny, nx, 2, 2).

        The lower triangle of a cell is (SW, SE, NE), the upper (SW, NE, NW),
        both counterclockwise in the domain.
        """
        V = self.vertices
        Q00 = V[:-1, :-1]
        Q10 = V[:-1, 1:]
        Q01 = V[1:, :-1]
        Q11 = V[1:, 1:]
        hx, hy = self.hx, self.hy
        Fl = np.empty(Q00.shape[:2] + (2, 2))
        Fl[..., :, 0] = (Q10 - Q00) / hx
        Fl[..., :, 1] = (Q11 - Q10) / hy
        Fu = np.empty(Q00.shape[:2] + (2, 2))
        Fu[..., :, 0] = (Q11 - Q01) / hx
        Fu[..., :, 1] = (Q01 - Q00) / hy
        return Fl, Fu

    def triangle_determinants(self) -> tuple[np.ndarray, np.ndarray]:
        """Jacobian determinant per triangle, (lower, upper) of shape (ny, nx)."""
        Fl, Fu = self.differentials()
        det_l = Fl[..., 0, 0] * Fl[..., 1, 1] - Fl[..., 0, 1] * Fl[..., 1, 0]
        det_u = Fu[..., 0, 0] * Fu[..., 1, 1] - Fu[..., 0, 1] * Fu[..., 1, 0]
        return det_l, det_u

    def min_triangle_area(self) -> float:
        det_l, det_u = self.triangle_determinants()
        tri_area = 0.5 * self.hx * self.hy
        return float(min(det_l.min(), det_u.min()) * tri_area)

    def is_degenerate(self) -> bool:
        return self.min_triangle_area() < DEGENERATE_AREA

    # --- point evaluation ------------------------------------------------

    def evaluate(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Image of points (x, y), evaluated by barycentric interpolation."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        r = self.rect
        tol = 1e-9 * max(r.width, r.height)
        if (
            (x < r.x0 - tol).any()
            or (x > r.x1 + tol).any()
            or (y < r.y0 - tol).any()
            or (y > r.y1 + tol).any()
        ):
            raise ValueError("point outside the map domain")
        ux = (x - r.x0) / self.hx
        uy = (y - r.y0) / self.hy
        ix = np.clip(np.floor(ux).astype(int), 0, self.nx - 1)
        iy = np.clip(np.floor(uy).astype(int), 0, self.ny - 1)
        u = ux - ix
        v = uy - iy
        V = self.vertices
        Q00 = V[iy, ix]
        Q10 = V[iy, ix + 1]
        Q01 = V[iy + 1, ix]
        Q11 = V[iy + 1, ix + 1]
        lower = (u >= v)[..., None]
        f_lower = Q00 + u[..., None] * (Q10 - Q00) + v[..., None] * (Q11 - Q10)
        f_upper = Q00 + u[..., None] * (Q11 - Q01) + v[..., None] * (Q01 - Q00)
        f = np.where(lower, f_lower, f_upper)
        return f[..., 0], f[..., 1]

    def boundary_polygon(self) -> np.ndarray:
        """Image vertices of the domain boundary, counterclockwise, closed."""
        V = self.vertices
        bottom = V[0, :, :]
        right = V[1:, -1, :]
        top = V[-1, -2::-1, :]
        left = V[-2:0:-1, 0, :]
        return np.concatenate([bottom, right, top, left, bottom[:1]], axis=0)

    # --- serialization ---------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "nx": self.nx,
            "ny": self.ny,
            "rect": self.rect.as_list(),
            "vertices": self.vertices.reshape(-1, 2).tolist(),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "PiecewiseAffineMap":
        for key in ("nx", "ny", "vertices"):
            if key not in data:
                err = ValueError(f"map object: missing field '{key}'")
                err.field = key
                raise err
        nx, ny = int(data["nx"]), int(data["ny"])
        verts = np.asarray(data["vertices"], dtype=float)
        if verts.shape != ((nx + 1) * (ny + 1), 2):
            err = ValueError(
                f"map object: field 'vertices' has shape {verts.shape},"
                f" expected {((nx + 1) * (ny + 1), 2)}"
            )
            err.field = "vertices"
            raise err
        rect = Rect.from_list(data["rect"]) if "rect" in data else UNIT_SQUARE
        return cls(nx, ny, verts.reshape(ny + 1, nx + 1, 2), rect)


def identity_map(nx: int, ny: int, rect: Rect = UNIT_SQUARE) -> PiecewiseAffineMap:
    """Map whose vertices sit at their domain positions."""
    xs = rect.x0 + np.arange(nx + 1) * (rect.width / nx)
    ys = rect.y0 + np.arange(ny + 1) * (rect.height / ny)
    X, Y = np.meshgrid(xs, ys)
    return PiecewiseAffineMap(nx, ny, np.stack([X, Y], axis=-1), rect)


def _require_orientation(pam: PiecewiseAffineMap, det_l, det_u):
    tri_area = 0.5 * pam.hx * pam.hy
    if min(det_l.min(), det_u.min()) * tri_area < DEGENERATE_AREA:
        raise ValueError("map not a local homeomorphism")


def jacobian_field(pam: PiecewiseAffineMap) -> DensityField:
    """Per-cell Jacobian: the average of the cell's two triangle determinants.

    Both triangles cover half the cell, so the plain average preserves the
    integral: integrating the result over the full mask returns the exact
    image area of the map.
    """
    det_l, det_u = pam.triangle_determinants()
    _require_orientation(pam, det_l, det_u)
    vals = 0.5 * (det_l + det_u)
    return DensityField(pam.rect, vals)


def _singular_values(F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form singular values of 2x2 matrices stacked in (..., 2, 2)."""
    a = F[..., 0, 0]
    b = F[..., 0, 1]
    c = F[..., 1, 0]
    d = F[..., 1, 1]
    e = 0.5 * (a + d)
    h = 0.5 * (a - d)
    f = 0.5 * (c + b)
    g = 0.5 * (c - b)
    h1 = np.hypot(e, g)
    h2 = np.hypot(h, f)
    return h1 + h2, np.abs(h1 - h2)


def singular_value_fields(pam: PiecewiseAffineMap):
    """(sigma_max, sigma_min) per triangle as (lower, upper) array pairs."""
    Fl, Fu = pam.differentials()
    return _singular_values(Fl), _singular_values(Fu)


def bilipschitz_constant(pam: PiecewiseAffineMap) -> float:
    """Smallest L compatible with the per-triangle singular values.

    Equals max over triangles of max(sigma_max, 1/sigma_min).  This is exact
    for globally injective piecewise-affine maps whose pairwise distortions
    are governed by the per-triangle differentials, and a certified lower
    bound in general; use :func:`certified_injective` to decide which case
    applies.
    """
    det_l, det_u = pam.triangle_determinants()
    _require_orientation(pam, det_l, det_u)
    (s1_l, s2_l), (s1_u, s2_u) = singular_value_fields(pam)
    s_max = max(float(s1_l.max()), float(s1_u.max()))
    s_min = min(float(s2_l.min()), float(s2_u.min()))
    return max(s_max, 1.0 / s_min)


def _segments_properly_cross(p0, p1, q0, q1):
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(p0, p1, q0)
    d2 = orient(p0, p1, q1)
    d3 = orient(q0, q1, p0)
    d4 = orient(q0, q1, p1)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0


def _boundary_is_simple(poly: np.ndarray) -> bool:
    """Sweep-line self-intersection test of a closed polygon.

    Segments are sorted by their smaller x; each segment is tested against
    the active set of segments whose x-interval still overlaps.  Adjacent
    edges share an endpoint and are skipped.
    """
    pts = poly[:-1]
    n = len(pts)
    segs = [(pts[i], pts[(i + 1) % n]) for i in range(n)]
    xmin = np.minimum(poly[:-1, 0], poly[1:, 0])
    xmax = np.maximum(poly[:-1, 0], poly[1:, 0])
    order = np.argsort(xmin, kind="stable")
    active: list[int] = []
    for idx in order:
        x_lo = xmin[idx]
        active = [j for j in active if xmax[j] >= x_lo]
        a0, a1 = segs[idx]
        for j in active:
            if abs(idx - j) in (1, n - 1):
                continue
            b0, b1 = segs[j]
            if _segments_properly_cross(a0, a1, b0, b1):
                return False
        active.append(idx)
    return True


def certified_injective(pam: PiecewiseAffineMap) -> bool:
    """True when positive orientation plus a simple image boundary hold.

    For an orientation-preserving piecewise-affine map of a rectangle, a
    non-self-intersecting boundary image certifies global injectivity, which
    upgrades :func:`bilipschitz_constant` from a lower bound to the exact
    pairwise constant.
    """
    det_l, det_u = pam.triangle_determinants()
    tri_area = 0.5 * pam.hx * pam.hy
    if min(det_l.min(), det_u.min()) * tri_area < DEGENERATE_AREA:
        return False
    return _boundary_is_simple(pam.boundary_polygon())


class StretchReport:
    """Per-segment image-to-domain length ratios under a map."""

    __slots__ = ("pairs", "min_ratio", "max_ratio")

    def __init__(self, pairs):
        pairs = tuple(pairs)
        if not pairs:
            raise ValueError("stretch report needs at least one segment")
        ratios = [r for _, r in pairs]
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "min_ratio", float(min(ratios)))
        object.__setattr__(self, "max_ratio", float(max(ratios)))

    def __setattr__(self, name, value):
        raise AttributeError("StretchReport is immutable")

    def stretched(self, amount: float):
        """Segments whose endpoints are amount-stretched (ratio >= amount)."""
        return [(s, r) for (s, r) in self.pairs if r >= amount]

    def argmax(self) -> tuple[Segment, float]:
        best = max(range(len(self.pairs)), key=lambda i: self.pairs[i][1])
        return self.pairs[best]

    def to_json_dict(self) -> dict:
        return {
            "pairs": [
                {"segment": s.as_list(), "ratio": r} for (s, r) in self.pairs
            ],
            "min_ratio": self.min_ratio,
            "max_ratio": self.max_ratio,
        }


def stretch_pairs(pam: PiecewiseAffineMap, segments: SegmentSet) -> StretchReport:
    """Ratio ||f(p)-f(q)|| / ||p-q|| for each segment's endpoint pair."""
    if len(segments) == 0:
        raise ValueError("stretch report needs at least one segment")
    P = np.array([s.p for s in segments])
    Q = np.array([s.q for s in segments])
    try:
        fpx, fpy = pam.evaluate(P[:, 0], P[:, 1])
        fqx, fqy = pam.evaluate(Q[:, 0], Q[:, 1])
    except ValueError:
        raise ValueError("segment endpoint outside the map domain") from None
    num = np.hypot(fqx - fpx, fqy - fpy)
    den = np.hypot(Q[:, 0] - P[:, 0], Q[:, 1] - P[:, 1])
    ratios = num / den
    return StretchReport(list(zip(segments, (float(r) for r in ratios))))


def rasterize_image(
    pam: PiecewiseAffineMap,
    domain_mask: RasterMask,
    image_rect: Rect,
    nx: int,
    ny: int,
) -> RasterMask:
    """Raster image of a masked domain region under the map.

    Forward-samples each set pixel on a subgrid dense enough (relative to the
    map's maximal singular value) that the image samples are spaced no wider
    than an image pixel, then marks every image pixel hit.  Accuracy is one
    pixel band around the image boundary.
    """
    if not (
        domain_mask.nx == pam.nx
        and domain_mask.ny == pam.ny
        and pam.rect.contains_rect(domain_mask.rect)
    ):
        raise ValueError("domain mask must live on the map's grid")
    (s1_l, _), (s1_u, _) = singular_value_fields(pam)
    smax = max(float(s1_l.max()), float(s1_u.max()))
    pitch_dom = max(domain_mask.dx, domain_mask.dy)
    pitch_img = min(image_rect.width / nx, image_rect.height / ny)
    sub = int(np.ceil(smax * pitch_dom / pitch_img)) + 1
    sub = min(max(sub, 1), 16)

    iy, ix = np.nonzero(domain_mask.bits)
    offsets = (np.arange(sub) + 0.5) / sub
    bits = np.zeros((ny, nx), dtype=bool)
    r = domain_mask.rect
    for oy in offsets:
        for ox in offsets:
            xs = r.x0 + (ix + ox) * domain_mask.dx
            ys = r.y0 + (iy + oy) * domain_mask.dy
            fx, fy = pam.evaluate(xs, ys)
            jx = np.floor((fx - image_rect.x0) / (image_rect.width / nx)).astype(int)
            jy = np.floor((fy - image_rect.y0) / (image_rect.height / ny)).astype(int)
            keep = (jx >= 0) & (jx < nx) & (jy >= 0) & (jy < ny)
            bits[jy[keep], jx[keep]] = True
    return RasterMask(image_rect, bits)
