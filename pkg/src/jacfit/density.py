"""Grid-sampled positive densities and the perturbations that make them hard.

A :class:`DensityField` holds samples of a positive function at the pixel
centers of a rectangle, interpreted as piecewise constant per pixel.  The
module builds alternating checkerboard strips, glues a prescribed bad patch
into a field through a partition of unity (sup-norm perturbation), and
performs the floor-truncation plus density-square patching used for bounded
(sup-norm up to 2*eps) perturbations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .geometry import Rect, RasterMask, UNIT_SQUARE

__all__ = [
    "DensityField",
    "CheckerboardSpec",
    "PartitionWeights",
    "make_checkerboard",
    "make_checkerboard_on_unit_square",
    "integrate",
    "truncate_floor",
    "extend_patch",
    "partition_weights",
    "perturb_glue",
    "find_density_square",
    "patch_linf",
    "striped_field",
    "crop",
]

_RANGE_TOL = 1e-12


class DensityField:
    """Positive samples on a pixel grid, with a declared value range [a, b].

    The declared range may be wider than the actual sample range; it must
    contain it.  Values are stored row-major from the bottom row, matching
    :class:`~jacfit.geometry.RasterMask`.
    """

    __slots__ = ("rect", "nx", "ny", "values", "declared_range")

    def __init__(self, rect: Rect, values: np.ndarray, declared_range=None):
        values = np.ascontiguousarray(np.asarray(values, dtype=float))
        if values.ndim != 2:
            raise ValueError("density values must be a 2-d array")
        if not np.all(np.isfinite(values)):
            raise ValueError("density values must be finite")
        vmin = float(values.min())
        vmax = float(values.max())
        if vmin <= 0.0:
            raise ValueError("density values must be positive")
        if declared_range is None:
            declared_range = (vmin, vmax)
        a, b = float(declared_range[0]), float(declared_range[1])
        if a > vmin + _RANGE_TOL or b < vmax - _RANGE_TOL:
            raise ValueError(
                f"declared range [{a}, {b}] does not contain the sample range"
                f" [{vmin}, {vmax}]"
            )
        object.__setattr__(self, "rect", rect)
        object.__setattr__(self, "ny", int(values.shape[0]))
        object.__setattr__(self, "nx", int(values.shape[1]))
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "declared_range", (a, b))

    def __setattr__(self, name, value):
        raise AttributeError("DensityField is immutable")

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
        return np.meshgrid(self.x_centers(), self.y_centers())

    def value_range(self) -> tuple[float, float]:
        return float(self.values.min()), float(self.values.max())

    def same_grid(self, other, tol: float = 1e-12) -> bool:
        return (
            self.nx == other.nx
            and self.ny == other.ny
            and abs(self.rect.x0 - other.rect.x0) <= tol
            and abs(self.rect.y0 - other.rect.y0) <= tol
            and abs(self.rect.x1 - other.rect.x1) <= tol
            and abs(self.rect.y1 - other.rect.y1) <= tol
        )

    def full_mask(self) -> RasterMask:
        return RasterMask.full(self.rect, self.nx, self.ny)

    def region_mask(self, region: Rect) -> RasterMask:
        return RasterMask.from_region(self.rect, self.nx, self.ny, region)

    # --- constructors ---------------------------------------------------

    @classmethod
    def constant(cls, rect: Rect, nx: int, ny: int, value: float, declared_range=None):
        vals = np.full((ny, nx), float(value))
        return cls(rect, vals, declared_range)

    @classmethod
    def from_function(
        cls, rect: Rect, nx: int, ny: int, fn: Callable, declared_range=None
    ):
        xs = rect.x0 + (np.arange(nx) + 0.5) * (rect.width / nx)
        ys = rect.y0 + (np.arange(ny) + 0.5) * (rect.height / ny)
        X, Y = np.meshgrid(xs, ys)
        return cls(rect, np.asarray(fn(X, Y), dtype=float), declared_range)

    # --- serialization --------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "nx": self.nx,
            "ny": self.ny,
            "rect": self.rect.as_list(),
            "range": [self.declared_range[0], self.declared_range[1]],
            "values": self.values.reshape(-1).tolist(),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "DensityField":
        for key in ("nx", "ny", "rect", "range", "values"):
            if key not in data:
                err = ValueError(f"density object: missing field '{key}'")
                err.field = key
                raise err
        nx, ny = int(data["nx"]), int(data["ny"])
        vals = np.asarray(data["values"], dtype=float)
        if vals.size != nx * ny:
            err = ValueError(
                f"density object: field 'values' has {vals.size} entries,"
                f" expected nx*ny = {nx * ny}"
            )
            err.field = "values"
            raise err
        rect = Rect.from_list(data["rect"])
        rng = data["range"]
        return cls(rect, vals.reshape(ny, nx), (float(rng[0]), float(rng[1])))

    def to_csv(self) -> str:
        lines = []
        for row in self.values:
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class CheckerboardSpec:
    """Alternating-strip parameters: n cells across, amplitude c above 1."""

    n: int
    c: float

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("cell count must be at least 1")
        if self.c <= 0:
            raise ValueError("amplitude must be positive")


def make_checkerboard(spec: CheckerboardSpec, nx: int, ny: int) -> DensityField:
    """Sample the alternating density on the strip [0,1] x [0,1/n].

    The strip splits into n subsquares of side 1/n; the value is 1 on the
    even-indexed squares and 1+c on the odd-indexed ones (1-based from the
    left).  Requires nx to be a multiple of n so the square boundaries fall
    on pixel boundaries, keeping integrals exact.
    """
    n, c = spec.n, spec.c
    if nx % n != 0:
        raise ValueError("cells misaligned with grid")
    rect = Rect(0.0, 0.0, 1.0, 1.0 / n)
    xs = (np.arange(nx) + 0.5) / nx
    cell_index = np.floor(xs * n).astype(int) + 1
    row = np.where(cell_index % 2 == 1, 1.0 + c, 1.0)
    vals = np.tile(row, (ny, 1))
    return DensityField(rect, vals, (1.0, 1.0 + c))


def make_checkerboard_on_unit_square(
    spec: CheckerboardSpec, nx: int, ny: int, fill: float = 1.0
) -> DensityField:
    """Alternating strip at the bottom of the unit square, fill elsewhere.

    Requires both nx and ny to be multiples of n so the strip's cell edges
    land on pixel boundaries of the embedding grid.
    """
    n, c = spec.n, spec.c
    if nx % n != 0 or ny % n != 0:
        raise ValueError("cells misaligned with grid")
    if fill <= 0:
        raise ValueError("fill value must be positive")
    xs = (np.arange(nx) + 0.5) / nx
    ys = (np.arange(ny) + 0.5) / ny
    cell_index = np.floor(xs * n).astype(int) + 1
    row = np.where(cell_index % 2 == 1, 1.0 + c, 1.0)
    vals = np.full((ny, nx), float(fill))
    in_strip = ys < 1.0 / n
    vals[in_strip, :] = row
    lo = min(1.0, fill)
    hi = max(1.0 + c, fill)
    return DensityField(UNIT_SQUARE, vals, (lo, hi))


def integrate(rho: DensityField, region: RasterMask) -> float:
    """Midpoint-rule integral of the density over the masked region.

    Exact for piecewise-constant fields whose pieces align with the grid.
    """
    if not rho.same_grid(region):
        raise ValueError("resolution mismatch between density and mask")
    return float(rho.values[region.bits].sum() * rho.cell_area)


def truncate_floor(phi: DensityField, eps: float) -> DensityField:
    """Pointwise max(phi, eps); raises nothing and never lowers a value."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    vals = np.maximum(phi.values, eps)
    a, b = phi.declared_range
    return DensityField(phi.rect, vals, (max(a, eps), max(b, eps)))


def striped_field(
    rect: Rect, nx: int, ny: int, n_strips: int, lo: float, hi: float
) -> DensityField:
    """Vertical strips across the rectangle: odd strips hi, even strips lo.

    This is the alternating pattern rescaled into an arbitrary rectangle and
    value band; the band may be degenerate (lo == hi).
    """
    if n_strips < 1:
        raise ValueError("need at least one strip")
    if lo <= 0 or hi < lo:
        raise ValueError("band must satisfy 0 < lo <= hi")
    xs = rect.x0 + (np.arange(nx) + 0.5) * (rect.width / nx)
    idx = np.floor((xs - rect.x0) / (rect.width / n_strips)).astype(int)
    idx = np.clip(idx, 0, n_strips - 1) + 1
    row = np.where(idx % 2 == 1, hi, lo)
    vals = np.tile(row, (ny, 1))
    return DensityField(rect, vals, (lo, hi))


def crop(field: DensityField, region: Rect) -> DensityField:
    """Sub-field over the pixels whose centers fall inside the region.

    The returned field's rectangle is snapped to the enclosing pixel
    boundaries, so its grid is exactly a sub-grid of the parent's.
    """
    xs = field.x_centers()
    ys = field.y_centers()
    keep_x = np.nonzero((xs >= region.x0) & (xs <= region.x1))[0]
    keep_y = np.nonzero((ys >= region.y0) & (ys <= region.y1))[0]
    if keep_x.size == 0 or keep_y.size == 0:
        raise ValueError("region contains no pixel centers")
    ix0, ix1 = int(keep_x[0]), int(keep_x[-1]) + 1
    iy0, iy1 = int(keep_y[0]), int(keep_y[-1]) + 1
    r = field.rect
    sub_rect = Rect(
        r.x0 + ix0 * field.dx,
        r.y0 + iy0 * field.dy,
        r.x0 + ix1 * field.dx,
        r.y0 + iy1 * field.dy,
    )
    return DensityField(
        sub_rect, field.values[iy0:iy1, ix0:ix1], field.declared_range
    )


def _subgrid_offsets(parent_rect: Rect, parent_nx, parent_ny, child: DensityField):
    """(iy0, ix0) such that the child's pixels coincide with the parent's."""
    dx = parent_rect.width / parent_nx
    dy = parent_rect.height / parent_ny
    if abs(child.dx - dx) > 1e-9 * dx or abs(child.dy - dy) > 1e-9 * dy:
        raise ValueError("patch pixel size differs from the parent grid")
    fx = (child.rect.x0 - parent_rect.x0) / dx
    fy = (child.rect.y0 - parent_rect.y0) / dy
    ix0, iy0 = round(fx), round(fy)
    if abs(fx - ix0) > 1e-6 or abs(fy - iy0) > 1e-6:
        raise ValueError("patch grid is not aligned with the parent grid")
    if ix0 < 0 or iy0 < 0 or ix0 + child.nx > parent_nx or iy0 + child.ny > parent_ny:
        raise ValueError("patch extends outside the parent grid")
    return int(iy0), int(ix0)


def extend_patch(
    patch: DensityField, component: RasterMask, band: Sequence[float]
) -> DensityField:
    """Continuously extend a patch from its square to the whole grid.

    The extension agrees with the patch on its own pixels bit-exactly, takes
    values inside ``band`` = [lo, hi], and its supremum over the component
    equals the patch's supremum: away from the patch, values interpolate from
    the nearest patch sample toward that supremum with distance, then clamp.
    """
    lo, hi = float(band[0]), float(band[1])
    if lo <= 0 or hi < lo:
        raise ValueError("band must satisfy 0 < lo <= hi")
    pmin, pmax = patch.value_range()
    if pmin < lo - _RANGE_TOL or pmax > hi + _RANGE_TOL:
        raise ValueError("patch range violates the band bound")
    iy0, ix0 = _subgrid_offsets(component.rect, component.nx, component.ny, patch)
    s_bits = np.zeros((component.ny, component.nx), dtype=bool)
    s_bits[iy0 : iy0 + patch.ny, ix0 : ix0 + patch.nx] = True
    if bool((s_bits & ~component.bits).any()):
        raise ValueError("patch square is not contained in the component")

    sampling = (component.dy, component.dx)
    dist, (near_iy, near_ix) = ndimage.distance_transform_edt(
        ~s_bits, sampling=sampling, return_indices=True
    )
    base = np.empty((component.ny, component.nx))
    base_src = np.full((component.ny, component.nx), np.nan)
    base_src[iy0 : iy0 + patch.ny, ix0 : ix0 + patch.nx] = patch.values
    base[:] = base_src[near_iy, near_ix]

    sup = pmax
    d_ref = max(patch.rect.width, patch.rect.height)
    lam = np.minimum(dist / d_ref, 1.0)
    vals = base * (1.0 - lam) + sup * lam
    np.clip(vals, lo, hi, out=vals)
    # bit-exact agreement with the patch on its own pixels
    vals[iy0 : iy0 + patch.ny, ix0 : ix0 + patch.nx] = patch.values
    return DensityField(component.rect, vals, (lo, hi))


class PartitionWeights:
    """Two nonnegative weight grids summing to one at every sample."""

    __slots__ = ("rect", "nx", "ny", "w1", "w2")

    def __init__(self, rect: Rect, w1: np.ndarray, w2: np.ndarray):
        w1 = np.ascontiguousarray(np.asarray(w1, dtype=float))
        w2 = np.ascontiguousarray(np.asarray(w2, dtype=float))
        if w1.shape != w2.shape or w1.ndim != 2:
            raise ValueError("weights must be two 2-d arrays of equal shape")
        if (w1 < 0).any() or (w2 < 0).any():
            raise ValueError("weights must be nonnegative")
        if np.abs(w1 + w2 - 1.0).max() > 1e-12:
            raise ValueError("weights must sum to one at every sample")
        object.__setattr__(self, "rect", rect)
        object.__setattr__(self, "ny", int(w1.shape[0]))
        object.__setattr__(self, "nx", int(w1.shape[1]))
        w1.flags.writeable = False
        w2.flags.writeable = False
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)

    def __setattr__(self, name, value):
        raise AttributeError("PartitionWeights is immutable")


def partition_weights(component: RasterMask, patch_rect: Rect) -> PartitionWeights:
    """Partition of unity subordinate to {complement of patch, component}.

    Built from normalized center-to-center distances: w2 = d_out/(d_in+d_out)
    where d_in is the distance to the patch square and d_out the distance to
    the component's complement.  By construction w2 is exactly 1 on the patch
    square and exactly 0 outside the component.
    """
    xs = component.x_centers()
    ys = component.y_centers()
    X, Y = np.meshgrid(xs, ys)
    s_bits = (
        (X >= patch_rect.x0)
        & (X <= patch_rect.x1)
        & (Y >= patch_rect.y0)
        & (Y <= patch_rect.y1)
    )
    if not s_bits.any():
        raise ValueError("patch square contains no pixel centers")
    if bool((s_bits & ~component.bits).any()):
        raise ValueError("patch square is not contained in the component")
    sampling = (component.dy, component.dx)
    d_in = ndimage.distance_transform_edt(~s_bits, sampling=sampling)
    d_out = ndimage.distance_transform_edt(component.bits, sampling=sampling)
    w2 = d_out / (d_in + d_out)
    w1 = 1.0 - w2
    return PartitionWeights(component.rect, w1, w2)


def perturb_glue(
    phi: DensityField,
    bad_patch: DensityField,
    component: RasterMask,
    weights: PartitionWeights,
    eps: float,
) -> DensityField:
    """Glue a bad patch into phi through a partition of unity.

    The patch lives on a small square inside a connected component of the
    band preimage {a < phi < a+eps}, where a is the declared lower bound of
    phi.  The output equals phi bit-exactly outside the component, equals the
    patch bit-exactly on its square (for weights built by
    :func:`partition_weights`), and stays within eps of phi in sup norm.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    a, b = phi.declared_range
    if b > a and not eps < (b - a) / 10.0:
        raise ValueError(
            f"eps={eps} too large for the declared range: need eps < (b-a)/10"
            f" = {(b - a) / 10.0}"
        )
    if not phi.same_grid(component):
        raise ValueError("resolution mismatch between density and component mask")
    if (weights.nx, weights.ny) != (phi.nx, phi.ny):
        raise ValueError("resolution mismatch between density and weights")
    pmin, pmax = bad_patch.value_range()
    if pmin < a - _RANGE_TOL or pmax > a + eps + _RANGE_TOL:
        raise ValueError("patch range violates the [a, a+eps] band bound")
    if np.abs(weights.w2[~component.bits]).max(initial=0.0) != 0.0:
        raise ValueError("weights not subordinate: w2 must vanish off the component")

    rho_hat = extend_patch(bad_patch, component, (a, a + eps))
    vals = weights.w1 * phi.values + weights.w2 * rho_hat.values
    hi = max(b, a + eps)
    return DensityField(phi.rect, vals, (a, hi))


def default_delta_schedule(phi: DensityField, band_bits: np.ndarray) -> list[float]:
    """Halving side lengths: component bounding box down to 4 pixels."""
    rows = np.nonzero(band_bits.any(axis=1))[0]
    cols = np.nonzero(band_bits.any(axis=0))[0]
    w = (cols[-1] - cols[0] + 1) * phi.dx
    h = (rows[-1] - rows[0] + 1) * phi.dy
    d = min(w, h)
    floor = 4.0 * max(phi.dx, phi.dy)
    schedule = []
    while d >= floor:
        schedule.append(d)
        d /= 2.0
    if not schedule:
        schedule.append(floor)
    return schedule


def find_density_square(
    phi: DensityField,
    band: Sequence[float],
    delta_schedule: Sequence[float] | None = None,
    theta: float = 0.95,
) -> tuple[tuple[float, float], float]:
    """Locate a square where the band preimage has occupancy at least theta.

    Scans squares of decreasing side (the schedule) over the grid; for the
    first side admitting a block whose fraction of band-preimage pixels
    reaches theta, returns that block's center and its snapped side length.
    The returned square is aligned to pixel boundaries, so re-deriving its
    pixel set reproduces the counted block exactly.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    lo, hi = float(band[0]), float(band[1])
    inband = (phi.values >= lo) & (phi.values <= hi)
    if not inband.any():
        raise ValueError("band preimage has zero raster measure")
    if delta_schedule is None:
        delta_schedule = default_delta_schedule(phi, inband)

    acc = np.zeros((phi.ny + 1, phi.nx + 1), dtype=np.int64)
    np.cumsum(np.cumsum(inband, axis=0), axis=1, out=acc[1:, 1:])

    for delta in delta_schedule:
        kx = max(1, int(round(delta / phi.dx)))
        ky = max(1, int(round(delta / phi.dy)))
        if kx > phi.nx or ky > phi.ny:
            continue
        w = (
            acc[ky:, kx:]
            - acc[: -ky or None, kx:]
            - acc[ky:, : -kx or None]
            + acc[: -ky or None, : -kx or None]
        )
        best = np.unravel_index(np.argmax(w), w.shape)
        ratio = w[best] / float(kx * ky)
        if ratio >= theta:
            iy, ix = best
            cx = phi.rect.x0 + (ix + kx / 2.0) * phi.dx
            cy = phi.rect.y0 + (iy + ky / 2.0) * phi.dy
            return (float(cx), float(cy)), float(kx * phi.dx)
    raise ValueError("no density point found at schedule resolution")


def patch_linf(
    phi_eps: DensityField,
    square: Rect,
    bad_patch: DensityField,
    band: Sequence[float],
    theta: float = 0.95,
) -> DensityField:
    """Swap in bad-patch values at the band-preimage pixels of a square.

    Outside the square the field is untouched; inside it, pixels whose value
    lies in the band take the patch's values (which must stay in the band),
    and the rest keep their floor-truncated values.  Requires the band to
    occupy at least a theta fraction of the square, the certificate produced
    by :func:`find_density_square`.
    """
    lo, hi = float(band[0]), float(band[1])
    X, Y = phi_eps.center_grids()
    sel = (X >= square.x0) & (X <= square.x1) & (Y >= square.y0) & (Y <= square.y1)
    if not sel.any():
        raise ValueError("square contains no pixel centers")
    inband = sel & (phi_eps.values >= lo) & (phi_eps.values <= hi)
    occupancy = inband.sum() / float(sel.sum())
    if occupancy < theta:
        raise ValueError(
            f"band occupancy {occupancy:.4f} below threshold {theta};"
            " density-square certificate required"
        )
    iy0, ix0 = _subgrid_offsets(phi_eps.rect, phi_eps.nx, phi_eps.ny, bad_patch)
    patch_full = np.full((phi_eps.ny, phi_eps.nx), np.nan)
    patch_full[iy0 : iy0 + bad_patch.ny, ix0 : ix0 + bad_patch.nx] = bad_patch.values
    if np.isnan(patch_full[inband]).any():
        raise ValueError("patch does not cover the band pixels of the square")

    sq_min = float(phi_eps.values[sel].min())
    a0, b0 = phi_eps.declared_range
    pmin, pmax = bad_patch.value_range()
    if pmin < sq_min - _RANGE_TOL or pmax > max(b0, hi) + _RANGE_TOL:
        raise ValueError("patch range violates the [min(phi on square), b] bound")
    band_vals = patch_full[inband]
    if band_vals.min() < lo - _RANGE_TOL or band_vals.max() > hi + _RANGE_TOL:
        raise ValueError("patch values stray outside the band at band pixels")

    vals = phi_eps.values.copy()
    vals[inband] = band_vals
    return DensityField(phi_eps.rect, vals, (min(a0, lo), max(b0, hi)))
