"""Stretch certificates, recursive checkerboard refinement, and the
area-convergence verifier for map sequences.

A stretch certificate packages a density, a segment collection, a mismatch
budget delta and a ratio threshold (1+kappa)^i / L.  Its claim has the shape:
any map within the distortion budget whose Jacobian mismatch stays under
delta must stretch at least one of the segments past the threshold.
Evaluating a certificate against a concrete map yields HOLDS (a witnessing
segment reached the threshold), VIOLATED (mismatch under budget yet every
ratio fell short), or NOT_APPLICABLE (the mismatch hypothesis fails, so the
claim says nothing).

The refinement loop re-enacts the recursive construction that hardens a
density: solve, find the most stretched candidate segment, and overwrite a
rectangular neighborhood of it with a rescaled checkerboard, at finite depth.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .density import (
    CheckerboardSpec,
    DensityField,
    integrate,
    striped_field,
)
from .geometry import (
    Rect,
    RasterMask,
    Segment,
    SegmentSet,
    UNIT_SQUARE,
    neighborhoods,
)
from .plmap import (
    PiecewiseAffineMap,
    identity_map,
    jacobian_field,
    rasterize_image,
    singular_value_fields,
    stretch_pairs,
)
from .solver import SolverConfig, SolveReport, mismatch_area, realize_jacobian

__all__ = [
    "Verdict",
    "CertificateResult",
    "StretchCertificate",
    "RefinementStep",
    "RefinementState",
    "RefinementError",
    "evaluate_certificate",
    "bk_refine",
    "Lemma2Report",
    "verify_lemma2",
]


class Verdict(enum.Enum):
    HOLDS = "HOLDS"
    VIOLATED = "VIOLATED"
    NOT_APPLICABLE = "NOT_APPLICABLE"


@dataclass(frozen=True)
class StretchCertificate:
    """Density, segments, mismatch budget and stretch threshold at a level."""

    density: DensityField
    segments: SegmentSet
    delta: float
    kappa: float
    level: int
    lipschitz_bound: float

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("mismatch budget delta must be positive")
        if len(self.segments) == 0:
            raise ValueError("certificate needs at least one segment")
        if self.threshold <= 0:
            raise ValueError("stretch threshold must be positive")

    @property
    def threshold(self) -> float:
        return (1.0 + self.kappa) ** self.level / self.lipschitz_bound

    def to_json_dict(self, include_density: bool = False) -> dict:
        out = {
            "delta": self.delta,
            "kappa": self.kappa,
            "level": self.level,
            "lipschitz_bound": self.lipschitz_bound,
            "threshold": self.threshold,
            "segments": self.segments.to_json_list(),
        }
        if include_density:
            out["density"] = self.density.to_json_dict()
        return out


@dataclass
class CertificateResult:
    status: Verdict
    mismatch: float
    threshold: float
    witness_segment: Segment | None = None
    witness_ratio: float | None = None
    absolute_threshold: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "status": self.status.value,
            "mismatch": self.mismatch,
            "threshold": self.threshold,
            "witness_segment": (
                self.witness_segment.as_list() if self.witness_segment else None
            ),
            "witness_ratio": self.witness_ratio,
            "absolute_threshold": self.absolute_threshold,
        }


def evaluate_certificate(
    cert: StretchCertificate, pam: PiecewiseAffineMap, tau: float
) -> CertificateResult:
    """Check a map against a stretch certificate.

    When the map's mismatch area against the certificate's density reaches
    the budget delta, the certificate claims nothing (NOT_APPLICABLE).
    Otherwise at least one segment must be threshold-stretched for the
    certificate to HOLD; if every ratio falls short it is VIOLATED.

    The result also carries an absolute length threshold, the ratio
    threshold times L times the image length of the domain's bottom edge,
    as a reporting extra (not part of the verdict).
    """
    mm = mismatch_area(pam, cert.density, tau)
    threshold = cert.threshold
    r = cert.density.rect
    ex, ey = pam.evaluate(
        np.array([r.x0, r.x1]), np.array([r.y0, r.y0])
    )
    edge_len = float(np.hypot(ex[1] - ex[0], ey[1] - ey[0]))
    abs_threshold = (1.0 + cert.kappa) ** cert.level * edge_len

    if mm >= cert.delta:
        return CertificateResult(
            Verdict.NOT_APPLICABLE, mm, threshold, absolute_threshold=abs_threshold
        )
    report = stretch_pairs(pam, cert.segments)
    seg, ratio = report.argmax()
    if ratio >= threshold:
        return CertificateResult(
            Verdict.HOLDS,
            mm,
            threshold,
            witness_segment=seg,
            witness_ratio=ratio,
            absolute_threshold=abs_threshold,
        )
    return CertificateResult(
        Verdict.VIOLATED,
        mm,
        threshold,
        witness_segment=seg,
        witness_ratio=ratio,
        absolute_threshold=abs_threshold,
    )


@dataclass(frozen=True)
class RefinementStep:
    segment: Segment
    rect: Rect
    scale: float

    def to_json_dict(self) -> dict:
        return {
            "segment": self.segment.as_list(),
            "rect": self.rect.as_list(),
            "scale": self.scale,
        }


@dataclass
class RefinementState:
    """Density plus the nested rectangles already refined into it."""

    density: DensityField
    level: int = 0
    history: list[RefinementStep] = field(default_factory=list)
    last_report: SolveReport | None = None

    def __post_init__(self):
        if self.level != len(self.history):
            raise ValueError("level must equal the number of recorded steps")
        for prev, cur in zip(self.history, self.history[1:]):
            if not prev.rect.contains_rect(cur.rect, tol=1e-9):
                raise ValueError("refinement rectangles must be nested")

    @classmethod
    def initial(cls, density: DensityField) -> "RefinementState":
        return cls(density=density)

    def to_json_dict(self) -> dict:
        return {
            "level": self.level,
            "steps": [s.to_json_dict() for s in self.history],
        }


class RefinementError(RuntimeError):
    """Solver failure during refinement; carries the last good state."""

    def __init__(self, message: str, partial_state: RefinementState):
        super().__init__(message)
        self.partial_state = partial_state


def _mid_cell_segments(region: Rect, n: int) -> list[Segment]:
    """Horizontal segments joining consecutive strip centers of a region."""
    y = 0.5 * (region.y0 + region.y1)
    w = region.width / n
    centers = [region.x0 + (i + 0.5) * w for i in range(n)]
    return [
        Segment((centers[i], y), (centers[i + 1], y)) for i in range(n - 1)
    ]


def _probe_segments(region: Rect, rows: int = 5, cols: int = 6) -> list[Segment]:
    """Grid of short disjoint horizontal probe segments inside a region."""
    length = region.width / (2 * cols)
    segs = []
    for j in range(rows):
        y = region.y0 + (j + 0.5) * region.height / rows
        for i in range(cols):
            x0 = region.x0 + (i + 0.25) * region.width / cols
            segs.append(Segment((x0, y), (x0 + length, y)))
    return segs


def _refinement_rect(
    seg: Segment, factor: float, clip: Rect, density: DensityField
) -> Rect:
    """Neighborhood rectangle of a segment for one refinement round.

    The segment's bounding box is dilated by factor*length per axis, grown
    to at least four pixels per axis so a finite grid can represent the
    inserted pattern, clipped to the allowed region, and snapped outward to
    pixel boundaries.  The clip region is itself pixel-aligned (the unit
    square or a previous snapped rectangle), so snapping cannot escape it
    and nesting is preserved.
    """
    pad = factor * seg.length
    x_lo = min(seg.p[0], seg.q[0]) - pad
    x_hi = max(seg.p[0], seg.q[0]) + pad
    y_lo = min(seg.p[1], seg.q[1]) - pad
    y_hi = max(seg.p[1], seg.q[1]) + pad
    dx, dy = density.dx, density.dy
    if x_hi - x_lo < 4 * dx:
        cx = 0.5 * (x_lo + x_hi)
        x_lo, x_hi = cx - 2 * dx, cx + 2 * dx
    if y_hi - y_lo < 4 * dy:
        cy = 0.5 * (y_lo + y_hi)
        y_lo, y_hi = cy - 2 * dy, cy + 2 * dy
    x_lo = max(x_lo, clip.x0)
    y_lo = max(y_lo, clip.y0)
    x_hi = min(x_hi, clip.x1)
    y_hi = min(y_hi, clip.y1)
    if not (x_lo < x_hi and y_lo < y_hi):
        raise ValueError("refinement neighborhood does not overlap the region")
    r = density.rect
    ix0 = int(np.floor((x_lo - r.x0) / dx + 1e-9))
    iy0 = int(np.floor((y_lo - r.y0) / dy + 1e-9))
    ix1 = int(np.ceil((x_hi - r.x0) / dx - 1e-9))
    iy1 = int(np.ceil((y_hi - r.y0) / dy - 1e-9))
    ix1 = max(ix1, ix0 + 1)
    iy1 = max(iy1, iy0 + 1)
    return Rect(
        r.x0 + ix0 * dx, r.y0 + iy0 * dy, r.x0 + ix1 * dx, r.y0 + iy1 * dy
    )


def bk_refine(
    state: RefinementState,
    solver_config: SolverConfig,
    checkerboard_spec: CheckerboardSpec,
) -> RefinementState:
    """One refinement round: solve, find the stretched segment, re-seed.

    Runs the solver on the current density, measures the stretch of the
    candidate segments (the n-1 mid-cell segments of the last inserted
    checkerboard plus a scan of short probes), and overwrites the density on
    a rectangular neighborhood of the most stretched segment with a rescaled
    checkerboard mapped affinely into the local value range.  The density is
    untouched outside that rectangle, and successive rectangles are nested
    because level >= 1 candidates are confined to the previous rectangle.
    """
    density = state.density
    n = checkerboard_spec.n
    if state.level == 0:
        region = Rect(0.0, 0.0, 1.0, 1.0 / n)
        clip = UNIT_SQUARE if UNIT_SQUARE.contains_rect(density.rect) else density.rect
    else:
        region = state.history[-1].rect
        clip = region

    init = identity_map(density.nx, density.ny, density.rect)
    try:
        report = realize_jacobian(density, solver_config, init)
    except ValueError as exc:
        raise RefinementError(f"solver failed at level {state.level}: {exc}", state)

    candidates = _mid_cell_segments(region, n) + _probe_segments(region)
    best_seg, best_ratio = None, -np.inf
    for seg in candidates:
        rep = stretch_pairs(report.map, SegmentSet([seg]))
        if rep.max_ratio > best_ratio:
            best_seg, best_ratio = seg, rep.max_ratio

    try:
        U = _refinement_rect(best_seg, 0.25, clip, density)
    except ValueError as exc:
        raise RefinementError(
            f"refinement exhausted the grid at level {state.level}: {exc}", state
        )
    X, Y = density.center_grids()
    inside = (X >= U.x0) & (X <= U.x1) & (Y >= U.y0) & (Y <= U.y1)
    if not inside.any():
        raise RefinementError(
            f"refinement rectangle at level {state.level} contains no pixels", state
        )
    local = density.values[inside]
    lo, hi = float(local.min()), float(local.max())

    strip_w = U.width / n
    strip_idx = np.clip(np.floor((X - U.x0) / strip_w).astype(int), 0, n - 1) + 1
    pattern = np.where(strip_idx % 2 == 1, hi, lo)
    vals = density.values.copy()
    vals[inside] = pattern[inside]
    new_density = DensityField(density.rect, vals, density.declared_range)

    step = RefinementStep(segment=best_seg, rect=U, scale=U.width)
    return RefinementState(
        density=new_density,
        level=state.level + 1,
        history=state.history + [step],
        last_report=report,
    )


@dataclass
class Lemma2Report:
    """Inclusion flags and area discrepancies for a map sequence."""

    k0: int | None
    ext_inclusion: list[bool]
    int_inclusion: list[bool]
    area_discrepancy: list[float]
    eps: float
    image_pixel: float

    def to_json_dict(self) -> dict:
        return {
            "k0": self.k0,
            "ext_inclusion": self.ext_inclusion,
            "int_inclusion": self.int_inclusion,
            "area_discrepancy": self.area_discrepancy,
            "eps": self.eps,
            "image_pixel": self.image_pixel,
        }


def verify_lemma2(
    phi_sequence: Sequence[PiecewiseAffineMap],
    phi_limit: PiecewiseAffineMap,
    U: RasterMask,
    eps: float,
    resolution: int | None = None,
) -> Lemma2Report:
    """Check two-sided raster inclusions of map images against a limit map.

    For each map in the sequence, rasterizes its image of the region U on a
    common grid and tests whether it fits inside the outer eps-neighborhood
    of the limit image while covering the limit image's inner eps-core.  The
    reported k0 is the least 1-based index from which both inclusions hold
    for every later map (None if no such index exists within the sequence).
    Each entry also reports |raster area of the image - integral of the
    Jacobian over U|; for piecewise-affine maps the two agree up to the
    raster's boundary-pixel band.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    maps = list(phi_sequence)
    if not maps:
        raise ValueError("empty map sequence")

    res = int(resolution) if resolution else max(U.nx, U.ny)

    # common image grid: bounding box of every image of U, padded by eps
    iy, ix = np.nonzero(U.bits)
    xs = U.rect.x0 + (ix + 0.5) * U.dx
    ys = U.rect.y0 + (iy + 0.5) * U.dy
    x_lo = y_lo = np.inf
    x_hi = y_hi = -np.inf
    for pam in maps + [phi_limit]:
        fx, fy = pam.evaluate(xs, ys)
        x_lo, x_hi = min(x_lo, fx.min()), max(x_hi, fx.max())
        y_lo, y_hi = min(y_lo, fy.min()), max(y_hi, fy.max())
    pad = eps + 2.0 * max(x_hi - x_lo, y_hi - y_lo) / res
    pitch = (max(x_hi - x_lo, y_hi - y_lo) + 2 * pad) / res
    inx = int(np.ceil((x_hi - x_lo + 2 * pad) / pitch))
    iny = int(np.ceil((y_hi - y_lo + 2 * pad) / pitch))
    image_rect = Rect(x_lo - pad, y_lo - pad, x_lo - pad + inx * pitch,
                      y_lo - pad + iny * pitch)

    limit_raster = rasterize_image(phi_limit, U, image_rect, inx, iny)
    ext, core = neighborhoods(limit_raster, eps)

    ext_flags, int_flags, discrepancies = [], [], []
    for pam in maps:
        rk = rasterize_image(pam, U, image_rect, inx, iny)
        ext_flags.append(rk.is_subset_of(ext))
        int_flags.append(core.is_subset_of(rk))
        area_raster = rk.measure()
        area_integral = integrate(jacobian_field(pam), U)
        discrepancies.append(abs(area_raster - area_integral))

    k0 = None
    for k in range(len(maps), 0, -1):
        if ext_flags[k - 1] and int_flags[k - 1]:
            k0 = k
        else:
            break
    return Lemma2Report(
        k0=k0,
        ext_inclusion=ext_flags,
        int_inclusion=int_flags,
        area_discrepancy=discrepancies,
        eps=eps,
        image_pixel=pitch,
    )
