"""Certificates, refinement nesting, and the inclusion verifier."""

import numpy as np
import pytest

from jacfit.certify import (
    RefinementState,
    StretchCertificate,
    Verdict,
    bk_refine,
    evaluate_certificate,
    verify_lemma2,
)
from jacfit.density import (
    CheckerboardSpec,
    DensityField,
    make_checkerboard_on_unit_square,
)
from jacfit.geometry import RasterMask, Segment, SegmentSet, UNIT_SQUARE
from jacfit.plmap import PiecewiseAffineMap, identity_map
from jacfit.solver import SolverConfig, mismatch_area


def horizontal_probes(count, rng):
    segs = []
    for j in range(count):
        y = 0.1 + 0.8 * (j + 0.5) / count
        x0 = float(rng.uniform(0.05, 0.6))
        segs.append(Segment((x0, y), (x0 + 0.3, y)))
    return SegmentSet(segs)


def center_dilation(nx, ny, s):
    base = identity_map(nx, ny).vertices
    verts = np.empty_like(base)
    verts[..., 0] = 0.5 + s * (base[..., 0] - 0.5)
    verts[..., 1] = 0.5 + s * (base[..., 1] - 0.5)
    return PiecewiseAffineMap(nx, ny, verts)


class TestEvaluateCertificate:
    def test_not_applicable_when_mismatch_reaches_budget(self):
        rho = make_checkerboard_on_unit_square(CheckerboardSpec(2, 1.0), 16, 16)
        pam = identity_map(16, 16)
        mm = mismatch_area(pam, rho, 0.5)
        assert mm > 0
        cert = StretchCertificate(
            density=rho,
            segments=SegmentSet([Segment((0.1, 0.1), (0.6, 0.1))]),
            delta=mm / 2,
            kappa=0.1,
            level=1,
            lipschitz_bound=2.0,
        )
        result = evaluate_certificate(cert, pam, 0.5)
        assert result.status is Verdict.NOT_APPLICABLE
        assert result.witness_segment is None

    def test_identity_holds_for_subunit_threshold(self):
        rho = DensityField.constant(UNIT_SQUARE, 16, 16, 1.0)
        pam = identity_map(16, 16)
        cert = StretchCertificate(
            density=rho,
            segments=SegmentSet([Segment((0.2, 0.4), (0.7, 0.4))]),
            delta=0.05,
            kappa=0.5,
            level=1,
            lipschitz_bound=2.0,  # threshold 1.5/2 = 0.75 <= 1
        )
        assert cert.threshold <= 1.0
        result = evaluate_certificate(cert, pam, 0.5)
        assert result.status is Verdict.HOLDS
        assert result.witness_ratio == pytest.approx(1.0, abs=1e-12)

    def test_violated_when_every_ratio_falls_short(self):
        rho = DensityField.constant(UNIT_SQUARE, 16, 16, 1.0)
        pam = identity_map(16, 16)
        cert = StretchCertificate(
            density=rho,
            segments=SegmentSet([Segment((0.2, 0.4), (0.7, 0.4))]),
            delta=0.05,
            kappa=1.5,
            level=2,
            lipschitz_bound=2.0,  # threshold 6.25/2 >> 1
        )
        result = evaluate_certificate(cert, pam, 0.5)
        assert result.status is Verdict.VIOLATED

    def test_fuzz_status_consistency(self):
        # the verdict is NOT_APPLICABLE exactly when mismatch >= delta
        rng = np.random.default_rng(21)
        rho = make_checkerboard_on_unit_square(CheckerboardSpec(4, 1.0), 16, 16)
        base = identity_map(16, 16).vertices
        for _ in range(60):
            verts = base + rng.normal(scale=0.003, size=base.shape)
            pam = PiecewiseAffineMap(16, 16, verts)
            tau = float(rng.uniform(0.1, 0.9))
            mm = mismatch_area(pam, rho, tau)
            delta = float(rng.uniform(0.0001, 1.0))
            cert = StretchCertificate(
                density=rho,
                segments=horizontal_probes(3, rng),
                delta=delta,
                kappa=float(rng.uniform(0.01, 1.0)),
                level=int(rng.integers(1, 4)),
                lipschitz_bound=float(rng.uniform(1.01, 3.0)),
            )
            result = evaluate_certificate(cert, pam, tau)
            assert result.mismatch == mm
            if mm >= delta:
                assert result.status is Verdict.NOT_APPLICABLE
            else:
                assert result.status in (Verdict.HOLDS, Verdict.VIOLATED)
                if result.status is Verdict.HOLDS:
                    assert result.witness_ratio >= cert.threshold
                else:
                    assert result.witness_ratio < cert.threshold

    def test_absolute_threshold_reported(self):
        rho = DensityField.constant(UNIT_SQUARE, 8, 8, 1.0)
        pam = identity_map(8, 8)
        cert = StretchCertificate(
            density=rho,
            segments=SegmentSet([Segment((0.1, 0.5), (0.9, 0.5))]),
            delta=0.1,
            kappa=0.25,
            level=2,
            lipschitz_bound=2.0,
        )
        result = evaluate_certificate(cert, pam, 0.5)
        # bottom edge of the unit square has image length 1 under the identity
        assert result.absolute_threshold == pytest.approx(1.25**2, abs=1e-12)


class TestRefinement:
    @pytest.fixture(scope="class")
    def three_levels(self):
        spec = CheckerboardSpec(8, 1.0)
        density = make_checkerboard_on_unit_square(spec, 64, 64)
        cfg = SolverConfig(lipschitz_bound=1.05, max_iterations=80)
        states = [RefinementState.initial(density)]
        for _ in range(3):
            states.append(bk_refine(states[-1], cfg, spec))
        return states

    def test_base_state_wraps_density(self):
        density = make_checkerboard_on_unit_square(CheckerboardSpec(4, 1.0), 32, 32)
        state = RefinementState.initial(density)
        assert state.level == 0
        assert state.history == []
        assert np.array_equal(state.density.values, density.values)

    def test_change_confined_to_recorded_rectangle(self, three_levels):
        # pointwise diff oracle: values may differ only at pixels whose
        # center lies in the recorded rectangle
        for before, after in zip(three_levels, three_levels[1:]):
            step = after.history[-1]
            X, Y = before.density.center_grids()
            inside = (
                (X >= step.rect.x0)
                & (X <= step.rect.x1)
                & (Y >= step.rect.y0)
                & (Y <= step.rect.y1)
            )
            changed = after.density.values != before.density.values
            assert not (changed & ~inside).any()

    def test_range_preserved(self, three_levels):
        for state in three_levels:
            assert state.density.declared_range == (1.0, 2.0)
            lo, hi = state.density.value_range()
            assert lo >= 1.0 and hi <= 2.0

    def test_rectangles_nested(self, three_levels):
        rects = [s.rect for s in three_levels[-1].history]
        assert len(rects) == 3
        for outer, inner in zip(rects, rects[1:]):
            assert outer.contains_rect(inner, tol=1e-9)

    def test_levels_count_history(self, three_levels):
        for i, state in enumerate(three_levels):
            assert state.level == i
            assert len(state.history) == i


class TestVerifyLemma2:
    def test_constant_sequence(self):
        pam = identity_map(64, 64)
        U = RasterMask.from_predicate(
            UNIT_SQUARE, 64, 64,
            lambda X, Y: (X - 0.5) ** 2 + (Y - 0.5) ** 2 <= 0.09,
        )
        rep = verify_lemma2([pam, pam, pam], pam, U, eps=0.05)
        assert rep.k0 == 1
        assert all(rep.ext_inclusion) and all(rep.int_inclusion)

    def test_dilation_family_k0(self):
        nx = ny = 128
        U = RasterMask.from_predicate(
            UNIT_SQUARE, nx, ny,
            lambda X, Y: (X - 0.5) ** 2 + (Y - 0.5) ** 2 <= 0.09,
        )
        seq = [center_dilation(nx, ny, 1.0 + 1.0 / k) for k in range(1, 7)]
        rep = verify_lemma2(seq, identity_map(nx, ny), U, eps=0.1)
        # displacement 0.3/k falls below eps = 0.1 from k = 3..4 on
        assert rep.k0 is not None and rep.k0 <= 4
        assert all(rep.ext_inclusion[rep.k0 - 1 :])
        assert all(rep.int_inclusion[rep.k0 - 1 :])
        assert not rep.ext_inclusion[0]

    def test_flags_monotone_for_monotone_sequence(self):
        # sup distance to the limit decreases along the family, so once both
        # inclusions hold they keep holding
        nx = ny = 96
        U = RasterMask.from_predicate(
            UNIT_SQUARE, nx, ny,
            lambda X, Y: (np.abs(X - 0.5) <= 0.25) & (np.abs(Y - 0.5) <= 0.25),
        )
        seq = [center_dilation(nx, ny, 1.0 + 0.5 / k) for k in range(1, 8)]
        rep = verify_lemma2(seq, identity_map(nx, ny), U, eps=0.12)
        both = [e and i for e, i in zip(rep.ext_inclusion, rep.int_inclusion)]
        assert both == sorted(both)

    def test_area_identity_discrepancy_within_pixel_band(self):
        nx = ny = 128
        U = RasterMask.from_predicate(
            UNIT_SQUARE, nx, ny,
            lambda X, Y: (X - 0.5) ** 2 + (Y - 0.5) ** 2 <= 0.09,
        )
        seq = [center_dilation(nx, ny, 1.0 + 1.0 / k) for k in (1, 2, 4)]
        rep = verify_lemma2(seq, identity_map(nx, ny), U, eps=0.1)
        for k, disc in zip((1, 2, 4), rep.area_discrepancy):
            s = 1 + 1 / k
            perim = 2 * np.pi * 0.3 * s
            budget = 2 * (perim * rep.image_pixel + perim * s / nx)
            assert disc <= budget

    def test_validation_errors(self):
        pam = identity_map(8, 8)
        U = RasterMask.full(UNIT_SQUARE, 8, 8)
        with pytest.raises(ValueError, match="eps"):
            verify_lemma2([pam], pam, U, eps=0.0)
        with pytest.raises(ValueError, match="empty"):
            verify_lemma2([], pam, U, eps=0.1)
