"""Raster mask operations: neighborhoods, components, serialization."""

import collections

import numpy as np
import pytest

from jacfit.geometry import (
    Rect,
    RasterMask,
    Segment,
    SegmentSet,
    UNIT_SQUARE,
    connected_component,
    inscribed_square,
    neighborhoods,
    square_at,
)


def disk_mask(nx, ny, cx, cy, r):
    return RasterMask.from_predicate(
        UNIT_SQUARE, nx, ny, lambda X, Y: (X - cx) ** 2 + (Y - cy) ** 2 <= r**2
    )


class TestRect:
    def test_area(self):
        r = Rect(0.0, 0.0, 0.5, 0.25)
        assert r.area == pytest.approx(0.125)

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            Rect(0.0, 0.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            Rect(0.0, 1.0, 1.0, 0.5)

    def test_square_at(self):
        r = square_at((0.5, 0.5), 0.2)
        assert r.as_list() == pytest.approx([0.4, 0.4, 0.6, 0.6])


class TestSegments:
    def test_degenerate_segment_rejected(self):
        with pytest.raises(ValueError):
            Segment((0.1, 0.1), (0.1, 0.1))

    def test_crossing_segments_rejected(self):
        with pytest.raises(ValueError):
            SegmentSet(
                [Segment((0, 0), (1, 1)), Segment((0, 1), (1, 0))]
            )

    def test_shared_endpoint_allowed(self):
        ss = SegmentSet(
            [Segment((0, 0), (0.5, 0)), Segment((0.5, 0), (1, 0))]
        )
        assert len(ss) == 2

    def test_colinear_overlap_rejected(self):
        with pytest.raises(ValueError):
            SegmentSet(
                [Segment((0, 0), (0.6, 0)), Segment((0.4, 0), (1, 0))]
            )


class TestNeighborhoods:
    def test_full_mask(self):
        m = RasterMask.full(UNIT_SQUARE, 32, 32)
        ext, core = neighborhoods(m, 0.1)
        assert np.array_equal(ext.bits, m.bits)
        # the core loses a boundary strip of width ~ eps
        X, Y = m.center_grids()
        interior = (
            (X > 0.1) & (X < 0.9) & (Y > 0.1) & (Y < 0.9)
        )
        assert core.bits[interior].all()
        edge = (X < 0.09) | (X > 0.91) | (Y < 0.09) | (Y > 0.91)
        assert not core.bits[edge].any()

    def test_single_pixel(self):
        bits = np.zeros((16, 16), dtype=bool)
        bits[7, 9] = True
        m = RasterMask(UNIT_SQUARE, bits)
        ext, core = neighborhoods(m, 0.01)  # below the pixel pitch 1/16
        assert np.array_equal(ext.bits, bits)
        assert core.is_empty()

    def test_disk_core_against_analytic_area(self):
        # oracle: eroding a disk of radius 0.3 by 0.05 gives a disk of
        # radius 0.25 with area pi * 0.25^2
        m = disk_mask(256, 256, 0.5, 0.5, 0.3)
        ext, core = neighborhoods(m, 0.05)
        target = np.pi * 0.25**2
        two_pixel_rows = 2 * (2 * np.pi * 0.25) * (1.0 / 256)
        assert abs(core.measure() - target) <= two_pixel_rows
        # and the dilation grows it to ~ radius 0.35
        target_ext = np.pi * 0.35**2
        two_pixel_rows_ext = 2 * (2 * np.pi * 0.35) * (1.0 / 256)
        assert abs(ext.measure() - target_ext) <= two_pixel_rows_ext

    def test_sandwich_property(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            bits = rng.random((24, 24)) < 0.4
            if not bits.any():
                bits[0, 0] = True
            m = RasterMask(UNIT_SQUARE, bits)
            eps = float(rng.uniform(0.02, 0.3))
            ext, core = neighborhoods(m, eps)
            assert core.is_subset_of(m)
            assert m.is_subset_of(ext)
            assert core.measure() <= m.measure() <= ext.measure()

    def test_monotone_in_the_set(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            small = rng.random((20, 20)) < 0.3
            extra = rng.random((20, 20)) < 0.2
            if not small.any():
                small[3, 3] = True
            big = small | extra
            m1 = RasterMask(UNIT_SQUARE, small)
            m2 = RasterMask(UNIT_SQUARE, big)
            eps = float(rng.uniform(0.05, 0.2))
            ext1, core1 = neighborhoods(m1, eps)
            ext2, core2 = neighborhoods(m2, eps)
            assert ext1.is_subset_of(ext2)
            assert core1.is_subset_of(core2)

    def test_empty_mask_rejected(self):
        m = RasterMask.empty(UNIT_SQUARE, 8, 8)
        with pytest.raises(ValueError, match="empty set has no neighborhoods"):
            neighborhoods(m, 0.1)

    def test_nonpositive_eps_rejected(self):
        m = RasterMask.full(UNIT_SQUARE, 8, 8)
        with pytest.raises(ValueError):
            neighborhoods(m, 0.0)


def flood_fill_oracle(bits, seed_iy, seed_ix):
    """Independent 4-connected flood fill using an explicit queue."""
    out = np.zeros_like(bits)
    queue = collections.deque([(seed_iy, seed_ix)])
    out[seed_iy, seed_ix] = True
    ny, nx = bits.shape
    while queue:
        iy, ix = queue.popleft()
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            jy, jx = iy + dy, ix + dx
            if 0 <= jy < ny and 0 <= jx < nx and bits[jy, jx] and not out[jy, jx]:
                out[jy, jx] = True
                queue.append((jy, jx))
    return out


class TestConnectedComponent:
    def test_full_mask(self):
        m = RasterMask.full(UNIT_SQUARE, 16, 16)
        comp = connected_component(m, (0.3, 0.7))
        assert np.array_equal(comp.bits, m.bits)

    def test_two_disjoint_squares(self):
        bits = np.zeros((32, 32), dtype=bool)
        bits[2:10, 2:10] = True
        bits[20:30, 20:30] = True
        m = RasterMask(UNIT_SQUARE, bits)
        comp = connected_component(m, (0.15, 0.15))
        expected = np.zeros_like(bits)
        expected[2:10, 2:10] = True
        assert np.array_equal(comp.bits, expected)

    def test_against_flood_fill_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(5):
            bits = rng.random((64, 64)) < 0.55
            set_idx = np.argwhere(bits)
            iy, ix = set_idx[rng.integers(len(set_idx))]
            m = RasterMask(UNIT_SQUARE, bits)
            seed = ((ix + 0.5) / 64, (iy + 0.5) / 64)
            comp = connected_component(m, seed)
            assert np.array_equal(comp.bits, flood_fill_oracle(bits, iy, ix))

    def test_idempotent_under_reextraction(self):
        rng = np.random.default_rng(9)
        bits = rng.random((40, 40)) < 0.5
        bits[5, 5] = True
        m = RasterMask(UNIT_SQUARE, bits)
        comp = connected_component(m, ((5 + 0.5) / 40, (5 + 0.5) / 40))
        for iy, ix in np.argwhere(comp.bits)[::7]:
            again = connected_component(comp, ((ix + 0.5) / 40, (iy + 0.5) / 40))
            assert np.array_equal(again.bits, comp.bits)

    def test_unset_seed_rejected(self):
        bits = np.zeros((8, 8), dtype=bool)
        bits[0, 0] = True
        m = RasterMask(UNIT_SQUARE, bits)
        with pytest.raises(ValueError, match="seed outside set"):
            connected_component(m, (0.9, 0.9))
        with pytest.raises(ValueError, match="seed outside set"):
            connected_component(m, (1.7, 0.5))


class TestInscribedSquare:
    def test_finds_planted_square(self):
        bits = np.zeros((64, 64), dtype=bool)
        bits[10:30, 20:50] = True
        m = RasterMask(UNIT_SQUARE, bits)
        sq = inscribed_square(m)
        assert sq.width == pytest.approx(20 / 64)
        X, Y = m.center_grids()
        inside = (X >= sq.x0) & (X <= sq.x1) & (Y >= sq.y0) & (Y <= sq.y1)
        assert bits[inside].all()


class TestSerialization:
    def test_mask_json_roundtrip(self):
        rng = np.random.default_rng(3)
        bits = rng.random((13, 21)) < 0.5
        m = RasterMask(Rect(0.1, 0.2, 0.9, 0.8), bits)
        back = RasterMask.from_json_dict(m.to_json_dict())
        assert back.same_grid(m)
        assert np.array_equal(back.bits, m.bits)

    def test_missing_field_names_field(self):
        with pytest.raises(ValueError, match="bits"):
            RasterMask.from_json_dict({"nx": 4, "ny": 4, "rect": [0, 0, 1, 1]})

    def test_masks_are_immutable(self):
        m = RasterMask.full(UNIT_SQUARE, 4, 4)
        with pytest.raises(Exception):
            m.bits[0, 0] = False
        with pytest.raises(AttributeError):
            m.nx = 7
