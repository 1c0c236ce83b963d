"""Solver behavior: trivial optima, convergence, barriers, determinism."""

import numpy as np
import pytest

from jacfit.density import (
    CheckerboardSpec,
    DensityField,
    make_checkerboard,
    make_checkerboard_on_unit_square,
)
from jacfit.geometry import Rect, UNIT_SQUARE
from jacfit.plmap import (
    PiecewiseAffineMap,
    identity_map,
    singular_value_fields,
)
from jacfit.solver import SolverConfig, _Objective, mismatch_area, realize_jacobian


class TestMismatchArea:
    def test_identity_matches_unit_density(self):
        rho = DensityField.constant(UNIT_SQUARE, 16, 16, 1.0)
        assert mismatch_area(identity_map(16, 16), rho, 0.3) == 0.0

    def test_checkerboard_single_odd_cell(self):
        # oracle: the single odd subsquare of the 2-cell strip has area 1/4
        rho = make_checkerboard(CheckerboardSpec(2, 1.0), 32, 16)
        pam = identity_map(32, 16, rho.rect)
        assert mismatch_area(pam, rho, 0.5) == pytest.approx(0.25, abs=1e-12)

    def test_subthreshold_everywhere(self):
        tau = 0.4
        rho = DensityField.constant(UNIT_SQUARE, 8, 8, 1.0 + tau / 2)
        assert mismatch_area(identity_map(8, 8), rho, tau) == 0.0

    def test_monotone_in_tau(self):
        rng = np.random.default_rng(0)
        rho = DensityField(UNIT_SQUARE, 0.5 + rng.random((16, 16)))
        pam = identity_map(16, 16)
        taus = [0.05, 0.1, 0.2, 0.4, 0.8]
        areas = [mismatch_area(pam, rho, t) for t in taus]
        assert all(a >= b for a, b in zip(areas, areas[1:]))

    def test_nonpositive_tau_rejected(self):
        rho = DensityField.constant(UNIT_SQUARE, 8, 8, 1.0)
        with pytest.raises(ValueError):
            mismatch_area(identity_map(8, 8), rho, 0.0)


class TestTrivialSolves:
    def test_unit_density_identity_is_optimal(self):
        rho = DensityField.constant(UNIT_SQUARE, 8, 8, 1.0)
        rep = realize_jacobian(rho, SolverConfig(lipschitz_bound=2.0), identity_map(8, 8))
        assert rep.iterations == 0
        assert rep.mismatch_area == 0.0
        assert rep.achieved_l == pytest.approx(1.0)
        assert rep.converged
        assert np.array_equal(rep.map.vertices, identity_map(8, 8).vertices)

    def test_incompatible_range_reports_full_mismatch(self):
        # every value sits outside [1/L^2, L^2] = [0.25, 4]
        rho = DensityField.constant(UNIT_SQUARE, 8, 8, 9.0)
        rep = realize_jacobian(rho, SolverConfig(lipschitz_bound=2.0), identity_map(8, 8))
        assert rep.iterations == 0
        assert rep.mismatch_area == pytest.approx(1.0)
        assert "incompatible" in rep.note

    def test_degenerate_initial_rejected(self):
        rho = DensityField.constant(UNIT_SQUARE, 2, 2, 1.0)
        verts = identity_map(2, 2).vertices.copy()
        verts[1, 1] = verts[0, 0]
        with pytest.raises(ValueError, match="degenerate"):
            realize_jacobian(rho, SolverConfig(lipschitz_bound=2.0),
                             PiecewiseAffineMap(2, 2, verts))

    def test_resolution_mismatch_rejected(self):
        rho = DensityField.constant(UNIT_SQUARE, 8, 8, 1.0)
        with pytest.raises(ValueError, match="resolution mismatch"):
            realize_jacobian(rho, SolverConfig(lipschitz_bound=2.0), identity_map(4, 4))


class TestScalingSolve:
    def test_constant_four_reaches_double_scaling(self):
        rho = DensityField.constant(UNIT_SQUARE, 16, 16, 4.0)
        cfg = SolverConfig(lipschitz_bound=2.5, max_iterations=2000, grad_tol=1e-12)
        rep = realize_jacobian(rho, cfg, identity_map(16, 16))
        assert rep.mismatch_area < 1e-3
        assert rep.achieved_l <= 2.0 + 1e-3
        # image is the doubled square up to a rigid motion: check areas
        jac = np.asarray((rep.map.triangle_determinants()))
        assert np.abs(jac - 4.0).max() < 0.05

    def test_strip_domain_solve(self):
        rect = Rect(0.0, 0.0, 1.0, 0.5)
        rho = DensityField.constant(rect, 16, 8, 1.0)
        rep = realize_jacobian(
            rho, SolverConfig(lipschitz_bound=1.5), identity_map(16, 8, rect)
        )
        assert rep.mismatch_area == 0.0


class TestBarrier:
    def test_singular_values_inside_box_at_convergence(self):
        rho = make_checkerboard_on_unit_square(CheckerboardSpec(4, 1.0), 32, 32)
        L = 1.05
        cfg = SolverConfig(lipschitz_bound=L, max_iterations=300)
        rep = realize_jacobian(rho, cfg, identity_map(32, 32))
        (s1l, s2l), (s1u, s2u) = singular_value_fields(rep.map)
        hi = L * (1 + 1e-6)
        lo = 1.0 / hi
        assert max(s1l.max(), s1u.max()) <= hi
        assert min(s2l.min(), s2u.min()) >= lo
        assert rep.achieved_l <= hi

    def test_infeasible_initial_rejected(self):
        rho = DensityField.constant(UNIT_SQUARE, 4, 4, 1.0)
        # a 3x stretch violates the L = 2 barrier from the start
        verts = identity_map(4, 4).vertices.copy()
        verts[..., 0] *= 3.0
        with pytest.raises(ValueError, match="barrier"):
            realize_jacobian(
                rho, SolverConfig(lipschitz_bound=2.0), PiecewiseAffineMap(4, 4, verts)
            )


class TestTraceAndDeterminism:
    def test_trace_monotone_nonincreasing(self):
        rho = make_checkerboard_on_unit_square(CheckerboardSpec(2, 1.0), 16, 16)
        cfg = SolverConfig(lipschitz_bound=1.2, max_iterations=200)
        rep = realize_jacobian(rho, cfg, identity_map(16, 16))
        assert all(b <= a for a, b in zip(rep.trace, rep.trace[1:]))

    def test_bit_identical_rerun(self):
        rho = make_checkerboard_on_unit_square(CheckerboardSpec(4, 1.0), 16, 16)
        cfg = SolverConfig(
            lipschitz_bound=1.3, max_iterations=150, restarts=3, seed=11
        )
        rep1 = realize_jacobian(rho, cfg, identity_map(16, 16))
        rep2 = realize_jacobian(rho, cfg, identity_map(16, 16))
        assert len(rep1.trace) == len(rep2.trace)
        assert rep1.trace == rep2.trace
        assert abs(rep1.mismatch_area - rep2.mismatch_area) <= 1e-12
        assert np.array_equal(rep1.map.vertices, rep2.map.vertices)

    def test_restarts_report_best(self):
        rho = make_checkerboard_on_unit_square(CheckerboardSpec(2, 1.0), 16, 16)
        cfg = SolverConfig(
            lipschitz_bound=1.1, max_iterations=80, restarts=3, seed=5
        )
        rep = realize_jacobian(rho, cfg, identity_map(16, 16))
        assert len(rep.restart_summaries) == 3
        best = min(s["mismatch_area"] for s in rep.restart_summaries)
        assert rep.mismatch_area == best


class TestGradient:
    def test_analytic_gradient_matches_central_differences(self):
        rng = np.random.default_rng(7)
        nx = ny = 12
        rho = DensityField(UNIT_SQUARE, 1.0 + rng.random((ny, nx)), (0.5, 2.5))
        cfg = SolverConfig(lipschitz_bound=3.0)
        obj = _Objective(rho, cfg)
        V = identity_map(nx, ny).vertices + rng.normal(
            scale=0.01, size=(ny + 1, nx + 1, 2)
        )
        f, g = obj.energy_grad(V)
        assert np.isfinite(f)
        h = 1e-6
        for _ in range(20):
            iy = int(rng.integers(0, ny + 1))
            ix = int(rng.integers(0, nx + 1))
            c = int(rng.integers(0, 2))
            Vp = V.copy()
            Vp[iy, ix, c] += h
            Vm = V.copy()
            Vm[iy, ix, c] -= h
            fd = (obj.energy(Vp) - obj.energy(Vm)) / (2 * h)
            an = g[iy, ix, c]
            assert abs(fd - an) <= 1e-5 * max(abs(an), 1e-8)

    def test_energy_infinite_outside_barrier(self):
        rho = DensityField.constant(UNIT_SQUARE, 4, 4, 1.0)
        obj = _Objective(rho, SolverConfig(lipschitz_bound=1.5))
        V = identity_map(4, 4).vertices.copy()
        V[..., 0] *= 2.0  # sigma_max = 2 > 1.5
        assert obj.energy(V) == np.inf


class TestReportSerialization:
    def test_report_round_trips_config_and_map(self):
        rho = DensityField.constant(UNIT_SQUARE, 8, 8, 1.0)
        cfg = SolverConfig(lipschitz_bound=2.0, seed=3)
        rep = realize_jacobian(rho, cfg, identity_map(8, 8))
        data = rep.to_json_dict()
        assert data["config"] == cfg.to_json_dict()
        assert SolverConfig.from_json_dict(data["config"]) == cfg
        back = PiecewiseAffineMap.from_json_dict(data["map"])
        assert np.array_equal(back.vertices, rep.map.vertices)
        assert data["evidence"] == "realized"
