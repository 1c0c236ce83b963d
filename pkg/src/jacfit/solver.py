"""Search for a bounded-distortion piecewise-affine map with prescribed Jacobian.

The objective is a least-squares Jacobian mismatch plus a logarithmic barrier
on the per-triangle singular values, so every accepted iterate keeps all
singular values strictly inside [1/L, L].  The barrier acts on log(sigma),
which makes it symmetric under sigma <-> 1/sigma and stationary exactly at
sigma = 1, so an identity map facing a unit density is already optimal.

Descent directions come from gradients smoothed through the inverse vertex
Laplacian (a Sobolev metric).  The raw vertex gradient of the mismatch term
concentrates on rough, cell-scale modes whose steps shear individual
triangles straight into the distortion barrier; the smoothed gradient moves
vertices in coordinated, large-scale patterns instead.  An L-BFGS history on
top of the smoothed metric sharpens the local rate.  The objective is
translation invariant, so no vertex is pinned during descent; the
translation gauge is fixed afterwards by anchoring the image of the domain's
SW corner.

Mismatch area (the measure of cells where |Jac - rho| exceeds a tolerance) is
reported, not optimized: it is the certificate quantity, while the energy is
the smooth surrogate that drives the search.  A successful solve upper-bounds
the achievable mismatch at the given L; failure after restarts is only
circumstantial evidence that no compatible map exists.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .density import DensityField
from .plmap import (
    PiecewiseAffineMap,
    bilipschitz_constant,
    certified_injective,
    identity_map,
    jacobian_field,
)

__all__ = ["SolverConfig", "SolveReport", "realize_jacobian", "mismatch_area"]


@dataclass(frozen=True)
class SolverConfig:
    """Parameters of one realization attempt.

    ``lipschitz_bound`` is the distortion budget L; ``mismatch_tolerance``
    the pointwise |Jac - rho| threshold used for the reported mismatch area.
    The step fields define the backtracking schedule: trial steps shrink by
    ``step_shrink`` until the Armijo test passes, and a step floored at
    ``step_floor`` counts as convergence.
    """

    lipschitz_bound: float = 2.0
    mismatch_tolerance: float = 0.5
    max_iterations: int = 2000
    step_init: float = 1.0
    step_shrink: float = 0.5
    step_floor: float = 1e-12
    armijo_c: float = 1e-4
    w_jacobian: float = 1.0
    w_barrier: float = 1e-3
    grad_tol: float = 1e-10
    lbfgs_memory: int = 8
    restarts: int = 1
    restart_jitter: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.lipschitz_bound < 1.0:
            raise ValueError("lipschitz bound must be at least 1")
        if self.lipschitz_bound == 1.0:
            raise ValueError("lipschitz bound must exceed 1 for the barrier")
        if self.mismatch_tolerance <= 0:
            raise ValueError("mismatch tolerance must be positive")
        if self.restarts < 1:
            raise ValueError("need at least one restart")

    def to_json_dict(self) -> dict:
        return {
            "lipschitz_bound": self.lipschitz_bound,
            "mismatch_tolerance": self.mismatch_tolerance,
            "max_iterations": self.max_iterations,
            "step_init": self.step_init,
            "step_shrink": self.step_shrink,
            "step_floor": self.step_floor,
            "armijo_c": self.armijo_c,
            "w_jacobian": self.w_jacobian,
            "w_barrier": self.w_barrier,
            "grad_tol": self.grad_tol,
            "lbfgs_memory": self.lbfgs_memory,
            "restarts": self.restarts,
            "restart_jitter": self.restart_jitter,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "SolverConfig":
        return cls(**data)


@dataclass
class SolveReport:
    """Outcome of a realization attempt."""

    map: PiecewiseAffineMap
    mismatch_area: float
    achieved_l: float
    achieved_l_certified: bool
    converged: bool
    iterations: int
    trace: list[float]
    config: SolverConfig
    evidence: str
    restart_summaries: list[dict] = field(default_factory=list)
    note: str = ""
    wall_time: float = 0.0

    def to_json_dict(self, include_map: bool = True) -> dict:
        out = {
            "config": self.config.to_json_dict(),
            "mismatch_area": self.mismatch_area,
            "achieved_l": self.achieved_l,
            "achieved_l_certified": self.achieved_l_certified,
            "converged": self.converged,
            "iterations": self.iterations,
            "trace": list(self.trace),
            "evidence": self.evidence,
            "restart_summaries": self.restart_summaries,
            "note": self.note,
        }
        if include_map:
            out["map"] = self.map.to_json_dict()
        return out


def mismatch_area(pam: PiecewiseAffineMap, rho: DensityField, tau: float) -> float:
    """Total area of cells where |Jac - rho| exceeds tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    jac = jacobian_field(pam)
    if not jac.same_grid(rho):
        raise ValueError("resolution mismatch between map grid and density")
    bad = np.abs(jac.values - rho.values) > tau
    return float(bad.sum() * rho.cell_area)


class _Objective:
    """Energy and analytic gradient of the mismatch-plus-barrier functional.

    All per-triangle quantities are computed on (ny, nx) arrays for the lower
    and upper triangle families separately; gradients scatter back to the
    vertex grid with slice adds, which keeps evaluation deterministic under
    any internal partitioning.
    """

    def __init__(self, rho: DensityField, cfg: SolverConfig):
        self.rho = rho.values
        self.nx, self.ny = rho.nx, rho.ny
        self.hx = rho.rect.width / rho.nx
        self.hy = rho.rect.height / rho.ny
        self.tri_area = 0.5 * self.hx * self.hy
        self.m = np.log(cfg.lipschitz_bound)
        self.wj = cfg.w_jacobian
        self.wb = cfg.w_barrier

    def _tri_F(self, V):
        Q00 = V[:-1, :-1]
        Q10 = V[:-1, 1:]
        Q01 = V[1:, :-1]
        Q11 = V[1:, 1:]
        hx, hy = self.hx, self.hy
        # components (F00, F01, F10, F11) per triangle family
        lo = (
            (Q10[..., 0] - Q00[..., 0]) / hx,
            (Q11[..., 0] - Q10[..., 0]) / hy,
            (Q10[..., 1] - Q00[..., 1]) / hx,
            (Q11[..., 1] - Q10[..., 1]) / hy,
        )
        up = (
            (Q11[..., 0] - Q01[..., 0]) / hx,
            (Q01[..., 0] - Q00[..., 0]) / hy,
            (Q11[..., 1] - Q01[..., 1]) / hx,
            (Q01[..., 1] - Q00[..., 1]) / hy,
        )
        return lo, up

    def _tri_energy(self, F):
        """(energy, parts) of one triangle family; energy inf if infeasible."""
        f00, f01, f10, f11 = F
        det = f00 * f11 - f01 * f10
        if det.min() <= 0.0:
            return np.inf, None
        e = 0.5 * (f00 + f11)
        h = 0.5 * (f00 - f11)
        fv = 0.5 * (f10 + f01)
        g = 0.5 * (f10 - f01)
        h1 = np.hypot(e, g)
        h2 = np.hypot(h, fv)
        s1 = h1 + h2
        s2 = h1 - h2
        if s2.min() <= 0.0:
            return np.inf, None
        t1 = np.log(s1)
        t2 = np.log(s2)
        m = self.m
        if max(np.abs(t1).max(), np.abs(t2).max()) >= m:
            return np.inf, None
        # barrier -log(1 - (t/m)^2): zero and stationary at sigma = 1,
        # infinite at sigma = L or 1/L
        fbar = -np.log1p(-((t1 / m) ** 2)) - np.log1p(-((t2 / m) ** 2))
        resid = det - self.rho
        energy = self.tri_area * (
            self.wj * float((resid**2).sum()) + self.wb * float(fbar.sum())
        )
        parts = (det, resid, e, h, fv, g, h1, h2, s1, s2, t1, t2)
        return energy, parts

    def energy(self, V) -> float:
        lo, up = self._tri_F(V)
        e_lo, _ = self._tri_energy(lo)
        if not np.isfinite(e_lo):
            return np.inf
        e_up, _ = self._tri_energy(up)
        return e_lo + e_up

    def _family_grad_F(self, F, parts):
        """dE/d(F00, F01, F10, F11) for one triangle family."""
        det, resid, e, h, fv, g, h1, h2, s1, s2, t1, t2 = parts
        f00, f01, f10, f11 = F
        A = self.tri_area
        m = self.m

        # mismatch term through the determinant
        ddet = 2.0 * self.wj * A * resid
        dF00 = ddet * f11
        dF01 = -ddet * f10
        dF10 = -ddet * f01
        dF11 = ddet * f00

        # barrier term through the singular values
        fp1 = 2.0 * t1 / (m * m - t1 * t1)
        fp2 = 2.0 * t2 / (m * m - t2 * t2)
        db_dh1 = self.wb * A * (fp1 / s1 + fp2 / s2)
        db_dh2 = self.wb * A * (fp1 / s1 - fp2 / s2)
        # h1 > 0 whenever det > 0; h2 can vanish at conformal points, where
        # the db_dh2 coefficient vanishes at the same rate
        cE = db_dh1 * e / h1
        cG = db_dh1 * g / h1
        inv_h2 = np.divide(1.0, h2, out=np.zeros_like(h2), where=h2 > 0.0)
        cH = db_dh2 * h * inv_h2
        cFv = db_dh2 * fv * inv_h2
        dF00 += 0.5 * (cE + cH)
        dF11 += 0.5 * (cE - cH)
        dF10 += 0.5 * (cFv + cG)
        dF01 += 0.5 * (cFv - cG)
        return dF00, dF01, dF10, dF11

    def energy_grad(self, V):
        lo, up = self._tri_F(V)
        e_lo, parts_lo = self._tri_energy(lo)
        if not np.isfinite(e_lo):
            return np.inf, None
        e_up, parts_up = self._tri_energy(up)
        if not np.isfinite(e_up):
            return np.inf, None

        grad = np.zeros_like(V)
        hx, hy = self.hx, self.hy

        dF00, dF01, dF10, dF11 = self._family_grad_F(lo, parts_lo)
        # lower family: F00=(Q10x-Q00x)/hx, F01=(Q11x-Q10x)/hy, rows likewise
        grad[:-1, :-1, 0] -= dF00 / hx
        grad[:-1, 1:, 0] += dF00 / hx - dF01 / hy
        grad[1:, 1:, 0] += dF01 / hy
        grad[:-1, :-1, 1] -= dF10 / hx
        grad[:-1, 1:, 1] += dF10 / hx - dF11 / hy
        grad[1:, 1:, 1] += dF11 / hy

        dF00, dF01, dF10, dF11 = self._family_grad_F(up, parts_up)
        # upper family: F00=(Q11x-Q01x)/hx, F01=(Q01x-Q00x)/hy, rows likewise
        grad[1:, :-1, 0] += -dF00 / hx + dF01 / hy
        grad[1:, 1:, 0] += dF00 / hx
        grad[:-1, :-1, 0] -= dF01 / hy
        grad[1:, :-1, 1] += -dF10 / hx + dF11 / hy
        grad[1:, 1:, 1] += dF10 / hx
        grad[:-1, :-1, 1] -= dF11 / hy

        return e_lo + e_up, grad


class _Preconditioner:
    """Inverse graph Laplacian of the vertex grid, applied per component.

    Diagonalized by the type-II cosine transform (Neumann boundary); the
    constant mode is projected out, which is harmless because the objective
    is translation invariant and its gradient is mean-free.
    """

    def __init__(self, nvy: int, nvx: int):
        ky = 2.0 - 2.0 * np.cos(np.pi * np.arange(nvy) / nvy)
        kx = 2.0 - 2.0 * np.cos(np.pi * np.arange(nvx) / nvx)
        mu = ky[:, None] + kx[None, :]
        inv = np.zeros_like(mu)
        nz = mu > 0
        inv[nz] = 1.0 / mu[nz]
        self.inv_mu = inv
        self.shape = (nvy, nvx)

    def apply(self, g: np.ndarray) -> np.ndarray:
        out = np.empty_like(g)
        for c in (0, 1):
            q = scipy.fft.dctn(g[:, :, c], type=2, norm="ortho")
            q *= self.inv_mu
            out[:, :, c] = scipy.fft.idctn(q, type=2, norm="ortho")
        return out


def _two_loop(s_list, y_list, g, precond: _Preconditioner, shape):
    """Preconditioned L-BFGS two-loop recursion applied to the gradient.

    The initial matrix is the smoothing preconditioner scaled by the usual
    secant quotient; with an empty history the direction is the smoothed
    steepest descent.
    """
    if not s_list:
        return -precond.apply(g)
    k = len(s_list)
    rho = [1.0 / float(np.vdot(s, y)) for s, y in zip(s_list, y_list)]
    alpha = [0.0] * k
    q = -g.reshape(-1)
    for i in range(k - 1, -1, -1):
        alpha[i] = rho[i] * float(np.vdot(s_list[i], q))
        q = q - alpha[i] * y_list[i]
    y_last = y_list[-1]
    py = precond.apply(y_last.reshape(shape)).reshape(-1)
    gamma = float(np.vdot(s_list[-1], y_last)) / float(np.vdot(y_last, py))
    r = gamma * precond.apply(q.reshape(shape)).reshape(-1)
    for i in range(k):
        beta = rho[i] * float(np.vdot(y_list[i], r))
        r = r + (alpha[i] - beta) * s_list[i]
    return r.reshape(shape)


def _descend(obj: _Objective, V0: np.ndarray, cfg: SolverConfig):
    """Monotone first-order descent with Armijo backtracking.

    Search directions come from a smoothed-gradient L-BFGS history (plain
    smoothed steepest descent when the history is empty or fails the descent
    test); each trial step must pass the Armijo decrease condition, and a
    step floored at cfg.step_floor terminates the run as converged.
    """
    V = V0.copy()
    f, g = obj.energy_grad(V)
    if not np.isfinite(f):
        raise ValueError("initial map violates the bi-Lipschitz barrier")
    precond = _Preconditioner(V.shape[0], V.shape[1])
    trace = [f]
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    converged = False
    for _ in range(cfg.max_iterations):
        gnorm = float(np.abs(g).max())
        if gnorm <= cfg.grad_tol:
            converged = True
            break
        d = _two_loop(s_hist, y_hist, g, precond, V.shape)
        gTd = float(np.vdot(g, d))
        if gTd >= 0.0:
            d = -precond.apply(g)
            gTd = float(np.vdot(g, d))
            if gTd >= 0.0:
                # gradient sits in the projected-out mode; nothing to do
                converged = True
                break
        alpha = cfg.step_init
        floored = False
        while True:
            V_new = V + alpha * d
            f_new = obj.energy(V_new)
            if np.isfinite(f_new) and f_new <= f + cfg.armijo_c * alpha * gTd:
                break
            alpha *= cfg.step_shrink
            if alpha < cfg.step_floor:
                floored = True
                break
        if floored:
            converged = True
            break
        f_new, g_new = obj.energy_grad(V_new)
        s = (V_new - V).reshape(-1)
        y = (g_new - g).reshape(-1)
        sy = float(np.vdot(s, y))
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > cfg.lbfgs_memory:
                s_hist.pop(0)
                y_hist.pop(0)
        V, f, g = V_new, f_new, g_new
        trace.append(f)
    return V, trace, converged


def _jitter_initial(V0, cfg: SolverConfig, obj: _Objective, restart_index: int, scale):
    """Feasible random perturbation of the initial vertices."""
    rng = np.random.default_rng((cfg.seed, restart_index))
    jitter = cfg.restart_jitter * scale
    for _ in range(40):
        V = V0 + rng.normal(size=V0.shape) * jitter
        V[0, 0, :] = V0[0, 0, :]
        if np.isfinite(obj.energy(V)):
            return V
        jitter *= 0.5
    return V0.copy()


def realize_jacobian(
    rho: DensityField, config: SolverConfig, initial: PiecewiseAffineMap
) -> SolveReport:
    """Fit vertex positions so the map's Jacobian tracks the density.

    Runs ``config.restarts`` independent descents (the first from the given
    initial map, later ones from feasible random perturbations of it) and
    reports the one with the smallest mismatch area.  If the density's whole
    range is incompatible with the distortion budget (every value outside
    [1/L^2, L^2]), no map can match anywhere and the report carries full
    mismatch immediately.
    """
    t0 = time.perf_counter()
    if not jacobian_like_grids(rho, initial):
        raise ValueError("resolution mismatch between density and initial map")
    if initial.is_degenerate():
        raise ValueError("initial map is degenerate")

    L = config.lipschitz_bound
    tau = config.mismatch_tolerance
    lo_feasible = 1.0 / (L * L)
    hi_feasible = L * L
    matchable = (rho.values >= lo_feasible) & (rho.values <= hi_feasible)
    obj = _Objective(rho, config)
    if not matchable.any():
        achieved = bilipschitz_constant(initial)
        report = SolveReport(
            map=initial,
            mismatch_area=rho.rect.area,
            achieved_l=achieved,
            achieved_l_certified=certified_injective(initial),
            converged=True,
            iterations=0,
            trace=[obj.energy(initial.vertices)],
            config=config,
            evidence="unrealized_residual",
            note=(
                "density range incompatible with the bi-Lipschitz bound:"
                " no value lies in [1/L^2, L^2]"
            ),
        )
        report.wall_time = time.perf_counter() - t0
        return report

    V0 = initial.vertices.copy()
    scale = min(rho.rect.width / rho.nx, rho.rect.height / rho.ny)

    # translation gauge: the image of the domain's SW corner is anchored at
    # its position under the given initial map (the origin for the canonical
    # identity map of the unit square)
    anchor = V0[0, 0, :].copy()

    best = None
    summaries = []
    for r in range(config.restarts):
        V_init = V0 if r == 0 else _jitter_initial(V0, config, obj, r, scale)
        V_fin, trace, converged = _descend(obj, V_init, config)
        V_fin = V_fin + (anchor - V_fin[0, 0, :])
        pam = initial.with_vertices(V_fin)
        mm = mismatch_area(pam, rho, tau)
        summaries.append(
            {
                "restart": r,
                "mismatch_area": mm,
                "objective": trace[-1],
                "iterations": len(trace) - 1,
                "converged": converged,
            }
        )
        key = (mm, trace[-1])
        if best is None or key < best[0]:
            best = (key, pam, trace, converged)

    _, pam, trace, converged = best
    achieved = bilipschitz_constant(pam)
    report = SolveReport(
        map=pam,
        mismatch_area=best[0][0],
        achieved_l=achieved,
        achieved_l_certified=certified_injective(pam),
        converged=converged,
        iterations=len(trace) - 1,
        trace=trace,
        config=config,
        evidence="realized" if best[0][0] == 0.0 else "unrealized_residual",
        restart_summaries=summaries,
    )
    report.wall_time = time.perf_counter() - t0
    return report


def jacobian_like_grids(rho: DensityField, pam: PiecewiseAffineMap) -> bool:
    return (
        rho.nx == pam.nx
        and rho.ny == pam.ny
        and abs(rho.rect.x0 - pam.rect.x0) <= 1e-12
        and abs(rho.rect.y0 - pam.rect.y0) <= 1e-12
        and abs(rho.rect.x1 - pam.rect.x1) <= 1e-12
        and abs(rho.rect.y1 - pam.rect.y1) <= 1e-12
    )
