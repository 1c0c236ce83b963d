"""Batch experiment runner: generate densities, solve, certify, sweep.

One executable with subcommands; every output JSON embeds the resolved
configuration, with volatile data (timestamps, wall times) confined to a
separate "meta" field so reruns with the same seed are byte-identical after
dropping it.  Exit codes: 0 success, 1 domain error (machine-readable JSON on
stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time

import numpy as np

from .certify import (
    RefinementState,
    StretchCertificate,
    bk_refine,
    evaluate_certificate,
    verify_lemma2,
)
from .density import (
    CheckerboardSpec,
    DensityField,
    crop,
    find_density_square,
    integrate,
    make_checkerboard,
    make_checkerboard_on_unit_square,
    partition_weights,
    patch_linf,
    perturb_glue,
    striped_field,
    truncate_floor,
)
from .geometry import (
    Rect,
    RasterMask,
    SegmentSet,
    UNIT_SQUARE,
    connected_component,
    inscribed_square,
    square_at,
)
from .plmap import PiecewiseAffineMap, identity_map, stretch_pairs
from .solver import SolverConfig, realize_jacobian

log = logging.getLogger("jacfit")


def _setup_logging():
    level = os.environ.get("JF_LOG", "").lower()
    if level in ("debug", "info"):
        logging.basicConfig(
            level=logging.DEBUG if level == "debug" else logging.INFO,
            format="%(asctime)s %(name)s %(levelname)s %(message)s",
        )


# --- I/O helpers ----------------------------------------------------------


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write_atomic(path: str, text: str):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_report(path: str, payload: dict, t_start: float):
    payload = dict(payload)
    payload["meta"] = {
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "wall_time_s": time.perf_counter() - t_start,
    }
    _write_atomic(path, _canonical_json(payload))


def _load_json(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ValueError(f"input file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed JSON in {path}: {exc}") from None


def _load_density(path: str) -> DensityField:
    data = _load_json(path)
    if "values" not in data and "density" in data:
        data = data["density"]
    return DensityField.from_json_dict(data)


def _load_map(path: str) -> PiecewiseAffineMap:
    return PiecewiseAffineMap.from_json_dict(_load_json(path))


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        nx, ny = int(w), int(h)
    except Exception:
        raise ValueError(f"invalid --grid '{text}': expected WxH") from None
    if nx < 1 or ny < 1:
        raise ValueError(f"invalid --grid '{text}': sizes must be positive")
    return nx, ny


def _parse_checkerboard(text: str) -> CheckerboardSpec:
    fields = {}
    for part in text.split(","):
        if "=" not in part:
            raise ValueError(
                f"invalid --checkerboard '{text}': expected N=<int>,c=<float>"
            )
        k, v = part.split("=", 1)
        fields[k.strip()] = v.strip()
    if "N" not in fields or "c" not in fields:
        raise ValueError(f"invalid --checkerboard '{text}': need both N and c")
    return CheckerboardSpec(n=int(fields["N"]), c=float(fields["c"]))


def _parse_int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _solver_config(args, lipschitz: float) -> SolverConfig:
    return SolverConfig(
        lipschitz_bound=lipschitz,
        mismatch_tolerance=args.tau,
        max_iterations=args.iters,
        restarts=args.restarts,
        seed=args.seed,
        w_barrier=args.w_barrier,
    )


# --- subcommands -----------------------------------------------------------


def _cmd_gen_density(args) -> int:
    t0 = time.perf_counter()
    nx, ny = _parse_grid(args.grid)
    if args.checkerboard:
        spec = _parse_checkerboard(args.checkerboard)
        if args.embed:
            rho = make_checkerboard_on_unit_square(spec, nx, ny)
        else:
            rho = make_checkerboard(spec, nx, ny)
        config = {
            "kind": "checkerboard",
            "N": spec.n,
            "c": spec.c,
            "embed": bool(args.embed),
            "grid": [nx, ny],
        }
    elif args.const is not None:
        if args.const <= 0:
            raise ValueError("--const value must be positive")
        rho = DensityField.constant(UNIT_SQUARE, nx, ny, args.const)
        config = {"kind": "constant", "value": args.const, "grid": [nx, ny]}
    else:
        raise ValueError("gen-density needs --checkerboard or --const")
    # the density file format itself, with the resolved config as extra keys
    payload = {**rho.to_json_dict(), "config": config}
    _write_report(args.out, payload, t0)
    if args.csv:
        _write_atomic(args.csv, rho.to_csv())
    log.info("wrote density to %s", args.out)
    return 0


def _cmd_solve(args) -> int:
    t0 = time.perf_counter()
    rho = _load_density(args.rho)
    cfg = _solver_config(args, args.L)
    initial = _load_map(args.init) if args.init else identity_map(
        rho.nx, rho.ny, rho.rect
    )
    report = realize_jacobian(rho, cfg, initial)
    payload = report.to_json_dict(include_map=not args.map_out)
    payload["config"]["rho_file"] = args.rho
    if args.map_out:
        _write_atomic(args.map_out, _canonical_json(report.map.to_json_dict()))
        payload["map_path"] = args.map_out
    _write_report(args.out, payload, t0)
    log.info(
        "solve finished: mismatch_area=%g achieved_l=%g",
        report.mismatch_area,
        report.achieved_l,
    )
    return 0


def _cmd_stretch(args) -> int:
    t0 = time.perf_counter()
    pam = _load_map(args.map)
    data = _load_json(args.segments)
    if "segments" not in data:
        err = ValueError("segments file: missing field 'segments'")
        err.field = "segments"
        raise err
    segs = SegmentSet.from_json_list(data["segments"])
    report = stretch_pairs(pam, segs)
    payload = {
        "config": {"map_file": args.map, "segments_file": args.segments},
        "stretch": report.to_json_dict(),
    }
    _write_report(args.out, payload, t0)
    return 0


def _cmd_perturb(args) -> int:
    t0 = time.perf_counter()
    phi = _load_density(args.phi)
    eps = args.eps
    a, b = phi.declared_range
    band = (a, a + eps)

    inband = RasterMask(
        phi.rect, (phi.values > band[0]) & (phi.values < band[1])
    )
    if inband.is_empty():
        raise ValueError(
            "band preimage is empty: no sample satisfies a < phi < a+eps"
        )
    if args.component_seed:
        sx, sy = (float(v) for v in args.component_seed.split(","))
        comp = connected_component(inband, (sx, sy))
    else:
        from .geometry import largest_component

        comp = largest_component(inband)
    s_rect = inscribed_square(comp, margin=1)
    patch_grid = crop(phi, s_rect)
    spec_n = args.patch_cells
    patch = striped_field(
        patch_grid.rect, patch_grid.nx, patch_grid.ny, spec_n, band[0], band[1]
    )
    weights = partition_weights(comp, s_rect)
    rho = perturb_glue(phi, patch, comp, weights, eps)

    sup_diff = float(np.abs(rho.values - phi.values).max())
    payload = {
        "config": {
            "phi_file": args.phi,
            "eps": eps,
            "patch_cells": spec_n,
            "band": [band[0], band[1]],
            "patch_rect": s_rect.as_list(),
        },
        "sup_difference": sup_diff,
        "component_measure": comp.measure(),
        "density": rho.to_json_dict(),
    }
    _write_report(args.out, payload, t0)
    log.info("perturbation sup-difference %g < eps %g", sup_diff, eps)
    return 0


def _cmd_patch_linf(args) -> int:
    t0 = time.perf_counter()
    phi = _load_density(args.phi)
    eps = args.eps
    phi_eps = truncate_floor(phi, eps)

    if args.band_start is not None:
        a = args.band_start
    else:
        # the band [a, a+eps] with maximal raster occupancy
        vals = phi_eps.values.reshape(-1)
        candidates = np.unique(np.round(vals, 12))
        best_a, best_count = None, -1
        for cand in candidates:
            count = int(((vals >= cand) & (vals <= cand + eps)).sum())
            if count > best_count:
                best_a, best_count = float(cand), count
        a = best_a
    band = (a, a + eps)

    point, side = find_density_square(
        phi_eps, band, theta=args.theta
    )
    sq = square_at(point, side)
    base = crop(phi_eps, sq)
    striped = striped_field(base.rect, base.nx, base.ny, args.patch_cells, *band)
    # patch rule: band values where phi_eps is in band, untouched elsewhere
    in_band = (base.values >= band[0]) & (base.values <= band[1])
    patch_vals = np.where(in_band, striped.values, base.values)
    patch = DensityField(base.rect, patch_vals, None)
    rho = patch_linf(phi_eps, sq, patch, band, theta=args.theta)

    sup_diff = float(np.abs(rho.values - phi.values).max())
    payload = {
        "config": {
            "phi_file": args.phi,
            "eps": eps,
            "theta": args.theta,
            "patch_cells": args.patch_cells,
            "band": [band[0], band[1]],
            "square": sq.as_list(),
        },
        "sup_difference": sup_diff,
        "density": rho.to_json_dict(),
    }
    _write_report(args.out, payload, t0)
    log.info("patched field sup-difference %g <= 2*eps %g", sup_diff, 2 * eps)
    return 0


def _cmd_refine(args) -> int:
    t0 = time.perf_counter()
    nx, ny = _parse_grid(args.grid)
    spec = CheckerboardSpec(n=args.N, c=args.c)
    density = make_checkerboard_on_unit_square(spec, nx, ny)
    cfg = _solver_config(args, args.L)
    state = RefinementState.initial(density)
    os.makedirs(args.out, exist_ok=True)
    _write_atomic(
        os.path.join(args.out, "level_0.json"),
        _canonical_json(state.density.to_json_dict()),
    )
    for level in range(args.levels):
        state = bk_refine(state, cfg, spec)
        _write_atomic(
            os.path.join(args.out, f"level_{state.level}.json"),
            _canonical_json(state.density.to_json_dict()),
        )
        log.info("refined to level %d", state.level)
    payload = {
        "config": {
            "N": args.N,
            "c": args.c,
            "L": args.L,
            "levels": args.levels,
            "grid": [nx, ny],
            "tau": args.tau,
            "seed": args.seed,
        },
        "history": state.to_json_dict(),
    }
    _write_report(os.path.join(args.out, "history.json"), payload, t0)
    return 0


def _cmd_verify_lemma2(args) -> int:
    t0 = time.perf_counter()
    nx, ny = _parse_grid(args.grid)
    if args.synthetic:
        # dilations about the domain center approaching the identity
        k_max = args.synthetic
        cx, cy = 0.5, 0.5
        limit = identity_map(nx, ny)
        seq = []
        for k in range(1, k_max + 1):
            s = 1.0 + 1.0 / k
            base = limit.vertices
            verts = np.empty_like(base)
            verts[..., 0] = cx + s * (base[..., 0] - cx)
            verts[..., 1] = cy + s * (base[..., 1] - cy)
            seq.append(PiecewiseAffineMap(nx, ny, verts))
        U = RasterMask.from_predicate(
            UNIT_SQUARE,
            nx,
            ny,
            lambda X, Y: (X - cx) ** 2 + (Y - cy) ** 2 <= args.radius**2,
        )
        config = {
            "synthetic": k_max,
            "radius": args.radius,
            "eps": args.eps,
            "grid": [nx, ny],
        }
    else:
        if not (args.maps and args.limit and args.mask):
            raise ValueError(
                "verify-lemma2 needs either --synthetic K or all of"
                " --maps/--limit/--mask"
            )
        seq = [_load_map(p) for p in args.maps.split(",")]
        limit = _load_map(args.limit)
        U = RasterMask.from_json_dict(_load_json(args.mask))
        config = {
            "maps": args.maps.split(","),
            "limit": args.limit,
            "mask": args.mask,
            "eps": args.eps,
        }
    report = verify_lemma2(seq, limit, U, args.eps)
    payload = {"config": config, "report": report.to_json_dict()}
    _write_report(args.out, payload, t0)
    log.info("inclusion verifier: k0=%s", report.k0)
    return 0


def _sweep_point(params: dict) -> dict:
    """One sweep cell; must stay importable for process pools."""
    spec = CheckerboardSpec(n=params["N"], c=params["c"])
    rho = make_checkerboard_on_unit_square(spec, params["nx"], params["ny"])
    cfg = SolverConfig(
        lipschitz_bound=params["L"],
        mismatch_tolerance=params["tau"],
        max_iterations=params["iters"],
        restarts=params["restarts"],
        seed=params["seed"],
        w_barrier=params["w_barrier"],
    )
    report = realize_jacobian(rho, cfg, identity_map(rho.nx, rho.ny, rho.rect))
    strip = Rect(0.0, 0.0, 1.0, 1.0 / spec.n)
    from .certify import _mid_cell_segments

    mids = _mid_cell_segments(strip, spec.n)
    if mids:
        stretch = stretch_pairs(report.map, SegmentSet(mids))
        min_ratio, max_ratio = stretch.min_ratio, stretch.max_ratio
    else:
        min_ratio = max_ratio = float("nan")
    return {
        "N": params["N"],
        "c": params["c"],
        "L": params["L"],
        "tau": params["tau"],
        "best_mismatch_area": report.mismatch_area,
        "min_stretch_ratio": min_ratio,
        "max_stretch_ratio": max_ratio,
        "achieved_l": report.achieved_l,
        "converged": report.converged,
        "evidence": report.evidence,
    }


_SWEEP_COLUMNS = [
    "N",
    "c",
    "L",
    "tau",
    "best_mismatch_area",
    "min_stretch_ratio",
    "max_stretch_ratio",
    "achieved_l",
    "converged",
    "evidence",
]


def _cmd_sweep(args) -> int:
    t0 = time.perf_counter()
    nx, ny = _parse_grid(args.grid)
    ns = _parse_int_list(args.N)
    if not ns:
        raise ValueError("sweep list --N must be non-empty")
    tasks = []
    for n in ns:
        tasks.append(
            {
                "N": n,
                "c": args.c,
                "L": args.L,
                "tau": args.tau,
                "nx": nx,
                "ny": ny,
                "iters": args.iters,
                "restarts": args.restarts,
                # per-point seed depends only on the point, not on scheduling
                "seed": args.seed + n,
                "w_barrier": args.w_barrier,
            }
        )
    workers = args.workers or os.cpu_count() or 1
    if workers > 1 and len(tasks) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, tasks))
    else:
        rows = [_sweep_point(t) for t in tasks]
    rows.sort(key=lambda r: r["N"])

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    _write_atomic(args.out, buf.getvalue())

    json_path = os.path.splitext(args.out)[0] + ".json"
    payload = {
        "config": {
            "N": ns,
            "c": args.c,
            "L": args.L,
            "tau": args.tau,
            "grid": [nx, ny],
            "restarts": args.restarts,
            "iters": args.iters,
            "seed": args.seed,
            "w_barrier": args.w_barrier,
        },
        "rows": rows,
    }
    _write_report(json_path, payload, t0)
    log.info("sweep wrote %s and %s", args.out, json_path)
    return 0


def _cmd_certificate(args) -> int:
    t0 = time.perf_counter()
    density = _load_density(args.rho)
    pam = _load_map(args.map)
    data = _load_json(args.segments)
    if "segments" not in data:
        err = ValueError("segments file: missing field 'segments'")
        err.field = "segments"
        raise err
    segs = SegmentSet.from_json_list(data["segments"])
    cert = StretchCertificate(
        density=density,
        segments=segs,
        delta=args.delta,
        kappa=args.kappa,
        level=args.level,
        lipschitz_bound=args.L,
    )
    result = evaluate_certificate(cert, pam, args.tau)
    payload = {
        "config": cert.to_json_dict(include_density=False),
        "result": result.to_json_dict(),
    }
    _write_report(args.out, payload, t0)
    return 0


# --- parser ---------------------------------------------------------------


def _add_solver_flags(p: argparse.ArgumentParser):
    p.add_argument("--tau", type=float, default=0.5, help="mismatch threshold")
    p.add_argument("--iters", type=int, default=2000, help="max iterations")
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--w-barrier", type=float, default=1e-3, dest="w_barrier")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jacfit",
        description="prescribed-Jacobian experiments with bounded distortion",
    )
    parser.add_argument(
        "--config", default=None, help="JSON file of default flag values"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-density", help="write a density field file")
    p.add_argument("--checkerboard", default=None, help="N=<int>,c=<float>")
    p.add_argument("--const", type=float, default=None)
    p.add_argument("--embed", action="store_true", help="embed strip in unit square")
    p.add_argument("--grid", default="64x64")
    p.add_argument("--csv", default=None, help="also write values as CSV")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=_cmd_gen_density)

    p = sub.add_parser("solve", help="fit a map's Jacobian to a density")
    p.add_argument("--rho", required=True)
    p.add_argument("--L", type=float, required=True)
    p.add_argument("--init", default=None, help="initial map file")
    p.add_argument("--map-out", default=None, dest="map_out")
    _add_solver_flags(p)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("stretch", help="measure segment stretch under a map")
    p.add_argument("--map", required=True)
    p.add_argument("--segments", required=True)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=_cmd_stretch)

    p = sub.add_parser("perturb", help="sup-norm perturbation by gluing")
    p.add_argument("--phi", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--component-seed", default=None, dest="component_seed")
    p.add_argument("--patch-cells", type=int, default=8, dest="patch_cells")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=_cmd_perturb)

    p = sub.add_parser("patch-linf", help="truncate and patch a bounded field")
    p.add_argument("--phi", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--theta", type=float, default=0.95)
    p.add_argument("--band-start", type=float, default=None, dest="band_start")
    p.add_argument("--patch-cells", type=int, default=8, dest="patch_cells")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=_cmd_patch_linf)

    p = sub.add_parser("refine", help="recursive checkerboard refinement")
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--L", type=float, required=True)
    p.add_argument("--levels", type=int, default=1)
    p.add_argument("--grid", default="64x64")
    _add_solver_flags(p)
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("verify-lemma2", help="raster inclusion verifier")
    p.add_argument("--synthetic", type=int, default=None, metavar="K")
    p.add_argument("--radius", type=float, default=0.3)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--grid", default="512x512")
    p.add_argument("--maps", default=None, help="comma-separated map files")
    p.add_argument("--limit", default=None)
    p.add_argument("--mask", default=None)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=_cmd_verify_lemma2)

    p = sub.add_parser("certificate", help="evaluate a stretch certificate")
    p.add_argument("--rho", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--segments", required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--kappa", type=float, required=True)
    p.add_argument("--level", type=int, default=1)
    p.add_argument("--L", type=float, required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=_cmd_certificate)

    p = sub.add_parser("sweep", help="sweep checkerboard sizes, emit tidy CSV")
    p.add_argument("--N", required=True, help="comma-separated cell counts")
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--L", type=float, required=True)
    p.add_argument("--grid", default="64x64")
    p.add_argument("--workers", type=int, default=None)
    _add_solver_flags(p)
    p.add_argument("-o", "--out", required=True, help="CSV output path")
    p.set_defaults(func=_cmd_sweep)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Seed parser defaults from --config; explicit flags still win."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        return argv
    cfg = _load_json(argv[idx + 1])
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object of flag defaults")
    for action in parser._subparsers._group_actions:  # noqa: SLF001
        for sp in action.choices.values():
            known = {a.dest for a in sp._actions}  # noqa: SLF001
            sp.set_defaults(**{k: v for k, v in cfg.items() if k in known})
    return argv


def run(argv: list[str]) -> int:
    """Parse and dispatch; returns the process exit code."""
    _setup_logging()
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    except ValueError as exc:
        _emit_error(exc)
        return 1
    try:
        return args.func(args)
    except ValueError as exc:
        _emit_error(exc)
        return 1
    except OSError as exc:
        _emit_error(ValueError(str(exc)))
        return 1


def _emit_error(exc: Exception):
    body = {"error": str(exc)}
    field = getattr(exc, "field", None)
    if field:
        body["field"] = field
    print(json.dumps(body), file=sys.stderr)


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
