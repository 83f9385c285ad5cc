"""Command-line drivers: generate | assemble | solve | analyze | bench.

Exit codes: 0 on success, 1 when a solver or numerical phase fails, 2 for
invalid arguments or configuration.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis as an
from .assembly import assemble_system, assemble_thresholded
from .config import RunConfig, emit_config, load_config, resolve_T
from .evaluation import Approximant, get_target, l2_error
from .geometry import (LevelHierarchy, build_grid_hierarchy, generate_grid_level, validate_levels,
                       write_points_binary, write_points_csv)
from .kernel import get_kernel
from .krylov import CGConvergenceError
from .parallel import WorkerPool, resolve_workers
from .solver import BlockVector, sequential_multiscale, solve_monolithic

log = logging.getLogger("mskernel")


class UsageError(Exception):
    pass


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _finite(v):
    """JSON has no infinity; encode it as the string 'full'."""
    return "full" if isinstance(v, float) and math.isinf(v) else v


def _check_levels(L: int, cap: int, what: str = "levels") -> None:
    if L < 1:
        raise UsageError(f"{what} must be >= 1")
    if L > cap:
        raise UsageError(f"{what} = {L} exceeds the cap of {cap}; raise it with --max-levels")


def _hierarchy(cfg: RunConfig, L: int | None = None) -> LevelHierarchy:
    kernel = get_kernel(cfg.kernel)
    return build_grid_hierarchy(L or cfg.levels, cfg.hierarchy_params(kernel.tau), cfg.domain)


def _output(cfg: RunConfig) -> Path:
    out = Path(cfg.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, args) -> int:
    _check_levels(cfg.levels, cfg.max_levels)
    out = _output(cfg)
    params = cfg.hierarchy_params(get_kernel(cfg.kernel).tau)
    levels = []
    t0 = time.perf_counter()
    for ell in range(1, cfg.levels + 1):
        lv = generate_grid_level(ell, cfg.domain, nu=params.nu)
        entry = {"level": ell, "N": lv.n, "h": lv.h, "q": lv.q, "delta": lv.delta}
        if not args.no_points:
            name = f"level_{ell:02d}.{'csv' if args.format == 'csv' else 'mskp'}"
            (write_points_csv if args.format == "csv" else write_points_binary)(out / name, lv.points)
            entry["file"] = name
        levels.append(entry)
    report = validate_levels(params, [(e["level"], e["N"], e["h"], e["q"]) for e in levels])
    manifest = {
        "L": cfg.levels,
        "d": cfg.d,
        "domain": {"lower": list(cfg.domain_lower), "upper": list(cfg.domain_upper)},
        "params": {"mu": params.mu, "nu": params.nu, "c_h": params.c_h, "c_q": params.c_q,
                   "tau": params.tau, "gamma": params.gamma},
        "kernel": cfg.kernel,
        "N": [e["N"] for e in levels],
        "levels": levels,
        "validation": report.as_dict(),
        "seconds": time.perf_counter() - t0,
    }
    _write_json(out / "manifest.json", manifest)
    print(f"generated {cfg.levels} levels, N = {manifest['N']}")
    return 0


def cmd_assemble(cfg: RunConfig, args) -> int:
    _check_levels(cfg.levels, cfg.max_levels)
    out = _output(cfg)
    hier = _hierarchy(cfg)
    with WorkerPool(cfg.workers_value, cfg.deterministic) as pool:
        t0 = time.perf_counter()
        system = assemble_system(hier, get_kernel(cfg.kernel), pool)
        seconds = time.perf_counter() - t0
    blocks = []
    for ell in range(1, hier.L + 1):
        A = system.A(ell)
        name = f"A_{ell}.mtx"
        if not args.no_write:
            A.write_matrix_market(out / name)
        blocks.append({"block": [ell, ell], "shape": list(A.shape), "nnz": A.nnz,
                       "max_row_nnz": int(np.diff(A.row_offsets).max()), "file": None if args.no_write else name})
    for (k, ell), B in sorted(system.lower.items()):
        name = f"B_{k}_{ell}.mtx"
        if not args.no_write:
            B.write_matrix_market(out / name)
        blocks.append({"block": [k, ell], "shape": list(B.shape), "nnz": B.nnz,
                       "file": None if args.no_write else name})
    _write_json(out / "assembly.json", {"L": hier.L, "N": hier.sizes, "nnz_total": system.nnz(),
                                        "seconds": seconds, "workers": resolve_workers(cfg.workers_value),
                                        "blocks": blocks})
    print(f"assembled {len(blocks)} blocks, nnz = {system.nnz()}, {seconds:.3f} s")
    return 0


def _resolve_T_value(cfg: RunConfig, hier: LevelHierarchy):
    T = resolve_T(cfg.T)
    if T != "auto":
        return T, None
    params = an.observed_params(hier)
    consts = an.bound_constants(params, cfg.c_phi, cfg.C_phi)
    sel = an.select_truncation_radius(params, consts, hier.L)
    return sel.T, sel


def cmd_solve(cfg: RunConfig, args) -> int:
    _check_levels(cfg.levels, cfg.max_levels)
    out = _output(cfg)
    hier = _hierarchy(cfg)
    target = get_target(cfg.target)
    T_value, selection = (None, None)
    if cfg.mode == "thresholded":
        T_value, selection = _resolve_T_value(cfg, hier)
    scfg = cfg.solver_config(T_value)
    timings = {}
    with WorkerPool(cfg.workers_value, cfg.deterministic) as pool:
        t0 = time.perf_counter()
        system = assemble_system(hier, get_kernel(cfg.kernel), pool)
        timings["assembly"] = time.perf_counter() - t0
        f = BlockVector.sample(hier, target)
        coupling = None
        if cfg.mode == "thresholded":
            t0 = time.perf_counter()
            coupling = assemble_thresholded(system, T_value, cfg.threshold_tol, pool)
            timings["threshold_assembly"] = time.perf_counter() - t0
        sol = solve_monolithic(system, f, scfg, coupling=coupling, pool=pool)
        timings.update(sol.timings)
        meta = sol.metadata()
        meta["workers"] = pool.workers
        meta["deterministic"] = cfg.deterministic
        meta["seed"] = cfg.seed
        meta["timings"] = timings
        meta["T"] = _finite(T_value)
        if selection is not None:
            meta["T_selection"] = selection.as_dict()
        if args.oracle:
            t0 = time.perf_counter()
            seq = sequential_multiscale(system, f, replace(scfg, jacobi_mode="matrix_free", T=None), pool)
            timings["sequential"] = time.perf_counter() - t0
            a, b = sol.alpha.flat(), seq.alpha.flat()
            denom = np.linalg.norm(b)
            meta["oracle_relative_difference"] = float(np.linalg.norm(a - b) / denom) if denom else float(np.linalg.norm(a))
            meta["oracle_iterations"] = seq.iterations
        approx = Approximant(hier, sol.alpha, system.kernel)
        t0 = time.perf_counter()
        err = l2_error(approx, target, args.quadrature, pool)
        timings["error"] = time.perf_counter() - t0
    sol.write_csv(out / "coefficients.csv")
    an.write_table(out / "errors.csv", ["L", "N_total", "l2_error", "linf_error", "T", "solver_mode"],
                   [(hier.L, hier.n_total, err.l2, err.linf, "full" if T_value is None else T_value, cfg.mode)])
    meta["l2_error"] = err.l2
    meta["linf_error"] = err.linf
    _write_json(out / "metadata.json", meta)
    msg = f"solved L={hier.L} N={hier.n_total} l2_error={err.l2:.6g}"
    if args.oracle:
        msg += f" oracle_rel_diff={meta['oracle_relative_difference']:.3g}"
    print(msg)
    return 0


def cmd_analyze(cfg: RunConfig, args) -> int:
    Lmax = cfg.levels
    _check_levels(Lmax, cfg.analysis_max_levels, "analysis levels")
    out = _output(cfg)
    T_list = list(cfg.T_list)
    hier_all = _hierarchy(cfg, Lmax)
    kernel = get_kernel(cfg.kernel)
    params = an.observed_params(hier_all)
    consts = an.bound_constants(params, cfg.c_phi, cfg.C_phi)
    norms, sweeps, inverse = [], [], []
    with WorkerPool(cfg.workers_value, cfg.deterministic) as pool:
        for L in range(2, Lmax + 1):
            hier = hier_all.truncate(L)
            system = assemble_system(hier, kernel, pool)
            full = assemble_thresholded(system, math.inf, cfg.threshold_tol, pool)
            bound = an.m_norm_bound(params, consts, L)
            if T_list:
                rep = an.truncation_sweep(system, T_list, cfg.threshold_tol, pool, full=full, bound=bound.value)
                m_norm = rep.M_norm
                sweeps.extend(rep.rows())
            else:
                m_norm = an.matrix_two_norm(full, seed=an.POWER_SEED + cfg.seed)
            norms.append((L, m_norm, bound.value))
            if L <= 4:
                inverse.append(an.verify_explicit_inverse(system).as_dict())
        system = assemble_system(hier_all, kernel, pool)
    kappa = []
    for ell in range(1, Lmax + 1):
        rep = an.condition_diagnostics(system.A(ell), params, cfg.c_phi, seed=an.POWER_SEED + cfg.seed)
        kappa.append((ell, rep.kappa, rep.bound))
    an.write_table(out / "m_norm.csv", ["L", "m_norm", "m_norm_bound"], norms)
    an.write_table(out / "truncation.csv", ["L", "T", "norm_ratio", "nnz_ratio"], sweeps)
    an.write_table(out / "kappa.csv", ["level", "kappa_est", "kappa_bound"], kappa)
    sel = an.select_truncation_radius(params, consts, Lmax)
    _write_json(out / "explicit_inverse.json", {"reports": inverse,
                                                "passed": all(r["passed"] for r in inverse)})
    _write_json(out / "constants.json", {"params": {"c_q": params.c_q, "c_h": params.c_h, "mu": params.mu,
                                                    "nu": params.nu, "tau": params.tau, "d": params.d},
                                         "constants": consts.as_dict(), "truncation_radius": sel.as_dict()})
    print(f"analyzed L=2..{Lmax}: m_norm = {[round(n[1], 4) for n in norms]}")
    return 0 if all(r["passed"] for r in inverse) else 1


def _ladder(max_workers: int) -> list[int]:
    out, p = [], 1
    while p < max_workers:
        out.append(p)
        p *= 2
    out.append(max_workers)
    return out


def cmd_bench(cfg: RunConfig, args) -> int:
    _check_levels(cfg.levels, cfg.max_levels)
    out = _output(cfg)
    hier = _hierarchy(cfg)
    target = get_target(cfg.target)
    f = BlockVector.sample(hier, target)
    max_workers = args.max_workers or resolve_workers(cfg.workers_value if cfg.workers != "1" else "auto")
    ladder = _ladder(max_workers)
    rows, timings, coeffs = [], {}, {}
    for p in ladder:
        best = None
        for _ in range(args.repeats):
            with WorkerPool(p, cfg.deterministic) as pool:
                t0 = time.perf_counter()
                system = assemble_system(hier, get_kernel(cfg.kernel), pool)
                t_asm = time.perf_counter() - t0
                sol = solve_monolithic(system, f, replace(cfg.solver_config(), jacobi_mode="matrix_free", T=None), pool=pool)
            phases = {"assembly": t_asm, "jacobi": sol.timings["jacobi"], "block_cg": sol.timings["block_cg"]}
            phases["total"] = sum(phases.values())
            if best is None or phases["total"] < best["total"]:
                best = phases
        timings[p] = best
        coeffs[p] = sol.alpha.flat()
        print(f"workers={p}: " + ", ".join(f"{k}={v:.3f}s" for k, v in best.items()))
    for p in ladder:
        for phase, secs in timings[p].items():
            base = timings[ladder[0]][phase]
            speed = base / secs if secs > 0 else math.nan
            rows.append((p, phase, secs, speed, speed / p))
    an.write_table(out / "bench.csv", ["workers", "phase", "seconds", "speedup", "efficiency"], rows)
    ref = coeffs[ladder[0]]
    identical = all(np.array_equal(ref, coeffs[p]) for p in ladder)
    _write_json(out / "bench.json", {"L": hier.L, "N_total": hier.n_total, "ladder": ladder,
                                     "cpu_count": os.cpu_count(), "bit_identical": identical,
                                     "deterministic": cfg.deterministic})
    return 0


# --------------------------------------------------------------------------
# argument handling
# --------------------------------------------------------------------------

def _globals_parser(suppress: bool) -> argparse.ArgumentParser:
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=default, help="INI configuration file")
    p.add_argument("--workers", metavar="N|auto", default=default, help="worker threads")
    p.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="fixed-order reductions (bit-reproducible output)")
    p.add_argument("--output", metavar="DIR", default=default, help="output directory")
    p.add_argument("--seed", type=int, default=default, help="seed for randomised estimators")
    p.add_argument("--levels", "-L", type=int, default=default, help="number of levels")
    p.add_argument("--max-levels", type=int, default=default, help="raise the level cap")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mskernel", parents=[_globals_parser(False)],
                                     description="Multiscale kernel approximation on nested grids.")
    sub = parser.add_subparsers(dest="command", required=True)
    g = _globals_parser(True)

    p = sub.add_parser("generate", parents=[g], help="write the point hierarchy and its manifest")
    p.add_argument("--format", choices=("csv", "binary"), default="csv")
    p.add_argument("--no-points", action="store_true", help="write the manifest only")

    p = sub.add_parser("assemble", parents=[g], help="assemble and export the sparse blocks")
    p.add_argument("--no-write", action="store_true", help="skip Matrix Market export")

    p = sub.add_parser("solve", parents=[g], help="solve the monolithic system")
    p.add_argument("--mode", choices=("matrix_free", "thresholded"))
    p.add_argument("--T", dest="T", help="truncation multiplier, 'auto' or 'full'")
    p.add_argument("--cg-tol", type=float)
    p.add_argument("--target")
    p.add_argument("--oracle", action="store_true", help="also run the sequential algorithm and compare")
    p.add_argument("--quadrature", type=int, default=1024, help="midpoint nodes per axis for errors")

    p = sub.add_parser("analyze", parents=[g], help="norms, truncation sweeps, conditioning")
    p.add_argument("--T-list", dest="T_list", help="comma-separated T values (empty for norms only)")
    p.add_argument("--analysis-max", type=int, help="raise the analysis level cap")

    p = sub.add_parser("bench", parents=[g], help="time the phases across a worker ladder")
    p.add_argument("--max-workers", type=int)
    p.add_argument("--repeats", type=int, default=1)
    return parser


def config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    over = {}
    for key in ("workers", "output", "seed", "levels", "max_levels"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    if getattr(args, "deterministic", False):
        over["deterministic"] = True
    for key, name in (("mode", "mode"), ("T", "T"), ("cg_tol", "cg_tol"), ("target", "target")):
        val = getattr(args, key, None)
        if val is not None:
            over[name] = val
    if getattr(args, "T_list", None) is not None:
        over["T_list"] = tuple(float(v) for v in args.T_list.split(",") if v.strip())
    if getattr(args, "analysis_max", None) is not None:
        over["analysis_max_levels"] = args.analysis_max
    if args.command == "bench" and "levels" not in over and not getattr(args, "config", None):
        over["levels"] = 7
    return replace(cfg, **over)


COMMANDS = {"generate": cmd_generate, "assemble": cmd_assemble, "solve": cmd_solve,
            "analyze": cmd_analyze, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        out = Path(cfg.output)
        rc = COMMANDS[args.command](cfg, args)
        if out.is_dir():
            (out / "config.ini").write_text(emit_config(cfg), encoding="utf-8")
        return rc
    except (UsageError, ValueError, OSError) as exc:
        print(f"mskernel {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CGConvergenceError, MemoryError, an.PowerIterationError) as exc:
        print(f"mskernel {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
