"""Command line interface: ``riscouple {impedance,channel,sweep,optimize}``.

Every command reads a TOML scenario, writes CSV and JSON files into the
output directory and reports failures as one JSON record on stderr. Flags
can also be set through ``RISCOUPLE_*`` environment variables; explicit
flags win.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .channel import (SingularMatrixError, e2e_closed_form, e2e_matrix_direct, far_field_siso,
                      max_relative_discrepancy)
from .impedance import GROUPS, cached_impedance_blocks
from .kernels import ResonantElementError
from .loads import load_network
from .optimizer import (NoFeasibleStart, OptimizationProblem, compare_coupling_awareness,
                        decouple_ris, objective_value, objective_vlos_power, optimize_ris_loads)
from .quadrature import QuadratureError, QuadratureSpec
from .scenario import (ConfigError, PhysicalConstants, build_scenario, load_config, parse_length,
                       validate_spacing)

log = logging.getLogger("riscouple")

EXIT_CODES = {
    "OK": 0,
    "INTERNAL": 1,
    "USAGE": 2,
    "CONFIG_IO": 3,
    "CONFIG_INVALID": 4,
    "QUADRATURE": 5,
    "SINGULAR": 6,
    "OPT_NO_FEASIBLE_START": 7,
    "SWEEP_POINT_FAILED": 8,
}

ENV_PREFIX = "RISCOUPLE_"
SWEEP_VARIABLES = ("ris_spacing", "ris_count", "frequency", "tx_rx_distance")


class CliError(Exception):
    def __init__(self, code: str, message: str, **detail):
        super().__init__(message)
        self.code = code
        self.detail = detail


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("USAGE", f"{self.prog}: {message}")


def emit_error(code: str, message: str, **detail) -> int:
    rec = {"error": {"code": code, "message": message}}
    if detail:
        rec["error"]["detail"] = detail
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    return EXIT_CODES[code]


def classify(exc: BaseException) -> CliError:
    """Map a library exception to a coded CLI error."""
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, OSError):
        return CliError("CONFIG_IO", str(exc), path=getattr(exc, "filename", None))
    if isinstance(exc, SingularMatrixError):
        return CliError("SINGULAR", str(exc), matrix=exc.name, condition=_json_float(exc.condition))
    if isinstance(exc, QuadratureError):
        return CliError("QUADRATURE", str(exc))
    if isinstance(exc, NoFeasibleStart):
        return CliError("OPT_NO_FEASIBLE_START", str(exc))
    if isinstance(exc, (ConfigError, ResonantElementError, ValueError)):
        return CliError("CONFIG_INVALID", str(exc))
    return CliError("INTERNAL", f"{type(exc).__name__}: {exc}")


def _json_float(x):
    return x if math.isfinite(x) else str(x)


# ----------------------------------------------------------------------------
# output helpers

def fmt(x) -> str:
    return "%.17g" % x


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def write_matrix_csv(path: Path, M):
    M = np.atleast_2d(np.asarray(M, dtype=complex))
    rows = ((i, j, float(M[i, j].real), float(M[i, j].imag))
            for i in range(M.shape[0]) for j in range(M.shape[1]))
    write_csv(path, ("row", "col", "re", "im"), rows)


def write_json(path: Path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cpx(z) -> list:
    return [float(np.real(z)), float(np.imag(z))]


def matrix_json(M) -> list:
    M = np.atleast_2d(np.asarray(M, dtype=complex))
    return [[cpx(v) for v in row] for row in M]


# ----------------------------------------------------------------------------
# shared setup

@dataclass
class Context:
    config_path: Path
    out: Path
    jobs: int
    seed: int
    quad_tol: float | None
    cache_dir: Path | None


def _env(name, default=None):
    return os.environ.get(ENV_PREFIX + name, default)


def make_context(args) -> Context:
    config = args.config or _env("CONFIG")
    if not config:
        raise CliError("USAGE", "no scenario given: use --config or RISCOUPLE_CONFIG")
    try:
        jobs = int(args.jobs if args.jobs is not None else _env("JOBS", 1))
        seed = int(args.seed if args.seed is not None else _env("SEED", 0))
        qt = args.quad_tol if args.quad_tol is not None else _env("QUAD_TOL")
        quad_tol = float(qt) if qt is not None else None
    except ValueError as exc:
        raise CliError("USAGE", f"bad numeric flag or environment value: {exc}") from None
    if jobs < 1:
        raise CliError("USAGE", "--jobs must be >= 1")
    cache = args.cache_dir or _env("CACHE_DIR")
    return Context(Path(config), Path(args.out or _env("OUT", "out")), jobs, seed, quad_tol,
                   Path(cache) if cache else None)


def quad_spec(cfg, quad_tol) -> QuadratureSpec:
    try:
        q = QuadratureSpec(**cfg.quadrature)
    except TypeError as exc:
        raise ConfigError(f"[quadrature]: {exc}") from None
    return q.with_rtol(quad_tol) if quad_tol is not None else q


def prepare(ctx: Context):
    cfg = load_config(ctx.config_path)
    s = build_scenario(cfg)
    close = validate_spacing(s)
    if close:
        log.warning("%d element pair(s) closer than a tenth of a wavelength, e.g. %s",
                    len(close), close[0])
    return cfg, s, quad_spec(cfg, ctx.quad_tol)


def _outdir(ctx: Context) -> Path:
    try:
        ctx.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("CONFIG_IO", f"cannot create output directory: {exc}", path=str(ctx.out))
    return ctx.out


def _provenance(s, quad) -> dict:
    return {"geometry_hash": s.geometry_hash(), "quadrature": quad.to_dict(),
            "frequency_hz": s.constants.frequency, "version": __version__,
            "dims": {"n_t": s.n_t, "n_ris": s.n_ris, "n_r": s.n_r}}


# ----------------------------------------------------------------------------
# commands

def cmd_impedance(args, ctx: Context) -> int:
    _, s, quad = prepare(ctx)
    t0 = time.perf_counter()
    blocks, hit = cached_impedance_blocks(s, quad, ctx.cache_dir, ctx.jobs)
    elapsed = time.perf_counter() - t0
    out = _outdir(ctx)
    files = []
    for x in GROUPS:
        for y in GROUPS:
            name = f"Z_{x}{y}.csv"
            write_matrix_csv(out / name, blocks.block(x, y))
            files.append(name)
    manifest = _provenance(s, quad)
    manifest.update(files=files, cache_hit=hit, jobs=ctx.jobs,
                    timing_s={"impedance": elapsed},
                    max_quadrature_error=float(np.max(blocks.errors)) if blocks.errors is not None
                    and blocks.errors.size else 0.0)
    write_json(out / "manifest.json", manifest)
    return 0


def cmd_channel(args, ctx: Context) -> int:
    methods = [m for m, on in (("direct", args.direct), ("closed_form", args.closed_form),
                               ("far_field", args.far_field)) if on] or ["direct"]
    _, s, quad = prepare(ctx)
    if "far_field" in methods and (s.n_t != 1 or s.n_r != 1):
        raise CliError("USAGE", f"--far-field needs one transmit and one receive antenna, "
                                f"got N_t={s.n_t}, N_r={s.n_r}")
    blocks, hit = cached_impedance_blocks(s, quad, ctx.cache_dir, ctx.jobs)
    net = load_network(s)
    solvers = {"direct": e2e_matrix_direct, "closed_form": e2e_closed_form,
               "far_field": far_field_siso}
    results = {m: solvers[m](blocks, net) for m in methods}
    out = _outdir(ctx)
    summary = _provenance(s, quad)
    summary["cache_hit"] = hit
    summary["methods"] = {}
    for m, r in results.items():
        write_matrix_csv(out / f"h_e2e_{m}.csv", r.h_e2e)
        write_csv(out / f"singular_values_{m}.csv", ("index", "sigma"),
                  ((i, float(v)) for i, v in enumerate(r.singular_values)))
        entry = {"h_e2e": matrix_json(r.h_e2e),
                 "singular_values": [float(v) for v in r.singular_values],
                 "rank": r.metrics.rank, "frobenius": r.metrics.frobenius,
                 "residual": r.residual}
        if r.y0 is not None:
            entry["y0"] = cpx(r.y0)
        summary["methods"][m] = entry
    first = results[methods[0]]
    write_matrix_csv(out / "h_los.csv", first.h_los)
    write_matrix_csv(out / "h_vlos.csv", first.h_vlos)
    write_matrix_csv(out / "h_vlos_no_coupling.csv", first.h_vlos_no_coupling)
    summary.update(h_los=matrix_json(first.h_los), h_vlos=matrix_json(first.h_vlos),
                   h_vlos_no_coupling=matrix_json(first.h_vlos_no_coupling))
    if "direct" in results and "closed_form" in results:
        summary["max_relative_discrepancy"] = max_relative_discrepancy(
            results["closed_form"].h_e2e, results["direct"].h_e2e)
    write_json(out / "summary.json", summary)
    return 0


def _parse_values(variable: str, raw: str, wavelength: float) -> list:
    items = [v.strip() for v in raw.split(",") if v.strip()]
    if not items:
        raise CliError("USAGE", "--values must not be empty")
    try:
        if variable == "ris_count":
            vals = [int(v) for v in items]
            for n in vals:
                r = math.isqrt(n) if n >= 0 else -1
                if n < 1 or r * r != n:
                    raise ValueError(f"ris_count {n} is not a positive perfect square")
            return vals
        if variable == "frequency":
            vals = [float(v) for v in items]
        else:
            vals = [parse_length(v, wavelength) for v in items]
    except (ValueError, ConfigError) as exc:
        raise CliError("USAGE", f"bad --values for {variable}: {exc}") from None
    if any(not (v > 0 and math.isfinite(v)) for v in vals):
        raise CliError("USAGE", f"--values for {variable} must be positive and finite")
    return vals


def _place_at_distance(positions, center, distance):
    """Translate an array along the center-to-centroid direction to ``distance``."""
    pos = np.asarray(positions, dtype=float)
    centroid = pos.mean(axis=0)
    v = centroid - center
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ConfigError("array centroid coincides with the RIS center")
    shift = v / norm * distance - v
    return tuple(tuple(float(c) for c in p + shift) for p in pos)


def sweep_point_config(cfg, variable: str, value, n_ris: int | None):
    """The scenario config for one sweep point."""
    ris = cfg.ris
    if n_ris is not None:
        m = math.isqrt(n_ris)
        ris = replace(ris, rows=m, cols=m)
    if variable == "ris_spacing":
        ris = replace(ris, spacing=float(value))
    elif variable == "ris_count":
        m = math.isqrt(int(value))
        ris = replace(ris, rows=m, cols=m)
    cfg = replace(cfg, ris=ris)
    if variable == "frequency":
        cfg = replace(cfg, frequency_hz=float(value))
    elif variable == "tx_rx_distance":
        lam = PhysicalConstants.from_frequency(cfg.frequency_hz).wavelength
        center = np.array([parse_length(c, lam) for c in cfg.ris.center])
        tx = [[parse_length(c, lam) for c in p] for p in cfg.transmitter.positions]
        rx = [[parse_length(c, lam) for c in p] for p in cfg.receiver.positions]
        cfg = replace(cfg,
                      transmitter=replace(cfg.transmitter, positions=_place_at_distance(tx, center, value)),
                      receiver=replace(cfg.receiver, positions=_place_at_distance(rx, center, value)))
    return cfg


def _sweep_worker(task):
    cfg, variable, value, n_ris, quad_d, cache_dir, optimize, seed = task
    t0 = time.perf_counter()
    row = {"value": value, "n_ris": None, "vlos_power_coupled": None,
           "vlos_power_uncoupled": None, "e2e_power": None, "error": ""}
    try:
        pc = sweep_point_config(cfg, variable, value, n_ris)
        s = build_scenario(pc)
        row["n_ris"] = s.n_ris
        blocks, _ = cached_impedance_blocks(s, QuadratureSpec(**quad_d), cache_dir, 1)
        net = load_network(s)
        if optimize and s.n_ris:
            p = OptimizationProblem(s.n_ris, resistance=tuple(net.z_ris.real), seed=seed)
            cmp = compare_coupling_awareness(p, blocks)
            row["vlos_power_coupled"] = cmp.aware_objective
            row["vlos_power_uncoupled"] = cmp.unaware_objective
            net = net.with_ris(cmp.aware.loads)
        else:
            row["vlos_power_coupled"] = objective_vlos_power(net.z_ris, blocks)
            row["vlos_power_uncoupled"] = objective_vlos_power(net.z_ris, decouple_ris(blocks))
        if s.n_t and s.n_r:
            row["e2e_power"] = float(np.abs(e2e_matrix_direct(blocks, net).h_e2e[0, 0]) ** 2)
    except Exception as exc:  # recorded per point, the sweep goes on
        err = classify(exc)
        row["error"] = f"{err.code}: {err}"
    row["wall_ms"] = 1e3 * (time.perf_counter() - t0)
    return row


def cmd_sweep(args, ctx: Context) -> int:
    cfg, s, quad = prepare(ctx)
    variable = args.variable
    values = _parse_values(variable, args.values, s.constants.wavelength)
    counts = [None]
    if args.ris_counts:
        if variable == "ris_count":
            raise CliError("USAGE", "--ris-counts cannot be combined with --variable ris_count")
        counts = _parse_values("ris_count", args.ris_counts, s.constants.wavelength)
    loads = "optimized" if args.optimize else "fixed"
    tasks = [(cfg, variable, v, n, quad.to_dict(), ctx.cache_dir, args.optimize, ctx.seed)
             for n in counts for v in values]
    log.info("sweep over %s: %d point(s), %d job(s)", variable, len(tasks), ctx.jobs)
    if ctx.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(ctx.jobs, len(tasks))) as pool:
            rows = list(pool.map(_sweep_worker, tasks))  # map keeps sweep order
    else:
        rows = [_sweep_worker(t) for t in tasks]
    out = _outdir(ctx)

    def cell(v):
        return "" if v is None else v

    write_csv(out / "sweep.csv",
              ("variable", "value", "n_ris", "loads", "vlos_power_coupled", "vlos_power_uncoupled",
               "e2e_power", "wall_ms", "error"),
              ((variable, float(r["value"]), cell(r["n_ris"]), loads, cell(r["vlos_power_coupled"]),
                cell(r["vlos_power_uncoupled"]), cell(r["e2e_power"]), r["wall_ms"], r["error"])
               for r in rows))
    manifest = _provenance(s, quad)
    manifest.update(variable=variable, values=[float(v) for v in values],
                    ris_counts=[c for c in counts if c is not None], loads=loads, seed=ctx.seed,
                    points=len(rows), failed=sum(bool(r["error"]) for r in rows))
    write_json(out / "sweep_manifest.json", manifest)
    failed = [i for i, r in enumerate(rows) if r["error"]]
    if failed:
        raise CliError("SWEEP_POINT_FAILED", f"{len(failed)} of {len(rows)} sweep points failed",
                       rows=failed)
    return 0


def cmd_optimize(args, ctx: Context) -> int:
    _, s, quad = prepare(ctx)
    if s.n_ris == 0:
        raise CliError("USAGE", "the scenario has no RIS elements to optimize")
    blocks, hit = cached_impedance_blocks(s, quad, ctx.cache_dir, ctx.jobs)
    net = load_network(s)
    try:
        entry = tuple(int(v) for v in args.entry.split(","))
        if len(entry) != 2:
            raise ValueError
    except ValueError:
        raise CliError("USAGE", f"--entry must be 'row,col', got {args.entry!r}") from None
    try:
        p = OptimizationProblem(
            s.n_ris, resistance=tuple(net.z_ris.real), x_min=args.x_min, x_max=args.x_max,
            parameterization=args.parameterization, omega=s.constants.omega,
            objective=args.objective, entry=entry, network=net, max_iter=args.max_iter,
            n_starts=args.starts, seed=ctx.seed, coupling_aware=args.coupling != "unaware")
    except ValueError as exc:
        raise CliError("USAGE", str(exc)) from None
    if args.coupling == "both":
        cmp = compare_coupling_awareness(p, blocks)
        results = {"aware": cmp.aware, "unaware": cmp.unaware}
        scores = {"aware": cmp.aware_objective, "unaware": cmp.unaware_objective}
    else:
        res = optimize_ris_loads(p, blocks)
        results = {args.coupling: res}
        scores = {args.coupling: res.objective if p.coupling_aware else None}
    out = _outdir(ctx)
    report = _provenance(s, quad)
    report.update(cache_hit=hit, seed=ctx.seed, parameters={
        "objective": p.objective, "parameterization": p.parameterization,
        "x_min": p.x_min, "x_max": p.x_max, "resistances": p.resistances.tolist(),
        "n_starts": p.n_starts, "max_iter": p.max_iter, "step_tol": p.step_tol,
        "obj_tol": p.obj_tol, "entry": list(entry), "coupling": args.coupling})
    report["runs"] = {}
    for name, r in results.items():
        d = r.to_dict()
        d["wall_s"] = r.wall_s
        if scores[name] is None:
            scores[name] = objective_value(r.loads, blocks, p.objective, net, entry)
        d["coupled_model_objective"] = scores[name]
        report["runs"][name] = d
        write_csv(out / f"trajectory_{name}.csv", ("iteration", "objective"),
                  ((i, float(v)) for i, v in enumerate(r.trajectory)))
    write_json(out / "optimize_report.json", report)
    return 0


# ----------------------------------------------------------------------------
# argument parsing

def _global_flags() -> argparse.ArgumentParser:
    g = argparse.ArgumentParser(add_help=False)
    d = argparse.SUPPRESS
    g.add_argument("--config", default=d, help="scenario TOML file [RISCOUPLE_CONFIG]")
    g.add_argument("--out", default=d, help="output directory [RISCOUPLE_OUT, default ./out]")
    g.add_argument("--jobs", type=int, default=d, help="worker processes [RISCOUPLE_JOBS, default 1]")
    g.add_argument("--seed", type=int, default=d, help="random seed [RISCOUPLE_SEED, default 0]")
    g.add_argument("--quad-tol", type=float, default=d,
                   help="quadrature relative tolerance [RISCOUPLE_QUAD_TOL]")
    g.add_argument("--cache-dir", default=d, help="impedance cache directory [RISCOUPLE_CACHE_DIR]")
    g.add_argument("-v", "--verbose", action="count", default=d)
    return g


def build_parser() -> argparse.ArgumentParser:
    g = _global_flags()
    parser = _Parser(prog="riscouple", parents=[g],
                     description="Mutual-coupling-aware RIS channel simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("impedance", parents=[g], help="assemble and export the impedance blocks")
    p.set_defaults(func=cmd_impedance)

    p = sub.add_parser("channel", parents=[g], help="end-to-end channel matrix")
    p.add_argument("--direct", action="store_true", help="direct solve of the port system (default)")
    p.add_argument("--closed-form", action="store_true", help="block-eliminated closed form")
    p.add_argument("--far-field", action="store_true", help="single-link far-field form")
    p.set_defaults(func=cmd_channel)

    p = sub.add_parser("sweep", parents=[g], help="parameter sweep of |H_VLOS|^2")
    p.add_argument("--variable", required=True, choices=SWEEP_VARIABLES)
    p.add_argument("--values", required=True,
                   help="comma-separated values; lengths accept 'lambda/16' or '2.5mm'")
    p.add_argument("--ris-counts", help="optional comma-separated square RIS sizes (outer loop)")
    p.add_argument("--optimize", action="store_true",
                   help="optimize the RIS reactances at every point instead of using the config loads")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("optimize", parents=[g], help="tune the RIS reactances")
    p.add_argument("--objective", default="vlos_power", choices=("vlos_power", "e2e_entry_power"))
    p.add_argument("--parameterization", default="reactance", choices=("reactance", "inductance"))
    p.add_argument("--x-min", type=float, default=-1000.0, help="lower reactance bound (ohm)")
    p.add_argument("--x-max", type=float, default=1000.0, help="upper reactance bound (ohm)")
    p.add_argument("--starts", type=int, default=8)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--entry", default="0,0", help="H_E2E entry 'row,col' for e2e_entry_power")
    p.add_argument("--coupling", default="aware", choices=("aware", "unaware", "both"))
    p.set_defaults(func=cmd_optimize)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        return emit_error(exc.code, str(exc))
    for name in ("config", "out", "jobs", "seed", "quad_tol", "cache_dir"):
        if not hasattr(args, name):
            setattr(args, name, None)
    verbose = getattr(args, "verbose", 0) or 0
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx = make_context(args)
        return args.func(args, ctx)
    except Exception as exc:
        err = classify(exc)
        if err.code == "INTERNAL":
            log.debug("internal error", exc_info=True)
        return emit_error(err.code, str(err), **err.detail)


if __name__ == "__main__":
    sys.exit(main())
