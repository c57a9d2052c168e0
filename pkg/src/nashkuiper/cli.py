"""Command-line entry point: ``nashkuiper {verify,run,stage,export-mesh,validate-schedule}``.

Exit status: 0 on success, 1 when a suite or a numerical check fails, 2
for configuration and parameter-gate errors.  The output directory may be
overridden with the ``NASHKUIPER_OUTPUT_DIR`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .config import OUTPUT_ENV, RunConfig, dump_config, load_config
from .driver import RunResult, format_failure, run, validate_schedule, write_manifest
from .errors import GATE_CODES, NKError
from .frames import ImmersionState
from .grid import GridField, GridSpec, check_resolution, dmulti, grad, load_field
from .stage import (
    _jsonable,
    flat_metric,
    flat_short_map,
    flat_stage_input,
    stage,
)

log = logging.getLogger("nashkuiper")

EXIT_OK, EXIT_FAIL, EXIT_GATE = 0, 1, 2


# ---------------------------------------------------------------------------
# inputs and snapshots
# ---------------------------------------------------------------------------


def build_inputs(cfg: RunConfig) -> tuple[GridField, GridField]:
    spec = GridSpec(cfg.n, cfg.max_deriv)
    if cfg.metric_file:
        g = load_field(cfg.metric_file, cfg.max_deriv)
        if g.spec != spec or g.arity != "sym2":
            raise NKError("grid-mismatch", f"metric file must be sym2 on an n={cfg.n} grid")
    else:
        g = flat_metric(spec)
    if cfg.immersion_file:
        u = load_field(cfg.immersion_file, cfg.max_deriv)
        if u.spec != spec or u.arity != "vec4":
            raise NKError("grid-mismatch", f"immersion file must be vec4 on an n={cfg.n} grid")
    else:
        u = flat_short_map(spec, cfg.immersion_scale)
    return g, u


def save_snapshot(path: str | Path, state: ImmersionState, n: int = 0) -> None:
    np.savez(
        path,
        u=state.u.data,
        du=state.du,
        E1=state.E1.data,
        E2=state.E2.data,
        delta=state.delta,
        mu=state.mu,
        iteration=n,
        max_deriv=state.spec.max_deriv,
    )


def load_snapshot(path: str | Path) -> tuple[ImmersionState, int]:
    p = Path(path)
    if not p.exists():
        raise NKError("config-invalid", f"snapshot {p} not found")
    z = np.load(p)
    spec = GridSpec(int(z["u"].shape[0]), int(z["max_deriv"]))
    st = ImmersionState(
        GridField(spec, "vec4", z["u"]),
        GridField(spec, "vec4", z["E1"]),
        GridField(spec, "vec4", z["E2"]),
        z["du"],
        float(z["delta"]),
        float(z["mu"]),
    )
    return st, int(z["iteration"])


def _output_dir(arg: str | None, cfg: RunConfig | None = None) -> Path:
    env = os.environ.get(OUTPUT_ENV)
    out = Path(env) if env else Path(arg) if arg else (cfg.resolved_output_dir() if cfg else Path("nashkuiper-out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return "" if v is None else str(v)


def write_metrics_csv(path: Path, result: RunResult) -> int:
    """One row per outer iterate and one per stage corrugation; returns the row count."""
    cols = [
        "kind",
        "n",
        "k",
        "step",
        "delta",
        "mu",
        "sigma",
        "frequency",
        "defect",
        "shifted_defect",
        "shifted_target",
        "c0_to_ubar",
        "u_c2",
        "defect_before",
        "defect_after",
        "identity_residual",
        "contract_residual",
    ]
    rows = []
    for it in result.iterates:
        m = dict(it.metrics)
        m["kind"] = "iterate"
        rows.append(m)
        if it.trace is not None:
            for r in it.trace.rows:
                rows.append(dict(r, kind="corrugation", n=it.n))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for r in rows:
            wr.writerow([_fmt(r.get(c)) for c in cols])
    return len(rows)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_verify(args) -> int:
    from .suites import run_suites

    fault = {"S3": args.fault_s3} if args.fault_s3 is not None else None
    spec = GridSpec(args.n)
    check_resolution(spec, args.lam, True, "configured step frequency")
    results = run_suites(args.suite or None, fault=fault, n=args.n, count=args.count, lam_max=args.lam)
    print(f"{'suite':<14} {'worst residual':>15} {'tolerance':>10} {'time':>7}  status")
    for r in results:
        print(f"{r.name:<14} {r.residual:>15.3e} {r.tol:>10.0e} {r.seconds:>6.1f}s  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if args.json or args.output_dir or _env_out():
        out = _output_dir(args.output_dir)
        path = Path(args.json) if args.json else out / "verify.json"
        path.write_text(json.dumps(_jsonable([r.as_dict() for r in results]), indent=2))
    if failed:
        print("failed suites: " + ", ".join(failed))
        return EXIT_FAIL
    return EXIT_OK


def _env_out() -> bool:
    return bool(os.environ.get(OUTPUT_ENV))


def cmd_validate_schedule(args) -> int:
    cfg = load_config(args.config, args.set)
    spec = GridSpec(cfg.n, cfg.max_deriv) if args.check_grid else None
    rep = validate_schedule(
        cfg.schedule,
        args.horizon if args.horizon is not None else max(cfg.n_iters, 1),
        cfg.measured_C,
        cfg.sigma_floor,
        cfg.g_seminorm or 0.0,
        spec=spec,
        base=cfg.stage,
    )
    print(f"{'n':>3} {'delta_n':>12} {'mu_n':>12} {'sigma_n+1':>10}  failing checks")
    for row in rep["rows"]:
        bad = [c["name"] for c in row["checks"] if not c["ok"]]
        print(f"{row['n']:>3} {row['delta_n']:>12.4e} {row['mu_n']:>12.4e} {row['sigma_next']:>10.5f}  {'; '.join(bad) or '-'}")
    print(format_failure(rep))
    if args.output_dir or _env_out():
        write_manifest(_output_dir(args.output_dir) / "schedule.json", rep)
    return EXIT_OK if rep["feasible"] else EXIT_GATE


def _precheck_schedule(cfg: RunConfig, g: GridField) -> None:
    if not cfg.check_schedule or cfg.n_iters == 0:
        return
    g_semi = cfg.g_seminorm
    if g_semi is None:
        # only the top-order part of |g|_{r,beta} controls the mollification gap
        g_semi = max(float(np.max(np.abs(dmulti(g.data, p, 2 - p, g.spec.h)))) for p in range(3))
    rep = validate_schedule(cfg.schedule, cfg.n_iters, cfg.measured_C, cfg.sigma_floor, g_semi)
    if not rep["feasible"]:
        raise NKError("schedule-infeasible", format_failure(rep), report=rep)


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _output_dir(args.output_dir, cfg)
    g, u_bar = build_inputs(cfg)
    _precheck_schedule(cfg, g)
    manifest = {"command": "run", "config": cfg.as_dict(), "grid": {"n": cfg.n, "h": 1.0 / (cfg.n - 1)}}
    (out / "config.txt").write_text(dump_config(cfg))

    def snap(it):
        if cfg.snapshots:
            save_snapshot(out / f"iterate_{it.n:03d}.npz", it.state, it.n)

    status = "ok"
    error = None
    try:
        if args.resume:
            result = _resume(cfg, g, u_bar, args.resume, snap)
        else:
            result = run(
                g,
                u_bar,
                cfg.alpha,
                cfg.epsilon,
                cfg.schedule,
                cfg.stage,
                cfg.n_iters,
                initial_ratio=cfg.initial_ratio,
                callback=snap,
            )
        status = result.status
    except NKError as err:
        result = err.context.get("partial")
        status = "failed"
        error = {k: v for k, v in err.as_dict().items() if k not in ("partial", "trace")}
        trace = err.context.get("trace")
        if trace is not None:
            trace.to_csv(out / "failed_stage.csv")
            trace.to_json(out / "failed_stage.json")
        if result is None:
            manifest.update(status=status, error=error)
            write_manifest(out / "manifest.json", manifest)
            raise
    rows = write_metrics_csv(out / "metrics.csv", result)
    manifest.update(
        status=status,
        error=error,
        schedule=result.schedule.as_dict(),
        initial_stage=result.initial.as_dict(),
        iterations=[it.metrics for it in result.iterates],
        convergence=result.report.as_dict() if result.report else None,
        metrics_rows=rows,
    )
    write_manifest(out / "manifest.json", manifest)
    for it in result.iterates:
        if it.trace is not None:
            it.trace.to_csv(out / f"stage_{it.n:03d}.csv")
    if cfg.export_obj or cfg.export_vtk:
        _export_state(out, g, result.iterates[-1].state, cfg.export_obj, cfg.export_vtk)
    print(f"status: {status}; {len(result.iterates)} iterate(s); output in {out}")
    if error:
        print(f"error: {error['code']}: {error['detail']}")
        return EXIT_GATE if error["code"] in GATE_CODES else EXIT_FAIL
    return EXIT_OK


def _resume(cfg: RunConfig, g, u_bar, path, callback) -> RunResult:
    from .driver import Iterate, convergence_report, iterate_metrics
    from .stage import InitialStageReport

    st, n0 = load_snapshot(path)
    sched = cfg.schedule
    it0 = Iterate(n0, st, st.delta, st.mu, None)
    it0.metrics = iterate_metrics(g, it0, u_bar)
    iterates = [it0]
    status = "ok"
    for n in range(n0, cfg.n_iters):
        sp = sched.stage_params(n, cfg.stage)
        if not all(r["ok"] for r in sp.resolution_report(st.spec)):
            status = "truncated-by-resolution"
            break
        new, trace = stage(g, iterates[-1].state, sp)
        it = Iterate(n + 1, new, sched.delta(n + 1), sched.mu(n + 1), sp.sigma, trace=trace)
        it.metrics = iterate_metrics(g, it, u_bar)
        it.metrics["stage_defect_out"] = trace.summary.get("defect_out")
        iterates.append(it)
        callback(it)
    report = convergence_report(iterates, cfg.alpha, status != "ok") if len(iterates) >= 2 else None
    init = InitialStageReport(st.delta, 0.0, 0.0, [], [], float("nan"), float("nan"), 0.0, 0.0, {}, [], 0)
    return RunResult(iterates, report, init, sched, status)


def cmd_stage(args) -> int:
    cfg = load_config(args.config, args.set)
    out = _output_dir(args.output_dir, cfg)
    spec = GridSpec(cfg.n, cfg.max_deriv)
    g = flat_metric(spec) if not cfg.metric_file else build_inputs(cfg)[0]
    params = cfg.stage
    params.validate(spec)
    if args.snapshot:
        st, _ = load_snapshot(args.snapshot)
        if st.spec != spec:
            raise NKError("grid-mismatch", f"snapshot grid n={st.spec.n} differs from config n={cfg.n}")
    else:
        st = flat_stage_input(spec, params.delta)
    try:
        new, trace = stage(g, st, params)
    except NKError as err:
        trace = err.context.get("trace")
        if trace is not None:
            trace.to_csv(out / "stage.csv")
            trace.to_json(out / "stage.json")
        raise
    trace.to_csv(out / "stage.csv")
    trace.to_json(out / "stage.json")
    save_snapshot(out / "stage_out.npz", new)
    s = trace.summary
    print(f"defect out {s['defect_out']:.6g} (target {s['defect_target']:.6g}); C1 drift {s['c1_total']:.6g}")
    return EXIT_OK if s["defect_out"] <= s["defect_target"] else EXIT_FAIL


def _export_state(out: Path, g: GridField, st: ImmersionState, obj: bool, vtk: bool, projection="drop:3") -> list[Path]:
    from .export import defect_attribute, write_obj, write_vtk
    from .profiles import phase

    attr = defect_attribute(g, st.du)
    x = np.stack(st.spec.coords(), axis=-1)
    ph = g.with_data(phase(x, (1.0, 0.0)) * (st.mu if math.isfinite(st.mu) else 1.0), "scalar")
    paths = []
    if obj:
        p = out / "surface.obj"
        write_obj(p, st.u, projection, attr)
        paths.append(p)
    if vtk:
        p = out / "surface.vtk"
        write_vtk(p, st.u, projection, {"defect": attr, "phase": ph})
        paths.append(p)
    return paths


def cmd_export_mesh(args) -> int:
    from .export import defect_attribute, write_obj, write_vtk

    out = _output_dir(args.output_dir)
    if args.snapshot:
        st, _ = load_snapshot(args.snapshot)
        u, du = st.u, st.du
    elif args.field:
        u = load_field(args.field)
        du = grad(u.data, u.spec.h)
    else:
        raise NKError("config-invalid", "export-mesh needs --snapshot or --field")
    projection = args.projection
    if args.matrix:
        projection = np.loadtxt(args.matrix, ndmin=2)
    attrs = {}
    if args.metric:
        g = load_field(args.metric)
    else:
        g = flat_metric(u.spec)
    attrs["defect"] = defect_attribute(g, du)
    written = []
    stem = args.name
    if args.format in ("obj", "both"):
        p = out / f"{stem}.obj"
        write_obj(p, u, projection, attrs["defect"])
        written.append(p)
    if args.format in ("vtk", "both"):
        p = out / f"{stem}.vtk"
        write_vtk(p, u, projection, attrs)
        written.append(p)
    for p in written:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nashkuiper", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("-o", "--output-dir", help=f"output directory (overridden by ${OUTPUT_ENV})")
        if config:
            p.add_argument("-c", "--config", help="key = value configuration file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry")

    p = sub.add_parser("verify", help="run the identity suites")
    common(p, config=False)
    p.add_argument("--suite", action="append", help="restrict to a suite (repeatable)")
    p.add_argument("--n", type=int, default=513, help="grid resolution for the step suite")
    p.add_argument("--count", type=int, default=20, help="random inputs per step kind")
    p.add_argument("--lam", type=float, default=16 * math.pi, help="largest step frequency")
    p.add_argument("--fault-s3", type=float, default=None, metavar="SCALE", help="test hook: scale the S3 term")
    p.add_argument("--json", help="write the residual table to this file")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("run", help="initial stage followed by outer iterations")
    common(p)
    p.add_argument("--resume", help="continue from an iterate snapshot (.npz)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("stage", help="a single stage on a snapshot or on the flat zero-defect input")
    common(p)
    p.add_argument("--snapshot", help="input snapshot (.npz)")
    p.set_defaults(func=cmd_stage)

    p = sub.add_parser("export-mesh", help="write OBJ and/or VTK meshes of an immersion")
    common(p, config=False)
    p.add_argument("--snapshot", help="iterate snapshot (.npz)")
    p.add_argument("--field", help="vec4 field file (binary grid field format)")
    p.add_argument("--metric", help="sym2 metric field for the defect attribute (default: flat)")
    p.add_argument("--projection", default="drop:3", help="'drop:k' with k in 0..3")
    p.add_argument("--matrix", help="text file holding a 3x4 projection matrix (overrides --projection)")
    p.add_argument("--format", choices=("obj", "vtk", "both"), default="both")
    p.add_argument("--name", default="surface", help="output file stem")
    p.set_defaults(func=cmd_export_mesh)

    p = sub.add_parser("validate-schedule", help="report the per-iteration feasibility inequalities")
    common(p)
    p.add_argument("--horizon", type=int, help="number of iterations to check (default: run.n_iters)")
    p.add_argument("--check-grid", action="store_true", help="also check stage frequencies against the grid")
    p.set_defaults(func=cmd_validate_schedule)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NKError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_GATE if err.code in GATE_CODES else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
