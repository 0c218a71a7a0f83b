"""Command line entry point: run, sweep, design, verify.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numerical fault, 4 no contact although a contact metric was required.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from . import analysis
from .config import (ConfigError, ScenarioConfig, dump_document, from_document, load_config,
                     parse_value)
from .controllers import PACIC, ImpedanceLaw, ImpedanceTerminal, SecondOrderParams
from .dynamics import IntegrationFault
from .environment import contact_force
from .simulation import SimTrace, simulate

logger = logging.getLogger("preimpact")

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_NO_CONTACT = 4

TRACE_FILE = "trace.csv"
BASELINE_FILE = "baseline_trace.csv"
REPORT_FILE = "report.json"
CONFIG_FILE = "config.toml"


class NoContact(RuntimeError):
    pass


def parse_overrides(items: Optional[Sequence[str]]) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {item!r} is not of the form key=value")
        out[key.strip()] = parse_value(value.strip())
    return out


# -- reports -----------------------------------------------------------------

def condition_report(cfg: ScenarioConfig) -> tuple[dict, list]:
    """Smooth-transition verdicts for the configured gains, plus warnings."""
    adm, imp = cfg.admittance_params, cfg.contact_params
    lo, hi = analysis.design_omega_a_range(imp)
    verdict = analysis.check_smooth_condition(imp, adm.omega)
    out = {"omega_a": adm.omega, "zeta_a": adm.zeta, "omega_i": imp.omega, "zeta_i": imp.zeta,
           "omega_a_range": [lo, hi], "smooth_condition": verdict.value}
    warnings = []
    if not math.isclose(adm.zeta, 1.0, rel_tol=1e-9):
        warnings.append(f"zeta_a = {adm.zeta:.6g}; the transition analysis assumes zeta_a = 1")
    if verdict is not analysis.SmoothCondition.SATISFIED:
        warnings.append(f"omega_a = {adm.omega:.6g} lies outside the smooth-transition range "
                        f"[{lo:.6g}, {hi:.6g}) ({verdict.value})")
    return out, warnings


def transition_of(trace: SimTrace, cfg: ScenarioConfig) -> Optional[str]:
    """Classify the transition term from the contact snapshot of a trace."""
    if trace.contact_index is None:
        return None
    adm = cfg.admittance_params
    try:
        w = analysis.critical_omega(adm)
        state = analysis.contact_state_from_trace(trace, w)
        return analysis.t_extremum(state, cfg.contact_params, w).kind.value
    except analysis.AnalysisError as exc:
        return f"undetermined ({exc})"


def build_report(cfg: ScenarioConfig, trace: SimTrace, baseline: Optional[SimTrace],
                 paths: Mapping[str, str]) -> dict:
    conditions, warnings = condition_report(cfg)
    report: dict[str, Any] = {
        "scenario": cfg.scenario.value,
        "controller": type(cfg.controller).__name__,
        "contact_onset": trace.contact_onset,
        "conditions": conditions,
        "transition": transition_of(trace, cfg),
        "signal_lost_samples": trace.signal_lost,
        "metrics": None,
        "warnings": warnings,
        "files": dict(paths),
    }
    if trace.signal_lost:
        warnings.append(f"proximity signal lost on {trace.signal_lost} samples (f_p forced to 0)")
    if trace.contact_index is not None:
        metrics = {"peak_force": analysis.peak_force(trace)}
        if baseline is not None and baseline.contact_index is not None:
            m = analysis.impact_metrics([trace], [baseline])
            metrics.update(mean=m.mean, sd=m.sd, baseline_mean=m.baseline_mean,
                           reduction_effect=m.reduction_effect)
        elif baseline is not None:
            warnings.append("baseline run made no contact; reduction effect unavailable")
        report["metrics"] = metrics
    return report


def baseline_config(cfg: ScenarioConfig, path: Optional[str]) -> ScenarioConfig:
    if path:
        return load_config(path)
    return cfg.with_overrides({"proximity.G_p": 0.0})


def run_scenario(cfg: ScenarioConfig, out_dir: Path, baseline: Optional[ScenarioConfig],
                 require_contact: bool = False) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    trace = simulate(cfg)
    paths = {"trace": str(out_dir / TRACE_FILE), "config": str(out_dir / CONFIG_FILE)}
    trace.to_csv(paths["trace"])
    (out_dir / CONFIG_FILE).write_text(dump_document(cfg.resolved), encoding="utf-8")
    base_trace = None
    if baseline is not None:
        base_trace = simulate(baseline)
        paths["baseline_trace"] = str(out_dir / BASELINE_FILE)
        base_trace.to_csv(paths["baseline_trace"])
    paths["report"] = str(out_dir / REPORT_FILE)
    report = build_report(cfg, trace, base_trace, paths)
    with open(paths["report"], "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    if require_contact and trace.contact_index is None:
        raise NoContact("the run made no contact")
    return report


def cmd_run(args) -> int:
    overrides = parse_overrides(args.set)
    cfg = load_config(args.config, overrides)
    base = baseline_config(cfg, args.baseline_config) if args.baseline else None
    report = run_scenario(cfg, Path(args.out), base, args.require_contact)
    for w in report["warnings"]:
        logger.warning("%s", w)
    m = report["metrics"]
    if m is None:
        print("no contact")
    else:
        line = f"contact at {report['contact_onset']:.6f} s, peak force {m['peak_force']:.6g} N"
        if "reduction_effect" in m:
            line += f", reduction effect {m['reduction_effect']:.1f} %"
        print(line)
    print(f"report written to {report['files']['report']}")
    return EXIT_OK


# -- sweeps ------------------------------------------------------------------

def parse_grid(specs: Sequence[str], grid_file: Optional[str]) -> dict:
    grid: dict[str, list] = {}
    if grid_file:
        from .config import tomllib
        try:
            doc = tomllib.loads(Path(grid_file).read_text(encoding="utf-8"))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(str(exc), source=grid_file) from None
        for key, vals in _flatten(doc.get("grid", doc)).items():
            if not isinstance(vals, list):
                raise ConfigError(f"grid entry {key!r} must be an array", source=grid_file)
            grid[key] = list(vals)
    for spec in specs or ():
        key, sep, vals = spec.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"grid spec {spec!r} is not of the form key=v1,v2,...")
        grid[key.strip()] = [parse_value(v.strip()) for v in vals.split(",") if v.strip()]
    return grid


def _flatten(table: Mapping, prefix: str = "") -> dict:
    out = {}
    for key, val in table.items():
        name = f"{prefix}.{key}" if prefix else key
        if isinstance(val, Mapping):
            out.update(_flatten(val, name))
        else:
            out[name] = val
    return out


def grid_points(grid: Mapping[str, list]) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        return []
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _sort_key(point: Mapping[str, Any]):
    return tuple((0, v, "") if isinstance(v, (int, float)) and not isinstance(v, bool)
                 else (1, 0, str(v)) for _, v in sorted(point.items()))


def sweep_point(doc: dict, point: dict, with_baseline: bool) -> dict:
    """One grid point; runs in a worker process, so everything is rebuilt here."""
    cfg = from_document(doc).with_overrides(point)
    trace = simulate(cfg)
    row: dict[str, Any] = dict(point)
    row["contact_onset"] = trace.contact_onset
    row["peak_force"] = analysis.peak_force(trace) if trace.contact_index is not None else None
    row["baseline_peak_force"] = None
    row["reduction_effect"] = None
    if with_baseline:
        base = simulate(cfg.with_overrides({"proximity.G_p": 0.0}))
        if base.contact_index is not None:
            row["baseline_peak_force"] = analysis.peak_force(base)
            if row["peak_force"] is not None:
                row["reduction_effect"] = analysis.reduction_effect(row["baseline_peak_force"],
                                                                    row["peak_force"])
    conditions, _ = condition_report(cfg)
    row["smooth_condition"] = conditions["smooth_condition"]
    row["transition"] = transition_of(trace, cfg)
    row["signal_lost_samples"] = trace.signal_lost
    return row


SWEEP_COLUMNS = ["contact_onset", "peak_force", "baseline_peak_force", "reduction_effect",
                 "smooth_condition", "transition", "signal_lost_samples"]


def run_sweep(cfg: ScenarioConfig, grid: Mapping[str, list], out_dir: Path, jobs: int = 1,
              with_baseline: bool = True) -> Path:
    points = grid_points(grid)
    for p in points:
        # fail fast on unknown or invalid fields before any run starts
        cfg.with_overrides(p)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = cfg.document
    if jobs > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(sweep_point, [doc] * len(points), points,
                               [with_baseline] * len(points)))
    else:
        rows = [sweep_point(doc, p, with_baseline) for p in points]
    keys = sorted(grid)
    order = sorted(range(len(rows)), key=lambda i: _sort_key(points[i]))
    path = out_dir / "sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + SWEEP_COLUMNS)
        for i in order:
            w.writerow([_fmt(rows[i][k]) for k in keys + SWEEP_COLUMNS])
    return path


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, parse_overrides(args.set))
    grid = parse_grid(args.grid, args.grid_file)
    path = run_sweep(cfg, grid, Path(args.out), args.jobs, args.baseline)
    print(f"{len(grid_points(grid))} runs; results in {path}")
    return EXIT_OK


# -- design ------------------------------------------------------------------

def design_params(args) -> SecondOrderParams:
    natural = args.omega is not None or args.zeta is not None
    physical = args.D is not None or args.K is not None
    if natural == physical:
        raise ConfigError("give either --D and --K or --omega and --zeta together with --M")
    values = {"M": args.M}
    values.update({"omega": args.omega, "zeta": args.zeta} if natural else
                  {"D": args.D, "K": args.K})
    for name, val in values.items():
        if val is None:
            raise ConfigError(f"--{name} is required")
        if not (val > 0 and math.isfinite(val)):
            raise ConfigError(f"--{name} must be positive, got {val}")
    if natural:
        return SecondOrderParams.from_natural(args.M, args.omega, args.zeta)
    return SecondOrderParams(args.M, args.D, args.K)


def cmd_design(args) -> int:
    imp = design_params(args)
    lo, hi = analysis.design_omega_a_range(imp)
    print(f"contact part: M_i = {imp.M:g}, D_i = {imp.D:g}, K_i = {imp.K:g} "
          f"(omega_i = {imp.omega:g} rad/s, zeta_i = {imp.zeta:g})")
    print(f"omega_a range for a smooth transition: [{lo:g}, {hi:g}) rad/s")
    print("checklist:")
    print("  1. pick omega_a inside the range above")
    print("  2. keep the proximity admittance part critically damped (zeta_a = 1)")
    print("  3. tune G_p for the task; there is no closed-form rule for it")
    return EXIT_OK


# -- verify ------------------------------------------------------------------

def verify_trace(trace: SimTrace, cfg: ScenarioConfig, tol: float = 1e-6) -> list[tuple]:
    """Oracle checks of a recorded trace against its configuration.

    Returns (name, passed or None when skipped, detail) tuples.
    """
    checks = []
    t = trace.t
    steps = np.diff(t)
    ok = bool(np.all(steps > 0) and np.allclose(steps, cfg.integrator.dt, rtol=1e-9, atol=0))
    checks.append(("uniform time grid", ok, f"dt = {steps[0]:.6g} s"))
    finite = all(np.all(np.isfinite(v)) for v in trace.to_array().T)
    checks.append(("finite samples", finite, ""))

    # the first admittance part only sees the virtual force
    adm = cfg.admittance_params
    y = analysis.zoh_response(adm, trace.fp_x, trace.dt)
    err = float(np.max(np.abs(trace.x_v[:, 0] - trace.x_d - y)))
    checks.append(("admittance response to f_p", err < tol, f"max error {err:.3g} m"))

    rate = cfg.normal * (trace.v - trace.v_obs)
    fc = np.array([contact_force(g, r, cfg.contact) for g, r in zip(trace.gap, rate)])
    err = float(np.max(np.abs(fc - trace.f_c)))
    checks.append(("contact model", err <= 1e-9 * max(1.0, float(np.max(trace.f_c))),
                   f"max error {err:.3g} N"))

    ctrl = cfg.controller
    law, imp = None, None
    if isinstance(ctrl, PACIC):
        law, imp = ctrl.law, ctrl.impedance
    elif isinstance(getattr(ctrl, "terminal", None), ImpedanceTerminal):
        law, imp = ctrl.terminal.law, ctrl.terminal.params
    if law is ImpedanceLaw.FULL_FEEDFORWARD and ctrl.n_virtual == 1:
        res = analysis.superposition_check(trace, adm, imp)
        checks.append(("superposition", res < tol, f"max residual {res:.3g} m"))
    elif law in (ImpedanceLaw.NO_FEEDFORWARD, ImpedanceLaw.MI_EQUALS_M):
        # closed loop: inertia * a + D_i (v - v_v) + K_i (x - x_v) = f_c
        inertia = ctrl.m if law is ImpedanceLaw.MI_EQUALS_M else imp.M
        e, ed = trace.x - trace.x_v[:, -1], trace.v - trace.v_v[:, -1]
        err = float(np.max(np.abs(inertia * trace.a + imp.D * ed + imp.K * e - trace.fc_x)))
        checks.append(("impedance identity", err < 1e-6 * max(1.0, float(np.max(trace.f_c))),
                       f"max error {err:.3g} N"))
    else:
        checks.append(("superposition", None, "needs a single-stage impedance controller"))

    k = trace.contact_index
    if k is None:
        checks.append(("contact transition", None, "no contact in trace"))
    else:
        detail = transition_of(trace, cfg)
        checks.append(("contact transition", None, f"onset {trace.contact_onset:.6f} s, {detail}"))
    return checks


def cmd_verify(args) -> int:
    trace_path = Path(args.trace)
    cfg_path = Path(args.config) if args.config else trace_path.parent / CONFIG_FILE
    cfg = load_config(cfg_path)
    try:
        trace = SimTrace.from_csv(trace_path)
    except (OSError, ValueError, StopIteration) as exc:
        raise ConfigError(f"cannot read trace: {exc}", source=str(trace_path)) from None
    if trace.n_virtual != cfg.controller.n_virtual:
        raise ConfigError("trace does not match the controller in the config",
                          source=str(trace_path))
    trace.normal = cfg.normal
    failed = 0
    for name, ok, detail in verify_trace(trace, cfg):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        failed += ok is False
        print(f"{status:4}  {name}{': ' + detail if detail else ''}")
    return EXIT_VERIFY if failed else EXIT_OK


# -- entry -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="preimpact",
                                     description="Preemptive impact reduction simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one scenario and write trace and report")
    p.add_argument("--config", required=True, help="scenario TOML file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--baseline", action=argparse.BooleanOptionalAction, default=True,
                   help="also run a baseline for the reduction effect (default on)")
    p.add_argument("--baseline-config", help="baseline TOML (default: same config with G_p = 0)")
    p.add_argument("--require-contact", action="store_true",
                   help="exit 4 if the run makes no contact")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a parameter grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2,...", default=[])
    p.add_argument("--grid-file", help="TOML file with a [grid] table of arrays")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--baseline", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("design", help="omega_a range for given contact impedance gains")
    p.add_argument("--M", type=float, required=True)
    p.add_argument("--D", type=float)
    p.add_argument("--K", type=float)
    p.add_argument("--omega", type=float)
    p.add_argument("--zeta", type=float)
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("verify", help="check a trace against the analysis oracles")
    p.add_argument("--trace", required=True)
    p.add_argument("--config", help="config TOML (default: config.toml next to the trace)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrationFault as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NoContact as exc:
        print(f"no contact: {exc}", file=sys.stderr)
        return EXIT_NO_CONTACT


if __name__ == "__main__":
    sys.exit(main())
