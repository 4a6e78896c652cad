"""Command-line entry point: ``fadopt {run,sweep,cluster,check}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical
divergence. Every command that writes files leaves one ``metadata.json`` in
the output directory; passing that file back through ``--config`` replays
the same run.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import (check_monotone, fit_trace_rate, ldhd_limit_deviation,
                          measure_order)
from .dynamics import Coupling, DynamicsParams, ExtendedState
from .experiments import (METHODS, ClusterExperimentSpec, InitProtocol, DEFAULT_INIT,
                          SweepSpec, cluster_batch, ic_grid, initial_state, make_method, record_from_trace,
                          resolve_jobs, sweep, write_cluster_csv, write_metadata,
                          write_sweep_csv)
from .integrators import (RNG_ALGORITHM, SchemeConfig, StoppingRule, cdba_half,
                          cprime_invariant, integrate, step_Cprime_mts)
from .potentials import (CLUSTERS, fd_gradient_check, get_objective, lattice_positions,
                         write_xyz)

log = logging.getLogger("fadopt")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2
EXIT_CHECK_FAILED = 1
POTENTIALS = ("harmonic", "rosenbrock", "lj38", "lj75", "morse64")
SUITES = ("grad", "order", "lyapunov", "limit", "invariant")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _common(p):
    p.add_argument("--config", help="INI file (section named after the command) or a metadata.json")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _dynamics(p, method=True):
    if method:
        p.add_argument("--method", choices=METHODS, default="kfad")
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--adam-eps", type=float, default=1e-8)
    p.add_argument("--mts-substeps", type=int, default=16)


def build_parser():
    ap = _Parser(prog="fadopt", description="Friction-adaptive descent optimizers and benchmarks.")
    ap.add_argument("--version", action="version", version=f"fadopt {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="integrate one trajectory and write its trace")
    _common(p)
    p.add_argument("--potential", choices=POTENTIALS, required=True)
    _dynamics(p)
    p.add_argument("--x0", type=floats, help="initial position (default (1,2) or the cluster start)")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-steps", type=int, default=10_000)
    p.add_argument("--stride", type=int)

    p = sub.add_parser("sweep", help="mean iteration counts over a parameter grid")
    _common(p)
    p.add_argument("--plane", choices=("gamma-dt", "mu-alpha"), default="gamma-dt")
    p.add_argument("--axis1", type=floats, required=True,
                   help="grid values, or lo,hi,n with --axis1-range")
    p.add_argument("--axis2", type=floats, required=True)
    p.add_argument("--axis1-range", action="store_true", help="read --axis1 as lo,hi,n")
    p.add_argument("--axis2-range", action="store_true", help="read --axis2 as lo,hi,n")
    p.add_argument("--log-axis", type=int, action="append", choices=(1, 2), default=None,
                   help="space that axis logarithmically (repeatable)")
    p.add_argument("--potential", choices=("harmonic", "rosenbrock"), default="rosenbrock")
    _dynamics(p)
    p.add_argument("--ic", type=floats, help="single initial position instead of a grid")
    p.add_argument("--ic-grid", type=int, default=40, help="points per axis of the IC grid")
    p.add_argument("--x-range", type=floats, default=[-2.0, 2.0])
    p.add_argument("--y-range", type=floats, default=[-1.0, 3.0])
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-iter", type=int, default=1500)
    p.add_argument("--jobs", type=int)

    p = sub.add_parser("cluster", help="seeded cluster minimization runs")
    _common(p)
    p.add_argument("--system", choices=tuple(CLUSTERS), required=True)
    _dynamics(p)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--momenta", choices=("thermalized", "zeroed"))
    p.add_argument("--threshold", type=float, default=0.01)
    p.add_argument("--reference", help="XYZ file with the reference minimum")
    p.add_argument("--init-steps", type=int)
    p.add_argument("--init-dt", type=float)
    p.add_argument("--beta-inv", type=float)
    p.add_argument("--langevin-gamma", type=float)
    p.add_argument("--dump-xyz", action="store_true", help="write each final structure")
    p.add_argument("--jobs", type=int)

    p = sub.add_parser("check", help="run verification suites")
    _common(p)
    p.add_argument("suites", nargs="*", choices=SUITES + ("all",), default=["all"])
    return ap


# -- configuration files ------------------------------------------------------

def _subparser(ap, name):
    for a in ap._actions:
        if isinstance(a, argparse._SubParsersAction):
            return a.choices[name]
    raise KeyError(name)


def load_config(path, command):
    """Key/value pairs for ``command`` from an INI section or a metadata echo."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    if path.suffix == ".json":
        meta = json.loads(path.read_text())
        if meta.get("command") != command:
            raise UsageError(f"{path} was written by '{meta.get('command')}', not '{command}'")
        return dict(meta.get("config", {}))
    cp = configparser.ConfigParser()
    cp.read(path)
    return dict(cp[command]) if cp.has_section(command) else {}


def _coerce(action, value):
    if value is None or not isinstance(value, str):
        return value
    if isinstance(action, argparse._StoreTrueAction):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(action, argparse._AppendAction):
        return [action.type(v) for v in value.split(",") if v.strip()]
    return action.type(value) if action.type else value


def parse_args(argv):
    """Parse twice: once to find ``--config``, then with file values as defaults."""
    ap = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and known.command in ("run", "sweep", "cluster", "check"):
        sp = _subparser(ap, known.command)
        actions = {a.dest: a for a in sp._actions}
        defaults = {}
        for key, val in load_config(known.config, known.command).items():
            dest = key.replace("-", "_")
            if dest in ("config", "out", "verbose") or dest not in actions:
                continue
            defaults[dest] = _coerce(actions[dest], val)
            actions[dest].required = False
        sp.set_defaults(**defaults)
        log.info("config %s loaded; command-line flags take precedence", known.config)
    return ap.parse_args(argv)


def _echo(args):
    return {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _metadata(command, args, **extra):
    meta = {"command": command, "version": __version__, "config": _echo(args),
            "precedence": "flags > config file > defaults", "rng": RNG_ALGORITHM}
    meta.update(extra)
    return meta


def _method_cfg(args):
    return make_method(args.method, args.dt, args.gamma, args.alpha, args.mu,
                       args.lambda1, args.lambda2, args.adam_eps, args.mts_substeps)


# -- commands ---------------------------------------------------------------

def _run_start(args, obj):
    if args.x0 is not None:
        x = np.asarray(args.x0, dtype=float)
    elif args.potential in ("harmonic", "rosenbrock"):
        x = np.array([1.0, 2.0])
    elif args.potential == "morse64":
        x = lattice_positions(4)
    else:
        x = np.array(obj.minimizer)
    if x.size != obj.dim:
        raise UsageError(f"--x0 has {x.size} components, {args.potential} needs {obj.dim}")
    return x


def cmd_run(args):
    obj = get_objective(args.potential)
    cfg = _method_cfg(args)
    x0 = _run_start(args, obj)
    # clusters have no unique minimizer location: they run the full budget
    rule = StoppingRule("distance", args.tol) if obj.minimizer is not None and obj.batched \
        else StoppingRule("none")
    t0 = time.perf_counter()
    tr = integrate(initial_state(x0, cfg), obj, cfg, rule, args.max_steps, stride=args.stride)
    rec = record_from_trace(tr, cfg, obj, x0 if x0.size <= 6 else [], time.perf_counter() - t0)
    out = _out_dir(args)
    tr.to_csv(out / "trace.csv")
    write_metadata(out / "metadata.json", _metadata(
        "run", args, scheme=cfg.metadata(), stopping_rule=rule.kind,
        uncentered=obj.min_value is None, result=rec.to_dict(),
        diverged_at=tr.diverged_at))
    print(f"{rec.status} after {rec.iterations} steps, f={rec.final_f:.10g}")
    return EXIT_DIVERGED if tr.status == "diverged" else EXIT_OK


def _grid(values, as_range, log_axis):
    if not as_range:
        return values
    if len(values) != 3:
        raise UsageError("range form needs lo,hi,n")
    lo, hi, n = values
    if int(n) < 1:
        raise UsageError("range needs n >= 1")
    if log_axis:
        return list(np.logspace(np.log10(lo), np.log10(hi), int(n)))
    return list(np.linspace(lo, hi, int(n)))


def cmd_sweep(args):
    logs = tuple(sorted(set(args.log_axis or ())))
    a1 = _grid(args.axis1, args.axis1_range, 1 in logs)
    a2 = _grid(args.axis2, args.axis2_range, 2 in logs)
    if not a1 or not a2:
        raise UsageError("sweep grids must be nonempty")
    if args.ic is not None:
        ics = [args.ic]
    else:
        ics = ic_grid(tuple(args.x_range), tuple(args.y_range), args.ic_grid)
    fixed = {"gamma": args.gamma, "dt": args.dt, "alpha": args.alpha, "mu": args.mu}
    try:
        spec = SweepSpec(args.plane, a1, a2, args.method, args.potential, fixed, ics,
                         args.tol, args.max_iter, logs, args.lambda1, args.lambda2, args.adam_eps)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    jobs = resolve_jobs(args.jobs)
    res = sweep(spec, jobs)
    out = _out_dir(args)
    write_sweep_csv(res, out / "sweep.csv")
    write_metadata(out / "metadata.json", _metadata(
        "sweep", args, spec=spec.metadata(), scheme=spec.cell_config(a1[0], a2[0]).metadata(),
        jobs=jobs, fraction_fast=res.fraction_fast(),
        diverged_cells=int(np.sum(res.diverged_frac > 0))))
    print(f"{len(a1)}x{len(a2)} cells, {len(ics)} ICs each; "
          f"{100 * res.fraction_fast():.1f}% of cells below {args.max_iter} iterations")
    return EXIT_OK


def cmd_cluster(args):
    cfg = _method_cfg(args)
    base = DEFAULT_INIT[args.system]
    init = InitProtocol(
        base.kind,
        base.steps if args.init_steps is None else args.init_steps,
        base.dt if args.init_dt is None else args.init_dt,
        base.beta_inv if args.beta_inv is None else args.beta_inv,
        base.gamma if args.langevin_gamma is None else args.langevin_gamma,
        base.lattice_n)
    momenta = args.momenta or ("zeroed" if args.system == "morse64" else "thermalized")
    try:
        spec = ClusterExperimentSpec(args.system, cfg, args.steps, args.runs, args.seed, momenta,
                                     init, args.threshold, args.reference)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    jobs = resolve_jobs(args.jobs)
    res = cluster_batch(spec, jobs)
    out = _out_dir(args)
    write_cluster_csv(res, out / "cluster.csv")
    if args.dump_xyz:
        for r in res.runs:
            write_xyz(out / f"final_{r.run:04d}.xyz", r.final_x,
                      comment=f"run={r.run} seed={r.seed} energy={r.final_energy!r}")
    diverged = [r.run for r in res.runs if r.record.status == "diverged"]
    write_metadata(out / "metadata.json", _metadata(
        "cluster", args, spec=spec.metadata(), jobs=jobs,
        success_fraction=res.success_fraction, median_final_energy=res.median_final_energy,
        sorted_final_energies=list(res.final_energies), diverged_runs=diverged))
    print(f"{args.runs} runs: success {100 * res.success_fraction:.0f}%, "
          f"median final energy {res.median_final_energy:.6f}")
    return EXIT_DIVERGED if diverged else EXIT_OK


# -- verification suites ------------------------------------------------------

def _harmonic_start(xi=0.0):
    return ExtendedState(np.array([1.0, 2.0]), np.zeros(2), xi)


def suite_grad():
    rng = np.random.default_rng(0)
    rows = []
    for name in POTENTIALS:
        obj = get_objective(name)
        if name in ("harmonic", "rosenbrock"):
            pts = rng.uniform(-2, 2, size=(100, 2))
        else:
            base = lattice_positions(4) if name == "morse64" else obj.minimizer
            pts = [base + 0.05 * rng.standard_normal(obj.dim) for _ in range(3)]
        err = max(fd_gradient_check(obj, x, 1e-6) for x in pts)
        rows.append((f"fd gradient {name}", err, "< 1e-5", err < 1e-5))
    return rows


def suite_order():
    obj = get_objective("harmonic")
    pr = DynamicsParams(1.0, 1.0, 1.0)
    rows = []
    for scheme in ("ldhd-badab", "fad-dabcbad", "fad-alt-cprime"):
        r = measure_order(SchemeConfig(scheme, 0.1, pr), obj, _harmonic_start(), 1.0,
                          [0.1, 0.05, 0.025, 0.0125])
        rows.append((f"order {scheme}", r.observed_order, "in [1.8, 2.2]",
                     1.8 <= r.observed_order <= 2.2))
    # zeta0 > 0 keeps the Adam vector field smooth at t = 0
    s0 = ExtendedState(np.array([1.0, 2.0]), np.zeros(2), np.ones(2))
    r = measure_order(SchemeConfig("adam-ode", 0.01, pr), obj, s0, 1.0, [0.01, 0.005, 0.0025])
    rows.append(("order adam-ode", r.observed_order, "in [0.8, 1.2]",
                 0.8 <= r.observed_order <= 1.2))
    return rows


def suite_lyapunov():
    rows = []
    ref = SchemeConfig("fad-alt-cprime", 1e-4, DynamicsParams(1.0, 1.0, 1.0), mts_substeps=256)
    for name, x0 in (("harmonic", (1.0, 2.0)), ("rosenbrock", (-1.0, 2.0))):
        obj = get_objective(name)
        tr = integrate(ExtendedState(np.array(x0), np.zeros(2), 0.5), obj, ref, max_steps=10_000)
        rep = check_monotone(tr, "G", tol=1e-9)
        rows.append((f"G monotone {name}", rep.max_violation, "no increase > 1e-9", rep.monotone))
    obj = get_objective("harmonic")
    kfad = SchemeConfig("fad-dabcbad", 1e-3, DynamicsParams(1.0, 1.0, 1.0))
    tr = integrate(_harmonic_start(), obj, kfad, max_steps=20_000)
    fit = fit_trace_rate(tr, "G")
    rows.append(("KFAD rate kappa", fit.kappa, "> 0", fit.kappa > 0))
    rows.append(("KFAD rate r^2", fit.r_squared, "> 0.9", fit.r_squared > 0.9))
    return rows


def suite_limit():
    devs = ldhd_limit_deviation(get_objective("harmonic"), _harmonic_start(), [1e2, 1e3, 1e4])
    d = [v for _, v in devs]
    ok = all(b < a for a, b in zip(d, d[1:]))
    return [("LDHD limit deviation decreasing", d[-1], "decreasing in alpha", ok)]


def suite_invariant():
    rng = np.random.default_rng(1)
    obj = get_objective("rosenbrock")
    worst = 0.0
    for coupling in (Coupling.identity(), Coupling.force_outer(), Coupling.mixture(0.3, 0.7)):
        cfg = SchemeConfig("fad-cdba", 0.05, DynamicsParams(1.0, 1.0, 0.7), coupling)
        for _ in range(200):
            s = ExtendedState(rng.uniform(-2, 2, 2), rng.standard_normal(2), rng.uniform(0, 3))
            wp, xt = cdba_half(s, obj, cfg)
            before = s.p @ s.p + 0.7 * s.xi ** 2
            worst = max(worst, abs(wp @ wp + 0.7 * xt ** 2 - before))
    rows = [("C' quadratic invariant (cdba)", worst, "<= 1e-12", worst <= 1e-12)]
    # the sub-stepped C' block: omega + mu xi^2 up to O((dt/n)^2)
    s = ExtendedState(np.zeros(2), np.array([1.0, 0.5]), 1.0)
    F = np.array([1.0, 0.0])
    errs = []
    for n in (16, 64):
        s1 = step_Cprime_mts(s, Coupling.identity(), F, 0.1, 1.0, n)
        errs.append(abs(cprime_invariant(s1, Coupling.identity(), F, 1.0)
                        - cprime_invariant(s, Coupling.identity(), F, 1.0)))
    rows.append(("C' mts invariant tightens with substeps", errs[-1], "decreasing",
                 errs[1] < errs[0]))
    return rows


SUITE_FNS = {"grad": suite_grad, "order": suite_order, "lyapunov": suite_lyapunov,
             "limit": suite_limit, "invariant": suite_invariant}


def cmd_check(args):
    names = SUITES if "all" in args.suites else tuple(dict.fromkeys(args.suites))
    report = {}
    ok = True
    for name in names:
        rows = SUITE_FNS[name]()
        report[name] = [{"check": c, "value": float(v), "criterion": crit, "passed": bool(p)}
                        for c, v, crit, p in rows]
        for c, v, crit, p in rows:
            print(f"{'PASS' if p else 'FAIL'}  {c:<42} {float(v):<14.6g} {crit}")
            ok &= bool(p)
    out = _out_dir(args)
    write_metadata(out / "metadata.json", _metadata("check", args, report=report, passed=ok))
    return EXIT_OK if ok else EXIT_CHECK_FAILED


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "cluster": cmd_cluster, "check": cmd_check}


def main(argv=None):
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"fadopt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"fadopt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help and --version
        return exc.code if isinstance(exc.code, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
