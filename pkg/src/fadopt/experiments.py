"""Convergence sweeps, ratio maps and cluster minimization batches.

Sweeps run every initial condition of a grid cell as one batched
integration; cells are independent, so they can be farmed out to worker
processes without changing results. Cluster runs draw all randomness from a
per-run seed ``base_seed + run_index``.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import Coupling, DynamicsParams, ExtendedState
from .integrators import (RNG_ALGORITHM, SchemeConfig, Stepper, StoppingRule, integrate,
                          make_rng, run_batch)
from .potentials import CLUSTERS, get_objective, lattice_positions, load_reference

log = logging.getLogger(__name__)

METHODS = ("ldhd", "ldhd-adbda", "kfad", "ffad", "mcfad", "adam")
STATUS_NAMES = ("converged", "max-iter", "diverged")


def make_method(method, dt, gamma=1.0, alpha=1.0, mu=1.0, lambda1=None, lambda2=None,
                adam_eps=1e-8, mts_substeps=16):
    """SchemeConfig for a method name.

    ``ffad`` uses the raw outer product ``F F^T``; ``mcfad`` the normalized
    mixture ``lambda1 I + lambda2 P`` (defaults 0.5, 0.5).
    """
    params = DynamicsParams(gamma, alpha, mu)
    if method in ("ldhd", "ldhd-adbda"):
        scheme = "ldhd-badab" if method == "ldhd" else "ldhd-adbda"
        return SchemeConfig(scheme, dt, params)
    if method == "kfad":
        coupling = Coupling.identity()
    elif method == "ffad":
        coupling = Coupling.force_outer()
    elif method == "mcfad":
        coupling = Coupling.mixture(0.5 if lambda1 is None else lambda1,
                                    0.5 if lambda2 is None else lambda2)
    elif method == "adam":
        return SchemeConfig("adam-ode", dt, params, adam_eps=adam_eps)
    else:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    return SchemeConfig("fad-dabcbad", dt, params, coupling, mts_substeps=mts_substeps)


def initial_state(x0, cfg):
    """Rest state ``p = 0`` with ``xi = 0`` (a zero zeta vector for ODE-Adam)."""
    x0 = np.array(x0, dtype=float)
    if cfg.scheme == "adam-ode":
        return ExtendedState(x0, np.zeros_like(x0), np.zeros_like(x0))
    return ExtendedState.at_rest(x0)


@dataclass(frozen=True)
class RunRecord:
    seed: int | None
    ic: list
    params: dict
    iterations: int
    status: str
    final_f: float
    final_grad_norm: float
    wall_steps_per_second: float

    def to_dict(self):
        return asdict(self)


def record_from_trace(trace, cfg, obj, ic, wall, seed=None):
    f, g = obj(trace.final.x) if trace.status != "diverged" else (np.nan, np.full(obj.dim, np.nan))
    status = {"max-steps": "max-iter"}.get(trace.status, trace.status)
    rate = trace.n_steps / wall if wall > 0 else float("inf")
    return RunRecord(seed, [float(v) for v in np.ravel(ic)], cfg.metadata(), trace.n_steps,
                     status, float(f), float(np.linalg.norm(g)), float(rate))


def run_to_convergence(cfg, obj, ic, tol=1e-4, max_iter=10_000, rule="distance",
                       record=False):
    """Integrate from ``(ic, 0, 0)`` until ``|x - x*| <= tol`` or the budget runs out.

    Returns ``(RunRecord, Trace)``; the trace is empty unless ``record``.
    """
    s0 = initial_state(ic, cfg)
    t0 = time.perf_counter()
    tr = integrate(s0, obj, cfg, StoppingRule(rule, tol), max_iter, record=record)
    return record_from_trace(tr, cfg, obj, ic, time.perf_counter() - t0), tr


# -- sweeps ----------------------------------------------------------------

PLANES = {"gamma-dt": ("gamma", "dt"), "mu-alpha": ("mu", "alpha")}


def ic_grid(x_range=(-2.0, 2.0), y_range=(-1.0, 3.0), n=40):
    """``n x n`` initial positions spanning the two ranges (endpoints included)."""
    X, Y = np.meshgrid(np.linspace(*x_range, n), np.linspace(*y_range, n), indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], axis=1)


@dataclass(frozen=True)
class SweepSpec:
    """A two-parameter grid of batched convergence runs.

    ``plane='gamma-dt'`` varies friction and step (``alpha``, ``mu`` from
    ``fixed``); ``plane='mu-alpha'`` varies the coupling mass and auxiliary
    friction (``gamma``, ``dt`` from ``fixed``).
    """

    plane: str
    axis1: tuple
    axis2: tuple
    method: str = "kfad"
    potential: str = "rosenbrock"
    fixed: dict = field(default_factory=lambda: {"gamma": 1.0, "dt": 0.01, "alpha": 1.0, "mu": 1.0})
    ics: tuple = ((1.0, 2.0),)
    tol: float = 1e-4
    max_iter: int = 1500
    log_axes: tuple = ()
    lambda1: float | None = None
    lambda2: float | None = None
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.plane not in PLANES:
            raise ValueError(f"unknown plane {self.plane!r}")
        for name in ("axis1", "axis2"):
            g = np.asarray(getattr(self, name), dtype=float)
            if g.size == 0:
                raise ValueError(f"{name} grid is empty")
            if np.any(np.diff(g) <= 0):
                raise ValueError(f"{name} grid must be strictly increasing")
            object.__setattr__(self, name, tuple(float(v) for v in g))
        ics = np.atleast_2d(np.asarray(self.ics, dtype=float))
        object.__setattr__(self, "ics", tuple(map(tuple, ics.tolist())))
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")

    def cell_config(self, v1, v2):
        kw = {k: self.fixed[k] for k in ("gamma", "dt", "alpha", "mu") if k in self.fixed}
        a, b = PLANES[self.plane]
        kw[a], kw[b] = v1, v2
        dt = kw.pop("dt", 0.01)
        return make_method(self.method, dt, lambda1=self.lambda1, lambda2=self.lambda2,
                           adam_eps=self.adam_eps, **kw)

    def metadata(self):
        d = asdict(self)
        d["ics"] = f"{len(self.ics)} initial conditions"
        d["axis_names"] = PLANES[self.plane]
        return d


@dataclass
class SweepResult:
    spec: SweepSpec
    mean_iters: np.ndarray
    converged_frac: np.ndarray
    diverged_frac: np.ndarray

    @property
    def n_ics(self):
        return len(self.spec.ics)

    def fraction_fast(self):
        """Share of cells whose mean iteration count is below the cap."""
        return float(np.mean(self.mean_iters < self.spec.max_iter))

    def rows(self):
        out = []
        for i, a in enumerate(self.spec.axis1):
            for j, b in enumerate(self.spec.axis2):
                out.append((a, b, float(self.mean_iters[i, j]), float(self.converged_frac[i, j]),
                            self.n_ics))
        return out


def _run_cell(args):
    spec, i, j = args
    obj = get_objective(spec.potential)
    cfg = spec.cell_config(spec.axis1[i], spec.axis2[j])
    iters, status = run_batch(np.asarray(spec.ics), obj, cfg, spec.tol, spec.max_iter)
    return i, j, float(iters.mean()), float(np.mean(status == 0)), float(np.mean(status == 2))


def resolve_jobs(jobs=None):
    if jobs is None:
        jobs = int(os.environ.get("FADOPT_JOBS", "1"))
    return max(1, int(jobs))


def _map(fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, tasks))


def sweep(spec, jobs=None):
    """Mean iterations and convergence fraction for every grid cell.

    Unconverged and diverged ICs count as ``max_iter`` in the mean.
    """
    n1, n2 = len(spec.axis1), len(spec.axis2)
    mean = np.empty((n1, n2))
    conv = np.empty((n1, n2))
    div = np.empty((n1, n2))
    tasks = [(spec, i, j) for i in range(n1) for j in range(n2)]
    for i, j, m, c, d in _map(_run_cell, tasks, resolve_jobs(jobs)):
        mean[i, j], conv[i, j], div[i, j] = m, c, d
    return SweepResult(spec, mean, conv, div)


def ratio_map(a, b):
    """Elementwise ``a / b``; returns ``(ratios, flagged)`` where ``b == 0`` is flagged and NaN."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"grids differ in shape: {a.shape} vs {b.shape}")
    flagged = b == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(flagged, np.nan, a / np.where(flagged, 1.0, b))
    return r, flagged


SWEEP_COLUMNS = ("axis1", "axis2", "mean_iters", "converged_frac", "n_ics")


def write_sweep_csv(result, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for a, b, m, c, n in result.rows():
            w.writerow([repr(a), repr(b), repr(m), repr(c), n])


# -- cluster experiments ---------------------------------------------------

@dataclass(frozen=True)
class InitProtocol:
    """Langevin equilibration before optimization.

    ``langevin-from-min`` starts from the reference structure,
    ``lattice-then-langevin`` from the ``lattice_n``-cube lattice. Initial
    momenta are drawn from the Maxwell distribution at ``beta_inv``.
    """

    kind: str = "langevin-from-min"
    steps: int = 400
    dt: float = 0.001
    beta_inv: float = 2.0
    gamma: float = 1.0
    lattice_n: int = 4

    def __post_init__(self):
        if self.kind not in ("langevin-from-min", "lattice-then-langevin"):
            raise ValueError(f"unknown init protocol {self.kind!r}")
        if self.steps < 0 or not self.dt > 0 or self.beta_inv < 0:
            raise ValueError("invalid Langevin settings")


DEFAULT_INIT = {
    "lj38": InitProtocol("langevin-from-min", 400, 0.001, 2.0, 1.0),
    "lj75": InitProtocol("langevin-from-min", 400, 0.001, 2.0, 20.0),
    "morse64": InitProtocol("lattice-then-langevin", 1000, 0.001, 10.0, 1.0, 4),
}


@dataclass(frozen=True)
class ClusterExperimentSpec:
    system: str
    optimizer: SchemeConfig
    opt_steps: int = 2000
    n_runs: int = 1
    base_seed: int = 0
    momenta: str = "thermalized"
    init: InitProtocol | None = None
    success_threshold: float = 0.01
    reference_path: str | None = None
    record_stride: int = 10

    def __post_init__(self):
        if self.system not in CLUSTERS:
            raise ValueError(f"unknown system {self.system!r}")
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if self.opt_steps < 0:
            raise ValueError("opt_steps must be >= 0")
        if self.momenta not in ("thermalized", "zeroed"):
            raise ValueError(f"unknown momentum policy {self.momenta!r}")
        if not 0 < self.success_threshold <= 0.1:
            raise ValueError("success_threshold must lie in (0, 0.1]")
        if self.init is None:
            object.__setattr__(self, "init", DEFAULT_INIT[self.system])

    def objective(self):
        spec = CLUSTERS[self.system]
        if self.init.kind == "langevin-from-min":
            return spec.objective(reference=load_reference(self.system, self.reference_path))
        return spec.objective()

    def metadata(self):
        return {
            "system": self.system, "optimizer": self.optimizer.metadata(),
            "opt_steps": self.opt_steps, "n_runs": self.n_runs, "base_seed": self.base_seed,
            "momenta": self.momenta, "init": asdict(self.init),
            "success_threshold": self.success_threshold,
            "reference_min_energy": CLUSTERS[self.system].reference_min_energy,
            "reference_path": self.reference_path, "rng": RNG_ALGORITHM,
        }


def init_cluster(spec, run_index, obj=None):
    """Equilibrated starting state for run ``run_index`` (seed ``base_seed + run_index``)."""
    obj = obj or spec.objective()
    ip = spec.init
    if ip.kind == "langevin-from-min":
        x = np.array(obj.minimizer, dtype=float)
    else:
        x = lattice_positions(ip.lattice_n)
        if x.size != obj.dim:
            raise ValueError(f"lattice of {ip.lattice_n}^3 atoms does not match {obj.name}")
    rng = make_rng(spec.base_seed + run_index)
    p = np.sqrt(ip.beta_inv) * rng.standard_normal(x.shape)
    s = ExtendedState(x, p, 0.0)
    cfg = SchemeConfig("baoab", ip.dt, DynamicsParams(gamma=ip.gamma), beta_inv=ip.beta_inv,
                       seed=spec.base_seed + run_index)
    st = Stepper(obj, cfg, rng=rng)
    for _ in range(ip.steps):
        s = st.step(s)
    p = s.p if spec.momenta == "thermalized" else np.zeros_like(s.p)
    xi = np.zeros_like(s.x) if spec.optimizer.scheme == "adam-ode" else 0.0
    return ExtendedState(s.x, p, xi)


@dataclass(frozen=True)
class ClusterRun:
    run: int
    seed: int
    init_energy: float
    final_energy: float
    min_energy: float
    success: bool
    record: RunRecord
    final_x: np.ndarray = field(repr=False, default=None)


def is_success(energy, reference, threshold):
    return bool(np.isfinite(energy) and abs(energy - reference) <= threshold * abs(reference))


def cluster_run(spec, run_index, obj=None):
    """Optimize one equilibrated start for the full step budget."""
    obj = obj or spec.objective()
    s0 = init_cluster(spec, run_index, obj)
    t0 = time.perf_counter()
    tr = integrate(s0, obj, spec.optimizer, None, spec.opt_steps, stride=spec.record_stride)
    wall = time.perf_counter() - t0
    rec = record_from_trace(tr, spec.optimizer, obj, [], wall, seed=spec.base_seed + run_index)
    e0 = tr.f[0]
    ef = rec.final_f
    emin = float(np.nanmin(tr.f + [ef]))
    ok = is_success(ef, CLUSTERS[spec.system].reference_min_energy, spec.success_threshold)
    return ClusterRun(run_index, spec.base_seed + run_index, e0, ef, emin, ok, rec, tr.final.x)


def _cluster_task(args):
    spec, k = args
    return cluster_run(spec, k)


@dataclass
class ClusterBatchResult:
    spec: ClusterExperimentSpec
    runs: list

    @property
    def final_energies(self):
        return np.sort([r.final_energy for r in self.runs])

    @property
    def success_fraction(self):
        return float(np.mean([r.success for r in self.runs]))

    @property
    def median_final_energy(self):
        return float(np.median([r.final_energy for r in self.runs]))


def cluster_batch(spec, jobs=None):
    """All ``n_runs`` seeded runs; results keep run order whatever the worker count."""
    spec.objective()  # fail early on a missing fixture
    runs = _map(_cluster_task, [(spec, k) for k in range(spec.n_runs)], resolve_jobs(jobs))
    return ClusterBatchResult(spec, sorted(runs, key=lambda r: r.run))


CLUSTER_COLUMNS = ("run", "seed", "init_energy", "final_energy", "min_energy", "success")


def write_cluster_csv(result, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CLUSTER_COLUMNS)
        for r in result.runs:
            w.writerow([r.run, r.seed, repr(r.init_energy), repr(r.final_energy),
                        repr(r.min_energy), int(r.success)])


def write_metadata(path, meta):
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
