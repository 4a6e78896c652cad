"""Runtime checks on trajectories: Lyapunov monotonicity, rates, order, LDHD limit."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from .dynamics import Coupling, DynamicsParams, ExtendedState, dot
from .integrators import SchemeConfig, Stepper

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MonotonicityReport:
    n_violations: int
    max_violation: float
    first_violation_step: int | None = None

    @property
    def monotone(self):
        return self.n_violations == 0

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class RateFit:
    kappa: float
    r_squared: float
    window: tuple
    intercept: float = 0.0

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class OrderStudy:
    dts: list
    errors: list
    observed_order: float

    def to_dict(self):
        return asdict(self)


def functional_values(trace, functional="G", obj=None, mu=None, eps=0.0):
    """Values of ``H-tilde``, ``G`` or ``W`` (the eps-tilted G) along a trace."""
    if functional in ("H-tilde", "G", "f"):
        return trace.functional(functional)
    if functional == "W":
        if obj is None or obj.minimizer is None or mu is None:
            raise ValueError("W needs an objective with a known minimizer and mu")
        X = np.asarray(trace.x)
        P = np.asarray(trace.p)
        dx = X - obj.minimizer
        G = trace.functional("G")
        return G + eps * dot(dx, P) + eps * dot(dx, dx)
    raise ValueError(f"unknown functional {functional!r}")


def monotonicity(values, steps=None, tol=0.0):
    v = np.asarray(values, dtype=float)
    inc = np.diff(v)
    bad = np.flatnonzero(inc > tol)
    first = None
    if bad.size:
        first = int(bad[0] + 1 if steps is None else steps[bad[0] + 1])
    return MonotonicityReport(int(bad.size), float(max(inc.max(initial=0.0), 0.0)), first)


def check_monotone(trace, functional="G", tol=0.0, obj=None, mu=None, eps=0.0):
    """Count increments of a Lyapunov functional that exceed ``tol``."""
    if trace.stride != 1:
        raise ValueError("check_monotone needs a stride-1 trace")
    vals = functional_values(trace, functional, obj, mu, eps)
    return monotonicity(vals, trace.steps, tol)


def is_equilibrium(s, obj, tol=1e-8):
    g = obj.grad(s.x)
    return bool(np.linalg.norm(s.p) <= tol and np.linalg.norm(g) <= tol
                and np.all(np.abs(np.asarray(s.xi)) <= tol))


def fit_rate(times, values, window=None):
    """Least-squares fit of ``log(values) ~ c - kappa t``.

    ``window`` is an index pair ``(start, stop)``; by default the last half
    of the samples, which skips the transient.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if window is None:
        window = (len(t) // 2, len(t))
    a, b = window
    if b - a < 2:
        raise ValueError("fit window needs at least two samples")
    t, v = t[a:b], v[a:b]
    if np.any(v <= 0):
        raise ValueError("values must be positive on the fit window")
    y = np.log(v)
    X = np.stack([np.ones_like(t), t], axis=1)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - float(resid @ resid) / ss_tot)
    return RateFit(float(-coef[1]), r2, (int(a), int(b)), float(coef[0]))


def fit_trace_rate(trace, functional="G", window=None, obj=None, mu=None, eps=0.0):
    return fit_rate(trace.times, functional_values(trace, functional, obj, mu, eps), window)


def _state_vector(s):
    return np.concatenate([np.ravel(s.x), np.ravel(s.p), np.ravel(s.xi)])


def propagate(s0, obj, cfg, n_steps):
    st = Stepper(obj, cfg)
    s = s0
    for _ in range(n_steps):
        s = st.step(s)
    return s


def measure_order(cfg, obj, s0, T, dts, reference=None):
    """Global error at time ``T`` for each step in ``dts`` and the mean observed order.

    FAD schemes are compared with fad-alt-cprime at 1024 substeps and
    ``min(dts)/16``; the others with themselves at ``min(dts)/64``.
    """
    dts = [float(d) for d in dts]
    if any(b >= a for a, b in zip(dts, dts[1:])):
        raise ValueError("dts must be strictly decreasing")
    steps = [int(round(T / d)) for d in dts]
    if any(abs(n * d - T) > 1e-9 * T for n, d in zip(steps, dts)):
        raise ValueError("each dt must divide T")
    if reference is None:
        if cfg.scheme.startswith("fad"):
            rcfg = replace(cfg, scheme="fad-alt-cprime", dt=dts[-1] / 16, mts_substeps=1024)
            if not cfg.coupling.is_projector:
                rcfg = replace(rcfg, scheme=cfg.scheme, mts_substeps=cfg.mts_substeps)
        else:
            rcfg = replace(cfg, dt=dts[-1] / 64)
        reference = _state_vector(propagate(s0, obj, rcfg, int(round(T / rcfg.dt))))
    errors = []
    for d, n in zip(dts, steps):
        s = propagate(s0, obj, replace(cfg, dt=d), n)
        errors.append(float(np.linalg.norm(_state_vector(s) - reference)))
    e = np.asarray(errors)
    order = float(np.mean(np.log2(e[:-1] / e[1:]) / np.log2(np.asarray(dts[:-1]) / dts[1:])))
    return OrderStudy(dts, errors, order)


def ldhd_limit_deviation(obj, s0, alphas, mu=1.0, T=1.0, dt=1e-4, gamma=1.0, coupling=None):
    """Sup over the run of |x_FAD - x_LDHD| for each alpha.

    When ``alpha dt > 0.1`` both runs of that pair use the refined step
    ``T / ceil(alpha T / 0.1)``.
    """
    coupling = coupling or Coupling.identity()
    out = []
    for a in alphas:
        h = dt
        if a * h > 0.1:
            h = T / np.ceil(a * T / 0.1)
            log.info("alpha=%g: step refined from %g to %g", a, dt, h)
        n = int(round(T / h))
        pr = DynamicsParams(gamma, a, mu)
        fad = Stepper(obj, SchemeConfig("fad-dabcbad", h, pr, coupling))
        ldhd = Stepper(obj, SchemeConfig("ldhd-badab", h, pr))
        s1 = s2 = s0
        dev = 0.0
        for _ in range(n):
            s1 = fad.step(s1)
            s2 = ldhd.step(s2)
            dev = max(dev, float(np.linalg.norm(s1.x - s2.x)))
        out.append((float(a), dev))
    return out


# -- discrete Lyapunov function of the C'D'BA scheme ------------------------

def discrete_lyapunov_coeffs(alpha, gamma, dt, eps):
    """``(a, b, c)`` with ``a = exp(2 (alpha - gamma) dt) / 2`` and ``b = c = eps``."""
    return 0.5 * np.exp(2 * (alpha - gamma) * dt), eps, eps


def discrete_lyapunov(s, obj, mu, a, b, c):
    """``f(x) - f* + |p|^2/2 + a mu xi^2 + b |x - x*|^2 + c (x - x*).p``."""
    xs = obj.minimizer if obj.minimizer is not None else 0.0
    fref = obj.min_value or 0.0
    dx = s.x - xs
    return (obj.value(s.x) - fref + 0.5 * dot(s.p, s.p) + a * mu * np.asarray(s.xi) ** 2
            + b * dot(dx, dx) + c * dot(dx, s.p))


def discrete_lyapunov_series(s0, obj, cfg, n_steps, eps=1e-3):
    a, b, c = discrete_lyapunov_coeffs(cfg.params.alpha, cfg.params.gamma, cfg.dt, eps)
    st = Stepper(obj, cfg)
    s = s0
    vals = [float(discrete_lyapunov(s, obj, cfg.params.mu, a, b, c))]
    for _ in range(n_steps):
        s = st.step(s)
        vals.append(float(discrete_lyapunov(s, obj, cfg.params.mu, a, b, c)))
    return np.asarray(vals)


def equilibrium_state(obj):
    if obj.minimizer is None:
        raise ValueError(f"{obj.name} has no stored minimizer")
    x = np.array(obj.minimizer, dtype=float)
    return ExtendedState(x, np.zeros_like(x), 0.0)


MTS_TOLERANCE = 1e-8


def mts_sensitivity(obj, s0, cfg, n_steps=100):
    """Max change of the final state when ``mts_substeps`` is doubled.

    Logs a warning when the change reaches ``MTS_TOLERANCE``.
    """
    if cfg.scheme != "fad-alt-cprime":
        raise ValueError("mts_sensitivity applies to fad-alt-cprime only")
    a = _state_vector(propagate(s0, obj, cfg, n_steps))
    b = _state_vector(propagate(s0, obj, replace(cfg, mts_substeps=2 * cfg.mts_substeps), n_steps))
    diff = float(np.max(np.abs(a - b)))
    if diff >= MTS_TOLERANCE:
        log.warning("doubling mts_substeps from %d moved the final state by %.2e",
                    cfg.mts_substeps, diff)
    return diff
