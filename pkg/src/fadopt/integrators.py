"""Splitting integrators for LDHD, FAD, ODE-Adam and the BAOAB initializer.

Letters follow the usual convention: A drift, B kick, D linear damping,
C the adaptive-friction block (p' = -xi A p, xi' = p.Ap/mu - alpha xi),
C' the same block without the -alpha xi term (moved into D').

Every sub-step is a pure function of an :class:`ExtendedState`. The
composite steps take an optional :class:`ForceCache`; passing the same cache
across consecutive steps lets schemes reuse the force at an unchanged
position, which is how BADAB reaches one gradient evaluation per step.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dynamics import (Coupling, DynamicsParams, ExtendedState, dot,
                       extended_hamiltonian, lyapunov_G)

log = logging.getLogger(__name__)

SCHEMES = ("ldhd-badab", "ldhd-adbda", "fad-dabcbad", "fad-alt-cprime", "fad-cdba", "adam-ode", "baoab")
ADAM_ORDER = "CDBA"
RNG_ALGORITHM = "numpy.Philox4x64-10/ziggurat-normal"


class UnsupportedSchemeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


def _col(s):
    """Lift a scalar-per-state array so it broadcasts against ``(..., d)``."""
    return np.asarray(s, dtype=float)[..., None]


def _expm1_over(a, dt):
    """``(1 - exp(-a dt)) / a`` with its ``a -> 0`` limit ``dt``."""
    if a == 0:
        return dt
    return -np.expm1(-a * dt) / a


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str = "fad-dabcbad"
    dt: float = 0.01
    params: DynamicsParams = field(default_factory=DynamicsParams)
    coupling: Coupling = field(default_factory=Coupling.identity)
    mts_substeps: int = 16
    adam_eps: float = 1e-8
    beta_inv: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise UnsupportedSchemeError(f"unknown scheme {self.scheme!r}")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.mts_substeps < 1:
            raise ValueError("mts_substeps must be >= 1")
        if not self.adam_eps > 0:
            raise ValueError("adam_eps must be > 0")
        if self.beta_inv < 0:
            raise ValueError("beta_inv must be >= 0")

    def metadata(self):
        c = self.coupling
        meta = {
            "scheme": self.scheme, "dt": self.dt,
            "gamma": self.params.gamma, "alpha": self.params.alpha, "mu": self.params.mu,
            "coupling": {"kind": c.kind, "lambda1": c.lambda1, "lambda2": c.lambda2,
                         "normalized": c.normalized},
            "mts_substeps": self.mts_substeps,
        }
        if self.scheme == "adam-ode":
            meta.update(adam_eps=self.adam_eps, adam_order=ADAM_ORDER)
        if self.scheme == "baoab":
            meta.update(beta_inv=self.beta_inv, seed=self.seed, rng=RNG_ALGORITHM)
        return meta


class ForceCache:
    """Memoizes ``F(x) = -grad f(x)`` for the most recent position array.

    Positions are never mutated in place, so object identity is a valid key.
    """

    def __init__(self, obj):
        self.obj = obj
        self.n_evals = 0
        self._x = None
        self._f = None
        self._F = None

    def _update(self, x):
        if x is not self._x:
            f, g = self.obj(x)
            self._f, self._F, self._x = f, -g, x
            self.n_evals += 1

    def __call__(self, x):
        self._update(x)
        return self._F

    def value(self, x):
        self._update(x)
        return self._f


# -- exactly solvable pieces -----------------------------------------------

def step_A(s, dt):
    return s.replace(x=s.x + dt * s.p)


def step_B(s, F, dt):
    return s.replace(p=s.p + dt * F)


def step_D(s, gamma, dt, also_xi=False, alpha=0.0):
    out = s.replace(p=np.exp(-gamma * dt) * s.p)
    if also_xi:
        out = out.replace(xi=np.exp(-alpha * dt) * np.asarray(s.xi, dtype=float))
    return out


def exp_coupling(coupling, F, t, v):
    """``exp(-t A) v`` for the built-in couplings via Rodrigues' formula.

    ``t`` may carry batch shape. With ``A = l1 I + l2 u u^T`` and |u| = 1,
    ``exp(-t A) = exp(-t l1) (I + (exp(-t l2) - 1) u u^T)``.
    """
    t = np.asarray(t, dtype=float)
    if coupling.kind == "identity":
        return np.exp(-t)[..., None] * v
    l1, l2, u = coupling.split(F)
    w = v + (np.expm1(-t * l2) * dot(u, v))[..., None] * u
    return np.exp(-t * l1)[..., None] * w


def step_C_leapfrog(s, coupling, F, dt, alpha, mu):
    """Half p-update, exact xi relaxation with frozen p.Ap, half p-update."""
    if coupling.kind == "custom":
        raise UnsupportedSchemeError("custom couplings need step_C_implicit")
    p_half = exp_coupling(coupling, F, 0.5 * dt * np.asarray(s.xi, float), s.p)
    q = coupling.quad(s.x, F, p_half)
    xi = np.exp(-alpha * dt) * np.asarray(s.xi, float) + _expm1_over(alpha, dt) * q / mu
    p = exp_coupling(coupling, F, 0.5 * dt * xi, p_half)
    return s.replace(p=p, xi=xi)


def step_C_implicit(s, A, dt, alpha, mu):
    """Linearly implicit C step for a dense symmetric PSD matrix ``A`` (single state)."""
    A = np.asarray(A, dtype=float)
    xi0 = float(s.xi)
    M = np.eye(len(s.p)) + 0.5 * dt * xi0 * A
    try:
        p_half = scipy.linalg.solve(M, s.p, assume_a="sym")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise NumericalError(f"C-step solve failed (cond={np.linalg.cond(M):.3e})") from exc
    Ap = A @ p_half
    xi = np.exp(-alpha * dt) * xi0 + _expm1_over(alpha, dt) * float(p_half @ Ap) / mu
    return s.replace(p=p_half - 0.5 * dt * xi * Ap, xi=xi)


# Yoshida triple-jump weights: three Strang substeps give fourth order
_YOSHIDA_W1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_YOSHIDA_W0 = 1.0 - 2.0 * _YOSHIDA_W1
# the negative middle weight keeps xi nondecreasing only while h k is small
YOSHIDA_MAX_HK = 0.5


def step_Cprime_mts(s, coupling, F, dt, mu, n_sub):
    """C' block for projector couplings, with (omega, xi) sub-stepped.

    ``omega = p.Ap`` and ``xi`` obey ``omega' = -2 omega xi``,
    ``xi' = omega / mu``. Each substep of size ``h = dt / n_sub`` is built
    from Strang pieces omega-half / xi-full / omega-half, with
    ``eta' = -xi`` riding along in the omega parts; finally
    ``p <- exp(eta A) p``. When ``h k <= 0.5``, where ``k^2 = (omega +
    mu xi^2) / mu`` sets the subsystem's time scale, three Strang pieces
    are composed into a symmetric fourth-order substep; otherwise a single
    Strang piece is used, which can only increase xi.
    """
    if not coupling.is_projector:
        raise UnsupportedSchemeError(
            "C' sub-stepping needs A = I or a normalized projector; use step_C_implicit")
    h = dt / n_sub
    omega = coupling.quad(s.x, F, s.p)
    xi = np.array(s.xi, dtype=float)
    hk = h * np.sqrt((omega + mu * xi * xi) / mu)
    if xi.ndim == 0:
        # single state: plain floats are much cheaper than 0-d arrays here
        omega, xi, eta = float(omega), float(xi), 0.0
        exp = math.exp
        if hk <= YOSHIDA_MAX_HK:
            weights = (_YOSHIDA_W1 * h, _YOSHIDA_W0 * h, _YOSHIDA_W1 * h)
        else:
            weights = (h,)
    else:
        eta = np.zeros_like(xi)
        exp = np.exp
        fine = hk <= YOSHIDA_MAX_HK
        weights = (np.where(fine, _YOSHIDA_W1 * h, h), np.where(fine, _YOSHIDA_W0 * h, 0.0),
                   np.where(fine, _YOSHIDA_W1 * h, 0.0))
    for _ in range(n_sub):
        for w in weights:
            omega = omega * exp(-w * xi)
            eta = eta - 0.5 * w * xi
            xi = xi + w * omega / mu
            omega = omega * exp(-w * xi)
            eta = eta - 0.5 * w * xi
    return s.replace(p=exp_coupling(coupling, F, -eta, s.p), xi=xi)


def cprime_invariant(s, coupling, F, mu):
    """``p.Ap + mu xi^2``, conserved by the exact C' flow."""
    return coupling.quad(s.x, F, s.p) + mu * np.asarray(s.xi, float) ** 2


# -- composite schemes -----------------------------------------------------

def _cache(obj, cache):
    return cache if cache is not None else ForceCache(obj)


def ldhd_step(s, obj, cfg, cache=None):
    """BADAB: B(h/2) A(h/2) D(h) A(h/2) B(h/2)."""
    force = _cache(obj, cache)
    h = cfg.dt
    s = step_B(s, force(s.x), 0.5 * h)
    s = step_A(s, 0.5 * h)
    s = step_D(s, cfg.params.gamma, h)
    s = step_A(s, 0.5 * h)
    return step_B(s, force(s.x), 0.5 * h)


def ldhd_adbda_step(s, obj, cfg, cache=None):
    """ADBDA: A(h/2) D(h/2) B(h) D(h/2) A(h/2), drift on the outside."""
    force = _cache(obj, cache)
    h, g = cfg.dt, cfg.params.gamma
    s = step_A(s, 0.5 * h)
    s = step_D(s, g, 0.5 * h)
    s = step_B(s, force(s.x), h)
    s = step_D(s, g, 0.5 * h)
    return step_A(s, 0.5 * h)


def _c_step(s, F, cfg):
    c, pr = cfg.coupling, cfg.params
    if c.kind == "custom":
        return step_C_implicit(s, c.matrix(s.x, F), cfg.dt, pr.alpha, pr.mu)
    return step_C_leapfrog(s, c, F, cfg.dt, pr.alpha, pr.mu)


def fad_step(s, obj, cfg, cache=None):
    """DABCBAD with half steps on every letter except C."""
    force = _cache(obj, cache)
    h, g = cfg.dt, cfg.params.gamma
    s = step_D(s, g, 0.5 * h)
    s = step_A(s, 0.5 * h)
    F = force(s.x)
    s = step_B(s, F, 0.5 * h)
    s = _c_step(s, F, cfg)
    s = step_B(s, F, 0.5 * h)
    s = step_A(s, 0.5 * h)
    return step_D(s, g, 0.5 * h)


def fad_alt_step(s, obj, cfg, cache=None):
    """D'ABC'BAD' with the (omega, xi) block sub-stepped inside C'."""
    force = _cache(obj, cache)
    h, pr = cfg.dt, cfg.params
    s = step_D(s, pr.gamma, 0.5 * h, also_xi=True, alpha=pr.alpha)
    s = step_A(s, 0.5 * h)
    F = force(s.x)
    s = step_B(s, F, 0.5 * h)
    s = step_Cprime_mts(s, cfg.coupling, F, h, pr.mu, cfg.mts_substeps)
    s = step_B(s, F, 0.5 * h)
    s = step_A(s, 0.5 * h)
    return step_D(s, pr.gamma, 0.5 * h, also_xi=True, alpha=pr.alpha)


def _expm_apply(coupling, x, F, t, v):
    if coupling.kind == "custom":
        return scipy.linalg.expm(-float(t) * coupling.matrix(x, F)) @ v
    return exp_coupling(coupling, F, t, v)


def cdba_step(s, obj, cfg, cache=None):
    """First-order C'D'BA scheme whose C' part keeps |p|^2 + mu xi^2 fixed."""
    force = _cache(obj, cache)
    h, pr = cfg.dt, cfg.params
    F = force(s.x)
    xi = np.asarray(s.xi, dtype=float)
    wp = _expm_apply(cfg.coupling, s.x, F, xi * h, s.p)
    # p^T (I - exp(-2 A xi h)) p == |p|^2 - |wp|^2 for symmetric A
    lost = np.maximum(dot(s.p, s.p) - dot(wp, wp), 0.0)
    xi_t = np.sqrt(xi * xi + lost / pr.mu)
    p = np.exp(-pr.gamma * h) * wp + h * F
    return ExtendedState(s.x + h * p, p, np.exp(-pr.alpha * h) * xi_t)


def cdba_half(s, obj, cfg):
    """The C' half-update alone: ``(wp, xi_tilde)``."""
    F = obj.force(s.x)
    xi = np.asarray(s.xi, dtype=float)
    wp = _expm_apply(cfg.coupling, s.x, F, xi * cfg.dt, s.p)
    lost = np.maximum(dot(s.p, s.p) - dot(wp, wp), 0.0)
    return wp, np.sqrt(xi * xi + lost / cfg.params.mu)


def adam_step(s, obj, cfg, cache=None):
    """ODE-Adam, Lie composition C, D, B, A of full steps; ``s.xi`` holds zeta."""
    force = _cache(obj, cache)
    h, pr = cfg.dt, cfg.params
    F = force(s.x)
    zeta = np.exp(-pr.alpha * h) * s.xi + F * F * _expm1_over(pr.alpha, h)
    p = np.exp(-pr.gamma * h) * s.p
    p = p + h * F
    x = s.x + h * p / (np.sqrt(zeta) + cfg.adam_eps)
    return ExtendedState(x, p, zeta)


def make_rng(seed):
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def step_O(s, gamma, beta_inv, dt, rng):
    c = np.exp(-gamma * dt)
    if beta_inv == 0:
        return s.replace(p=c * s.p)
    sigma = np.sqrt(-np.expm1(-2 * gamma * dt) * beta_inv)
    return s.replace(p=c * s.p + sigma * rng.standard_normal(np.shape(s.p)))


def baoab_step(s, obj, gamma, beta_inv, dt, rng, cache=None):
    """One BAOAB Langevin step; returns ``(state, rng)``."""
    force = _cache(obj, cache)
    s = step_B(s, force(s.x), 0.5 * dt)
    s = step_A(s, 0.5 * dt)
    s = step_O(s, gamma, beta_inv, dt, rng)
    s = step_A(s, 0.5 * dt)
    return step_B(s, force(s.x), 0.5 * dt), rng


class Stepper:
    """Advances one state under ``cfg`` while sharing forces between steps."""

    def __init__(self, obj, cfg, rng=None):
        self.obj = obj
        self.cfg = cfg
        self.cache = ForceCache(obj)
        self.rng = rng if rng is not None else make_rng(cfg.seed)
        fns = {"ldhd-badab": ldhd_step, "ldhd-adbda": ldhd_adbda_step, "fad-dabcbad": fad_step,
               "fad-alt-cprime": fad_alt_step, "fad-cdba": cdba_step, "adam-ode": adam_step}
        self._fn = fns.get(cfg.scheme)

    @property
    def n_grad_evals(self):
        return self.cache.n_evals

    def step(self, s):
        if self._fn is not None:
            return self._fn(s, self.obj, self.cfg, self.cache)
        c = self.cfg
        return baoab_step(s, self.obj, c.params.gamma, c.beta_inv, c.dt, self.rng, self.cache)[0]


# -- driving loops ---------------------------------------------------------

@dataclass(frozen=True)
class StoppingRule:
    """``distance``: |x - x*| <= tol; ``gradient``: |grad f| <= tol; ``none``: run the budget."""

    kind: str = "distance"
    tol: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("distance", "gradient", "none"):
            raise ValueError(f"unknown stopping rule {self.kind!r}")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")

    def done(self, s, obj):
        if self.kind == "distance":
            if obj.minimizer is None:
                raise ValueError(f"{obj.name} has no known minimizer for the distance rule")
            d = s.x - obj.minimizer
            return np.sqrt(dot(d, d)) <= self.tol
        if self.kind == "gradient":
            g = obj.grad(s.x)
            return np.sqrt(dot(g, g)) <= self.tol
        return np.zeros(np.shape(s.x)[:-1], dtype=bool)


TRACE_COLUMNS = ("step", "time", "f", "grad_norm", "xi", "H_tilde", "G")


@dataclass
class Trace:
    dt: float
    stride: int
    steps: list = field(default_factory=list)
    x: list = field(default_factory=list)
    p: list = field(default_factory=list)
    xi: list = field(default_factory=list)
    f: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    H: list = field(default_factory=list)
    G: list = field(default_factory=list)
    status: str = "max-steps"
    n_steps: int = 0
    n_grad_evals: int = 0
    final: ExtendedState | None = None
    diverged_at: int | None = None

    @property
    def times(self):
        return np.asarray(self.steps, dtype=float) * self.dt

    @property
    def converged(self):
        return self.status == "converged"

    def record(self, n, s, obj, mu):
        if self.steps and self.steps[-1] == n:
            return
        f, g = obj(s.x)
        xi = np.asarray(s.xi, dtype=float)
        self.steps.append(n)
        self.x.append(np.array(s.x))
        self.p.append(np.array(s.p))
        self.xi.append(float(xi) if xi.ndim == 0 else float(np.mean(xi)))
        self.f.append(float(f))
        self.grad_norm.append(float(np.linalg.norm(g)))
        ham = 0.5 * float(s.p @ s.p) + float(f)
        # for ODE-Adam xi holds the zeta vector; its mean is what gets stored
        self.H.append(ham + 0.5 * self.xi[-1] ** 2)
        fref = 0.0 if obj.min_value is None else obj.min_value
        self.G.append(ham - fref + 0.5 * mu * self.xi[-1] ** 2)

    def functional(self, name):
        return np.asarray({"H-tilde": self.H, "G": self.G, "f": self.f}[name], dtype=float)

    def rows(self, with_coords=None):
        d = len(self.x[0]) if self.x else 0
        coords = d <= 6 if with_coords is None else with_coords
        header = list(TRACE_COLUMNS)
        if coords:
            header += [f"x{i}" for i in range(d)] + [f"p{i}" for i in range(d)]
        out = [header]
        for k, n in enumerate(self.steps):
            row = [n, n * self.dt, self.f[k], self.grad_norm[k], self.xi[k], self.H[k], self.G[k]]
            if coords:
                row += list(self.x[k]) + list(self.p[k])
            out.append(row)
        return out

    def to_csv(self, path, with_coords=None):
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for row in self.rows(with_coords):
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def default_stride(dim):
    return 1 if dim <= 10 else 10


def integrate(s0, obj, cfg, stop=None, max_steps=10_000, stride=None, rng=None, record=True):
    """Step from ``s0`` until ``stop`` fires, the budget runs out, or the state blows up.

    The trace holds every ``stride``-th state plus the final one. Status is
    ``converged``, ``max-steps`` or ``diverged`` (``diverged_at`` names the step).
    """
    stop = stop if stop is not None else StoppingRule("none")
    stride = stride or default_stride(obj.dim)
    tr = Trace(cfg.dt, stride)
    stepper = Stepper(obj, cfg, rng)
    mu = cfg.params.mu
    s = s0
    n = 0
    with np.errstate(over="ignore", invalid="ignore"):
        if record:
            tr.record(0, s, obj, mu)
        if stop.done(s, obj):
            tr.status = "converged"
        else:
            while n < max_steps:
                s = stepper.step(s)
                n += 1
                if not s.is_finite():
                    tr.status = "diverged"
                    tr.diverged_at = n
                    break
                hit = stop.done(s, obj)
                if record and (n % stride == 0 or hit or n == max_steps):
                    tr.record(n, s, obj, mu)
                if hit:
                    tr.status = "converged"
                    break
    tr.n_steps = n
    tr.final = s
    tr.n_grad_evals = stepper.n_grad_evals
    return tr


def run_batch(x0, obj, cfg, tol=1e-4, max_steps=1500):
    """Integrate many initial positions at once (p0 = xi0 = 0) under the distance rule.

    Returns ``(iterations, status)`` arrays; status codes are 0 converged,
    1 max-steps, 2 diverged. Unconverged entries report ``max_steps``.
    """
    if not obj.batched:
        raise ValueError(f"{obj.name} does not support batched evaluation")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n = x0.shape[0]
    s = ExtendedState(x0, np.zeros_like(x0), np.zeros_like(x0) if cfg.scheme == "adam-ode" else np.zeros(n))
    iters = np.full(n, max_steps, dtype=np.int64)
    status = np.ones(n, dtype=np.int8)
    rule = StoppingRule("distance", tol)
    active = np.ones(n, dtype=bool)
    stepper = Stepper(obj, cfg)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        hit = rule.done(s, obj)
        iters[hit] = 0
        status[hit] = 0
        active &= ~hit
        k = 0
        while k < max_steps and active.any():
            s = stepper.step(s)
            k += 1
            hit = rule.done(s, obj) & active
            iters[hit] = k
            status[hit] = 0
            active &= ~hit
            bad = active & ~(np.all(np.isfinite(s.x), axis=-1) & np.all(np.isfinite(s.p), axis=-1))
            status[bad] = 2
            active &= ~bad
    return iters, status
