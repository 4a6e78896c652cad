"""Friction-adaptive dynamics: state, coupling matrices and energy functionals.

The extended state is ``(x, p, xi)``. All routines broadcast over a leading
batch axis: ``x`` and ``p`` may have shape ``(..., d)`` with ``xi`` of shape
``(...)``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

PROJECTOR_EPS = 1e-14


def dot(a, b):
    return np.sum(a * b, axis=-1)


@dataclass(frozen=True)
class ExtendedState:
    x: np.ndarray
    p: np.ndarray
    xi: np.ndarray | float = 0.0

    @classmethod
    def at_rest(cls, x, xi=0.0):
        x = np.array(x, dtype=float)
        xi = np.full(x.shape[:-1], xi, dtype=float) if x.ndim > 1 else float(xi)
        return cls(x, np.zeros_like(x), xi)

    def replace(self, **kw):
        return replace(self, **kw)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.p))
                    and np.all(np.isfinite(self.xi)))


@dataclass(frozen=True)
class DynamicsParams:
    gamma: float = 1.0
    alpha: float = 1.0
    mu: float = 1.0

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be > 0, got {self.mu}")
        if self.gamma < 0 or self.alpha < 0:
            raise ValueError("gamma and alpha must be >= 0")


@dataclass(frozen=True)
class Coupling:
    """The symmetric PSD map ``A(x) = lambda1 I + lambda2 P(x)``.

    ``P`` is the rank-one projector ``F F^T / |F|^2`` when ``normalized`` and
    the raw outer product ``F F^T`` otherwise (``F = -grad f``). The custom
    kind carries a dense ``matrix_at(x)``.
    """

    kind: str = "identity"
    lambda1: float = 1.0
    lambda2: float = 0.0
    normalized: bool = True
    matrix_at: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "force-outer", "projective-mixture", "custom"):
            raise ValueError(f"unknown coupling kind {self.kind!r}")
        if self.kind == "custom" and self.matrix_at is None:
            raise ValueError("custom coupling needs matrix_at")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1, lambda2 must be >= 0")

    @classmethod
    def identity(cls):
        return cls("identity", 1.0, 0.0)

    @classmethod
    def force_outer(cls):
        return cls("force-outer", 0.0, 1.0, normalized=False)

    @classmethod
    def mixture(cls, lambda1, lambda2, normalized=True):
        return cls("projective-mixture", float(lambda1), float(lambda2), normalized)

    @classmethod
    def custom(cls, matrix_at):
        return cls("custom", 0.0, 0.0, matrix_at=matrix_at)

    @property
    def is_projector(self):
        """A^2 = A: identity, or a pure normalized projector."""
        if self.kind == "identity":
            return True
        return (self.kind == "projective-mixture" and self.normalized
                and ((self.lambda1 == 0 and self.lambda2 == 1)
                     or (self.lambda1 == 1 and self.lambda2 == 0)))

    def split(self, F):
        """Return ``(l1, l2_eff, u)`` with ``A = l1 I + l2_eff u u^T`` and |u| = 1 (or u = 0)."""
        if self.kind == "identity":
            return 1.0, np.zeros(np.shape(F)[:-1]), np.zeros_like(F)
        n2 = dot(F, F)
        safe = n2 >= PROJECTOR_EPS**2
        u = np.where(safe[..., None], F / np.sqrt(np.where(safe, n2, 1.0))[..., None], 0.0)
        l2 = self.lambda2 if self.normalized else self.lambda2 * n2
        return self.lambda1, np.where(safe, l2, 0.0), u

    def matrix(self, x, F):
        """Dense ``A(x)`` for a single state."""
        if self.kind == "custom":
            return np.asarray(self.matrix_at(x), dtype=float)
        l1, l2, u = self.split(np.asarray(F, dtype=float))
        return l1 * np.eye(len(F)) + l2 * np.outer(u, u)

    def apply(self, x, F, v):
        """Matrix-free ``A(x) v``."""
        if self.kind == "identity":
            return np.array(v, dtype=float)
        if self.kind == "custom":
            return np.asarray(v) @ self.matrix_at(x).T
        l1, l2, u = self.split(F)
        return l1 * v + (l2 * dot(u, v))[..., None] * u

    def quad(self, x, F, v):
        """``v^T A(x) v``."""
        return dot(v, self.apply(x, F, v))


def coupling_apply(c, x, F, v):
    return c.apply(np.asarray(x, float), np.asarray(F, float), np.asarray(v, float))


def fad_rhs(s, obj, c, params):
    """Time derivative ``(x', p', xi')`` of the FAD vector field."""
    F = obj.force(s.x)
    Ap = c.apply(s.x, F, s.p)
    xi = np.asarray(s.xi)
    dp = F - xi[..., None] * Ap - params.gamma * s.p if np.ndim(xi) else F - xi * Ap - params.gamma * s.p
    dxi = dot(s.p, Ap) / params.mu - params.alpha * xi
    return ExtendedState(np.array(s.p, dtype=float), dp, dxi)


def ldhd_rhs(s, obj, gamma):
    F = obj.force(s.x)
    return ExtendedState(np.array(s.p, dtype=float), F - gamma * s.p, np.zeros_like(np.asarray(s.xi, float)))


def _fref(obj):
    return 0.0 if obj.min_value is None else obj.min_value


def extended_hamiltonian(s, obj):
    """``|p|^2/2 + f(x) + xi^2/2``."""
    return 0.5 * dot(s.p, s.p) + obj.value(s.x) + 0.5 * np.asarray(s.xi) ** 2


def lyapunov_G(s, obj, mu):
    """``f(x) - f(x*) + |p|^2/2 + mu xi^2/2``; reference 0 when f(x*) is unknown."""
    return obj.value(s.x) - _fref(obj) + 0.5 * dot(s.p, s.p) + 0.5 * mu * np.asarray(s.xi) ** 2


def lyapunov_W(s, obj, mu, eps):
    """G plus the cross terms ``eps (x - x*).p + eps |x - x*|^2``."""
    if not 0 <= eps <= 0.5:
        raise ValueError("eps must lie in [0, 1/2]")
    if obj.minimizer is None:
        raise ValueError("lyapunov_W needs a known minimizer")
    dx = s.x - obj.minimizer
    return lyapunov_G(s, obj, mu) + eps * dot(dx, s.p) + eps * dot(dx, dx)


def is_centered(obj):
    return obj.min_value is not None


def effective_force(x, p, F, alpha, mu):
    """Asymptotic FFAD force ``(1 - (p.F)^3 / (alpha mu)) F``."""
    if not alpha * mu > 0:
        raise ValueError("alpha * mu must be positive")
    F = np.asarray(F, dtype=float)
    pf = dot(np.asarray(p, float), F)
    return (1.0 - pf**3 / (alpha * mu))[..., None] * F if np.ndim(pf) else (1.0 - pf**3 / (alpha * mu)) * F


def rayleigh_dissipation(p, F=None, gamma=0.0, alpha=1.0, mu=1.0, kind="kinetic"):
    """Quartic Rayleigh function whose p-gradient is the asymptotic damping force."""
    p = np.asarray(p, dtype=float)
    if kind == "kinetic":
        q = dot(p, p)
    elif kind == "force":
        if F is None:
            raise ValueError("force kind needs F")
        q = dot(p, np.asarray(F, float)) ** 2
    else:
        raise ValueError(f"unknown kind {kind!r}")
    return q * q / (4 * alpha * mu) + 0.5 * gamma * dot(p, p)


def rayleigh_damping_force(p, F, gamma, alpha, mu):
    """``(p^T F F^T p) F F^T p / (alpha mu) + gamma p`` for the force kind."""
    p = np.asarray(p, float)
    F = np.asarray(F, float)
    pf = dot(p, F)
    return pf**2 * pf * F / (alpha * mu) + gamma * p
