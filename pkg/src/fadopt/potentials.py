"""Benchmark objectives with analytic gradients.

Every objective is exposed through :class:`Objective`, whose callable returns
``(value, gradient)``. The two-dimensional test functions accept a leading
batch axis (``x.shape == (..., d)``) so that whole grids of initial
conditions can be integrated at once; the cluster potentials work on a
single flat ``3N`` coordinate vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numba
import numpy as np

COINCIDENCE_RADIUS = 1e-12
_R2_MIN = COINCIDENCE_RADIUS**2

LJ38_ENERGY = -173.91
LJ75_ENERGY = -397.492331
MORSE64_ENERGY = -512.83


class SingularityError(ValueError):
    """Two atoms sit (numerically) on top of each other."""


@dataclass(frozen=True)
class Objective:
    """An optimizable function ``f: R^dim -> R``.

    ``minimizer`` and ``min_value`` are optional; the distance stopping rule
    needs the former, Lyapunov functionals use the latter as reference.
    """

    name: str
    dim: int
    fn: Callable[[np.ndarray], tuple]
    minimizer: np.ndarray | None = None
    min_value: float | None = None
    batched: bool = False
    params: dict = field(default_factory=dict)

    def __call__(self, x):
        return self.fn(x)

    def value(self, x):
        return self.fn(x)[0]

    def grad(self, x):
        return self.fn(x)[1]

    def force(self, x):
        return -self.fn(x)[1]


def harmonic(x, C):
    """Quadratic ``x^T C x / 2`` and its gradient ``C x``."""
    x = np.asarray(x, dtype=float)
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1] or x.shape[-1] != C.shape[0]:
        raise ValueError(f"dimension mismatch: x{x.shape} vs C{C.shape}")
    g = x @ C.T
    return 0.5 * np.sum(x * g, axis=-1), g


def rosenbrock(x, a=1.0, b=100.0):
    """``(a - x1)^2 + b (x2 - x1^2)^2`` with analytic gradient."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 2:
        raise ValueError(f"rosenbrock needs 2-vectors, got shape {x.shape}")
    x1, x2 = x[..., 0], x[..., 1]
    u = a - x1
    v = x2 - x1 * x1
    f = u * u + b * v * v
    g = np.stack([-2.0 * u - 4.0 * b * x1 * v, 2.0 * b * v], axis=-1)
    return f, g


@numba.njit(cache=True)
def _lj_kernel(X):
    n = X.shape[0]
    g = np.zeros_like(X)
    e = 0.0
    rmin2 = np.inf
    for i in range(n - 1):
        for j in range(i + 1, n):
            dx = X[i, 0] - X[j, 0]
            dy = X[i, 1] - X[j, 1]
            dz = X[i, 2] - X[j, 2]
            r2 = dx * dx + dy * dy + dz * dz
            if r2 < rmin2:
                rmin2 = r2
            if r2 < _R2_MIN:
                continue  # reported by _check_rmin
            ir2 = 1.0 / r2
            ir6 = ir2 * ir2 * ir2
            e += 4.0 * (ir6 * ir6 - ir6)
            # (1/r) dphi/dr
            c = (-48.0 * ir6 * ir6 + 24.0 * ir6) * ir2
            g[i, 0] += c * dx
            g[i, 1] += c * dy
            g[i, 2] += c * dz
            g[j, 0] -= c * dx
            g[j, 1] -= c * dy
            g[j, 2] -= c * dz
    return e, g, rmin2


@numba.njit(cache=True)
def _morse_kernel(X, a, r0):
    n = X.shape[0]
    g = np.zeros_like(X)
    e = 0.0
    rmin2 = np.inf
    for i in range(n - 1):
        for j in range(i + 1, n):
            dx = X[i, 0] - X[j, 0]
            dy = X[i, 1] - X[j, 1]
            dz = X[i, 2] - X[j, 2]
            r2 = dx * dx + dy * dy + dz * dz
            if r2 < rmin2:
                rmin2 = r2
            if r2 < _R2_MIN:
                continue  # reported by _check_rmin
            r = np.sqrt(r2)
            ex = np.exp(-a * (r - r0))
            e += (1.0 - ex) * (1.0 - ex)
            c = 2.0 * a * ex * (1.0 - ex) / r
            g[i, 0] += c * dx
            g[i, 1] += c * dy
            g[i, 2] += c * dz
            g[j, 0] -= c * dx
            g[j, 1] -= c * dy
            g[j, 2] -= c * dz
    return e, g, rmin2


def _as_atoms(q):
    q = np.ascontiguousarray(q, dtype=float)
    if q.ndim != 1 or q.size % 3 or q.size < 6:
        raise ValueError(f"cluster coordinates must be a flat 3N vector with N >= 2, got {q.shape}")
    return q.reshape(-1, 3)


def _check_rmin(rmin2):
    if not rmin2 >= COINCIDENCE_RADIUS**2:
        raise SingularityError(f"coincident atoms (min distance {np.sqrt(rmin2):.3e})")


def lj_cluster(q):
    """Lennard-Jones cluster energy ``sum_{i<j} 4(r^-12 - r^-6)`` and gradient."""
    e, g, rmin2 = _lj_kernel(_as_atoms(q))
    _check_rmin(rmin2)
    return e, g.ravel()


def morse_cluster(q, a=3.0, r0=1.0):
    """Morse cluster energy ``sum_{i<j} (1 - exp(-a(r - r0)))^2`` and gradient."""
    e, g, rmin2 = _morse_kernel(_as_atoms(q), float(a), float(r0))
    _check_rmin(rmin2)
    return e, g.ravel()


def fd_gradient_check(obj, x, h=1e-6):
    """Max componentwise error of the analytic gradient against central differences.

    Each component error is divided by ``max(1, |analytic component|)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=float)
    g = np.asarray(obj.grad(x), dtype=float)
    fd = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fd[i] = (obj.value(x + e) - obj.value(x - e)) / (2 * h)
    return float(np.max(np.abs(fd - g) / np.maximum(1.0, np.abs(g))))


# -- constructors ---------------------------------------------------------

def harmonic_objective(C=((1.0, 0.0), (0.0, 10.0))):
    C = np.array(C, dtype=float)
    if not np.allclose(C, C.T):
        raise ValueError("C must be symmetric")
    d = C.shape[0]
    return Objective("harmonic", d, lambda x: harmonic(x, C), minimizer=np.zeros(d),
                     min_value=0.0, batched=True, params={"C": C.tolist()})


def rosenbrock_objective(a=1.0, b=100.0):
    return Objective("rosenbrock", 2, lambda x: rosenbrock(x, a, b),
                     minimizer=np.array([a, a * a]), min_value=0.0, batched=True,
                     params={"a": a, "b": b})


@dataclass(frozen=True)
class ClusterSpec:
    n_atoms: int
    pair_kind: str = "lennard-jones"
    morse_a: float = 3.0
    morse_r0: float = 1.0
    reference_min_energy: float | None = None
    # report Morse energies as sum(phi - 1), i.e. measured from separated atoms
    morse_well_offset: bool = False

    def objective(self, reference=None):
        if self.pair_kind == "lennard-jones":
            fn = lj_cluster
            params = {}
        elif self.pair_kind == "morse":
            a, r0 = self.morse_a, self.morse_r0
            shift = self.n_atoms * (self.n_atoms - 1) / 2 if self.morse_well_offset else 0.0

            def fn(q):
                e, g = morse_cluster(q, a, r0)
                return e - shift, g

            params = {"a": a, "r0": r0, "energy_shift": -shift}
        else:
            raise ValueError(f"unknown pair kind {self.pair_kind!r}")
        name = f"{'lj' if self.pair_kind == 'lennard-jones' else 'morse'}{self.n_atoms}"
        return Objective(name, 3 * self.n_atoms, fn, minimizer=reference,
                         min_value=self.reference_min_energy, params=params)


CLUSTERS = {
    "lj38": ClusterSpec(38, "lennard-jones", reference_min_energy=LJ38_ENERGY),
    "lj75": ClusterSpec(75, "lennard-jones", reference_min_energy=LJ75_ENERGY),
    "morse64": ClusterSpec(64, "morse", 3.0, 1.0, reference_min_energy=MORSE64_ENERGY,
                           morse_well_offset=True),
}


# -- XYZ i/o --------------------------------------------------------------

def read_xyz(path):
    """Read a single-frame XYZ file; element symbols are ignored."""
    lines = Path(path).read_text().splitlines()
    n = int(lines[0].split()[0])
    coords = [[float(t) for t in line.split()[1:4]] for line in lines[2:2 + n]]
    if len(coords) != n:
        raise ValueError(f"{path}: expected {n} atoms, found {len(coords)}")
    return np.array(coords).ravel()


def write_xyz(path, q, comment="", element="X"):
    X = np.asarray(q, dtype=float).reshape(-1, 3)
    out = [str(len(X)), comment]
    out += [f"{element} {x:.15f} {y:.15f} {z:.15f}" for x, y, z in X]
    Path(path).write_text("\n".join(out) + "\n")


def reference_path(name):
    return Path(str(resources.files("fadopt") / "data" / f"{name}.xyz"))


def load_reference(name, path=None):
    """Tabulated minimum-energy structure for ``lj38`` or ``lj75``."""
    path = Path(path) if path is not None else reference_path(name)
    if not path.exists():
        raise FileNotFoundError(f"reference structure not found: {path}")
    return read_xyz(path)


def lattice_positions(n_per_axis=4, spacing=1.0):
    """Atoms on the vertices of ``{0, .., n-1}^3`` (scaled by ``spacing``)."""
    g = np.arange(n_per_axis) * spacing
    X = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    return X.ravel()


def get_objective(name):
    """Objective by CLI name: harmonic, rosenbrock, lj38, lj75, morse64."""
    if name == "harmonic":
        return harmonic_objective()
    if name == "rosenbrock":
        return rosenbrock_objective()
    if name in ("lj38", "lj75"):
        ref = load_reference(name)
        return CLUSTERS[name].objective(reference=ref)
    if name == "morse64":
        return CLUSTERS[name].objective()
    raise ValueError(f"unknown potential {name!r}")
