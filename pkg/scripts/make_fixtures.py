"""Regenerate the LJ38 / LJ75 reference structures shipped in src/fadopt/data.

Requires ``ase`` (not a runtime dependency). LJ38 is the fcc truncated
octahedron, LJ75 the (2,2,1) Marks decahedron; both are relaxed to a
gradient norm below 1e-9 in reduced units.
"""
from pathlib import Path

import numpy as np
from ase.cluster import Decahedron, Octahedron
from scipy.optimize import minimize
from scipy.spatial.distance import pdist

from fadopt.potentials import lj_cluster, write_xyz

DATA = Path(__file__).resolve().parent.parent / "src" / "fadopt" / "data"


def relax(positions):
    x = positions / pdist(positions).min() * 2 ** (1 / 6)
    x = x - x.mean(axis=0)
    q = x.ravel()
    for _ in range(3):
        res = minimize(lj_cluster, q, jac=True, method="BFGS",
                       options={"gtol": 1e-11, "maxiter": 20000})
        q = res.x
    for _ in range(4):
        q = newton_step(q)
    e, g = lj_cluster(q)
    return q, e, np.linalg.norm(g)


def newton_step(q, h=1e-5):
    g = lj_cluster(q)[1]
    H = np.empty((q.size, q.size))
    for i in range(q.size):
        e = np.zeros_like(q)
        e[i] = h
        H[:, i] = (lj_cluster(q + e)[1] - lj_cluster(q - e)[1]) / (2 * h)
    H = 0.5 * (H + H.T)
    # pinv drops the six rigid-body zero modes
    return q - np.linalg.pinv(H, rcond=1e-8) @ g


def main():
    for name, atoms in [("lj38", Octahedron("Ar", length=4, cutoff=1)),
                        ("lj75", Decahedron("Ar", 2, 2, 1))]:
        q, e, gn = relax(atoms.get_positions())
        write_xyz(DATA / f"{name}.xyz", q, comment=f"{name} energy={e:.9f} grad_norm={gn:.2e}")
        print(name, e, gn)


if __name__ == "__main__":
    main()
