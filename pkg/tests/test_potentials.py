import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from fadopt.potentials import (CLUSTERS, LJ75_ENERGY, ClusterSpec, Objective,
                               SingularityError, fd_gradient_check, get_objective, harmonic,
                               harmonic_objective, lattice_positions, lj_cluster,
                               load_reference, morse_cluster, read_xyz, rosenbrock,
                               rosenbrock_objective, write_xyz)


def brute_pair_energy(q, phi):
    X = np.asarray(q).reshape(-1, 3)
    return sum(phi(np.linalg.norm(X[i] - X[j]))
               for i in range(len(X)) for j in range(i + 1, len(X)))


def lj_phi(r):
    return 4 * (r**-12 - r**-6)


def morse_phi(r, a=3.0, r0=1.0):
    return (1 - np.exp(-a * (r - r0))) ** 2


def random_cluster(rng, n, spread=1.5, rmin=0.8):
    pts = []
    while len(pts) < n:
        c = rng.uniform(-spread, spread, 3)
        if all(np.linalg.norm(c - p) > rmin for p in pts):
            pts.append(c)
    return np.array(pts).ravel()


class TestHarmonic:
    def test_origin(self):
        f, g = harmonic([0.0, 0.0], np.diag([1.0, 10.0]))
        assert f == 0 and np.all(g == 0)

    def test_value(self):
        f, g = harmonic([1.0, 2.0], np.diag([1.0, 10.0]))
        assert f == pytest.approx(20.5)
        np.testing.assert_allclose(g, [1.0, 20.0])

    def test_identity(self):
        f, g = harmonic([1.0, 0.0], np.eye(2))
        assert f == 0.5
        np.testing.assert_allclose(g, [1.0, 0.0])

    def test_mismatch(self):
        with pytest.raises(ValueError):
            harmonic([1.0, 2.0, 3.0], np.eye(2))

    def test_batched(self):
        X = np.random.default_rng(0).normal(size=(7, 2))
        f, g = harmonic(X, np.diag([1.0, 10.0]))
        for k in range(7):
            fk, gk = harmonic(X[k], np.diag([1.0, 10.0]))
            assert f[k] == fk
            np.testing.assert_array_equal(g[k], gk)


class TestRosenbrock:
    @pytest.mark.parametrize("x, f, g", [
        ((1.0, 1.0), 0.0, (0.0, 0.0)),
        ((0.0, 0.0), 1.0, (-2.0, 0.0)),
        ((1.0, 2.0), 100.0, (-400.0, 200.0)),
    ])
    def test_values(self, x, f, g):
        fv, gv = rosenbrock(x)
        assert fv == pytest.approx(f)
        np.testing.assert_allclose(gv, g, atol=1e-12)

    def test_wrong_dim(self):
        with pytest.raises(ValueError):
            rosenbrock([1.0, 2.0, 3.0])

    def test_fd(self):
        assert fd_gradient_check(rosenbrock_objective(), [0.3, 0.7], h=1e-5) < 1e-6


class TestLennardJones:
    def test_unit_distance(self):
        e, _ = lj_cluster([0, 0, 0, 1, 0, 0])
        assert e == pytest.approx(0.0, abs=1e-14)

    def test_pair_minimum(self):
        r = 2 ** (1 / 6)
        e, g = lj_cluster([0, 0, 0, r, 0, 0])
        assert e == pytest.approx(-1.0, abs=1e-14)
        assert np.linalg.norm(g) <= 1e-10

    def test_equilateral(self):
        r = 2 ** (1 / 6)
        q = [0, 0, 0, r, 0, 0, r / 2, r * np.sqrt(3) / 2, 0]
        e, _ = lj_cluster(q)
        assert e == pytest.approx(-3.0, abs=1e-12)
        assert e == pytest.approx(brute_pair_energy(q, lj_phi), abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for n in (2, 5, 13):
            q = random_cluster(rng, n)
            assert lj_cluster(q)[0] == pytest.approx(brute_pair_energy(q, lj_phi), rel=1e-12)

    def test_fd_five_atoms(self):
        q = random_cluster(np.random.default_rng(4), 5)
        obj = Objective("lj5", 15, lj_cluster)
        assert fd_gradient_check(obj, q, h=1e-6) < 1e-5

    def test_coincident_atoms(self):
        with pytest.raises(SingularityError):
            lj_cluster([0.0, 0, 0, 0, 0, 0, 1, 0, 0])

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            lj_cluster(np.zeros(4))


class TestMorse:
    def test_pair_minimum(self):
        e, g = morse_cluster([0, 0, 0, 1, 0, 0], 3.0, 1.0)
        assert e == 0.0 and np.linalg.norm(g) == 0.0

    def test_quarter(self):
        r = 1.0 + np.log(2) / 3
        e, _ = morse_cluster([0, 0, 0, r, 0, 0], 3.0, 1.0)
        assert e == pytest.approx(0.25, abs=1e-14)

    def test_square(self):
        q = [0, 0, 0, 1, 0, 0, 1, 1, 0, 0, 1, 0]
        e, _ = morse_cluster(q, 3.0, 1.0)
        assert abs(e - brute_pair_energy(q, morse_phi)) <= 1e-12

    def test_fd(self):
        q = random_cluster(np.random.default_rng(5), 8)
        obj = Objective("m8", 24, lambda x: morse_cluster(x, 3.0, 1.0))
        assert fd_gradient_check(obj, q) < 1e-5

    def test_coincident(self):
        with pytest.raises(SingularityError):
            morse_cluster([1.0, 1, 1, 1, 1, 1], 3.0, 1.0)

    def test_morse64_offset(self):
        # reported relative to separated atoms: sum of (phi - 1)
        obj = get_objective("morse64")
        q = lattice_positions(4)
        raw, _ = morse_cluster(q, 3.0, 1.0)
        assert obj.value(q) == pytest.approx(raw - 64 * 63 / 2, abs=1e-9)
        np.testing.assert_array_equal(obj.grad(q), morse_cluster(q, 3.0, 1.0)[1])


class TestClusterInvariance:
    @pytest.mark.parametrize("name", ["lj", "morse"])
    def test_rigid_motion(self, name):
        rng = np.random.default_rng(6)
        q = random_cluster(rng, 10)
        fn = lj_cluster if name == "lj" else (lambda x: morse_cluster(x, 3.0, 1.0))
        R = Rotation.random(random_state=7).as_matrix()
        moved = (q.reshape(-1, 3) @ R.T + rng.normal(size=3)).ravel()
        e0, e1 = fn(q)[0], fn(moved)[0]
        assert abs(e1 - e0) <= 1e-10 * abs(e0)

    @given(st.permutations(list(range(9))))
    @settings(max_examples=25, deadline=None)
    def test_permutation(self, perm):
        q = random_cluster(np.random.default_rng(8), 9)
        qp = q.reshape(-1, 3)[list(perm)].ravel()
        for fn in (lj_cluster, lambda x: morse_cluster(x, 3.0, 1.0)):
            e0, e1 = fn(q)[0], fn(qp)[0]
            assert abs(e1 - e0) <= 1e-12 * abs(e0)

    def test_dim(self):
        for spec in CLUSTERS.values():
            assert spec.objective().dim == 3 * spec.n_atoms

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ClusterSpec(3, "buckingham").objective()


class TestGradientChecks:
    def test_harmonic_exact(self):
        obj = harmonic_objective()
        for x in np.random.default_rng(1).normal(size=(10, 2)):
            assert fd_gradient_check(obj, x) < 1e-9

    @pytest.mark.parametrize("name", ["harmonic", "rosenbrock"])
    def test_hundred_points(self, name):
        obj = get_objective(name)
        pts = np.random.default_rng(2).uniform(-2, 2, size=(100, 2))
        assert max(fd_gradient_check(obj, x) for x in pts) < 1e-5

    @pytest.mark.parametrize("name", ["lj38", "lj75", "morse64"])
    def test_clusters(self, name):
        obj = get_objective(name)
        base = lattice_positions(4) if name == "morse64" else obj.minimizer
        rng = np.random.default_rng(9)
        for _ in range(3):
            assert fd_gradient_check(obj, base + 0.05 * rng.normal(size=obj.dim)) < 1e-5

    def test_bad_h(self):
        with pytest.raises(ValueError):
            fd_gradient_check(harmonic_objective(), [0.0, 0.0], h=0)


class TestObjectives:
    def test_minimizers_stationary(self):
        for name in ("harmonic", "rosenbrock", "lj38", "lj75"):
            obj = get_objective(name)
            assert np.linalg.norm(obj.grad(obj.minimizer)) <= 1e-8

    def test_deterministic(self):
        obj = get_objective("lj75")
        a, b = obj(obj.minimizer), obj(obj.minimizer)
        assert a[0] == b[0] and np.array_equal(a[1], b[1])

    def test_lj75_reference(self):
        obj = get_objective("lj75")
        assert abs(obj.value(obj.minimizer) - LJ75_ENERGY) <= 1e-4

    def test_unknown(self):
        with pytest.raises(ValueError):
            get_objective("himmelblau")


class TestXYZ:
    def test_roundtrip(self, tmp_path):
        q = np.random.default_rng(0).normal(size=12)
        write_xyz(tmp_path / "a.xyz", q, "four atoms", "Ar")
        np.testing.assert_allclose(read_xyz(tmp_path / "a.xyz"), q, atol=1e-14)

    def test_truncated(self, tmp_path):
        (tmp_path / "b.xyz").write_text("3\nc\nAr 0 0 0\n")
        with pytest.raises(ValueError):
            read_xyz(tmp_path / "b.xyz")

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.xyz"):
            load_reference("lj38", tmp_path / "nope.xyz")

    def test_lattice(self):
        q = lattice_positions(4)
        assert q.size == 192
        assert set(np.unique(q)) == {0.0, 1.0, 2.0, 3.0}
