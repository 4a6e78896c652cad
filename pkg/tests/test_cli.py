import csv
import json

import numpy as np
import pytest

from fadopt.cli import main
from fadopt.experiments import make_method, run_to_convergence
from fadopt.potentials import get_objective


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def meta(path):
    return json.loads((path / "metadata.json").read_text())


class TestRun:
    def test_converges(self, tmp_path):
        code = main(["run", "--potential", "rosenbrock", "--method", "kfad", "--dt", "0.01",
                     "--gamma", "1", "--alpha", "1", "--mu", "1", "--x0", "1,2",
                     "--out", str(tmp_path)])
        assert code == 0
        m = meta(tmp_path)
        rec, _ = run_to_convergence(make_method("kfad", 0.01, alpha=1.0),
                                    get_objective("rosenbrock"), [1.0, 2.0])
        assert m["result"]["status"] == "converged"
        assert m["result"]["iterations"] == rec.iterations
        rows = read_csv(tmp_path / "trace.csv")
        assert rows[0][:7] == ["step", "time", "f", "grad_norm", "xi", "H_tilde", "G"]
        assert int(rows[-1][0]) == rec.iterations

    def test_unknown_method(self, capsys):
        code = main(["run", "--potential", "rosenbrock", "--method", "sgd"])
        assert code == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_required(self):
        assert main(["run", "--method", "kfad"]) == 1

    def test_at_minimum(self, tmp_path):
        code = main(["run", "--potential", "rosenbrock", "--x0", "1,1", "--out", str(tmp_path)])
        assert code == 0
        assert len(read_csv(tmp_path / "trace.csv")) == 2  # header + step 0

    def test_wrong_dimension(self, tmp_path):
        assert main(["run", "--potential", "harmonic", "--x0", "1,2,3",
                     "--out", str(tmp_path)]) == 1

    def test_diverged(self, tmp_path):
        code = main(["run", "--potential", "rosenbrock", "--method", "ldhd", "--dt", "0.5",
                     "--gamma", "0.01", "--x0=-2,3", "--max-steps", "1000",
                     "--out", str(tmp_path)])
        assert code == 2
        assert meta(tmp_path)["result"]["status"] == "diverged"

    def test_budget_exhausted_is_success(self, tmp_path):
        code = main(["run", "--potential", "rosenbrock", "--max-steps", "10",
                     "--out", str(tmp_path)])
        assert code == 0 and meta(tmp_path)["result"]["status"] == "max-iter"

    def test_cluster_runs_full_budget(self, tmp_path):
        code = main(["run", "--potential", "lj38", "--max-steps", "20", "--stride", "10",
                     "--out", str(tmp_path)])
        assert code == 0
        m = meta(tmp_path)
        assert m["stopping_rule"] == "none" and m["result"]["iterations"] == 20

    def test_config_replay(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["run", "--potential", "harmonic", "--method", "mcfad", "--lambda1", "0.3",
                     "--lambda2", "0.7", "--dt", "0.02", "--out", str(a)]) == 0
        assert main(["run", "--config", str(a / "metadata.json"), "--out", str(b)]) == 0
        assert (a / "trace.csv").read_text() == (b / "trace.csv").read_text()
        assert meta(b)["config"]["lambda1"] == 0.3

    def test_ini_config_and_precedence(self, tmp_path):
        ini = tmp_path / "c.ini"
        ini.write_text("[run]\npotential = harmonic\nmethod = ldhd\ndt = 0.02\nx0 = 1,2\n")
        assert main(["run", "--config", str(ini), "--dt", "0.01", "--out", str(tmp_path)]) == 0
        cfg = meta(tmp_path)["config"]
        assert cfg["method"] == "ldhd" and cfg["dt"] == 0.01 and cfg["x0"] == [1.0, 2.0]

    def test_json_config_wrong_command(self, tmp_path):
        assert main(["run", "--potential", "harmonic", "--max-steps", "5",
                     "--out", str(tmp_path)]) == 0
        assert main(["sweep", "--config", str(tmp_path / "metadata.json")]) == 1

    def test_missing_config(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "none.ini")]) == 1


class TestSweep:
    def test_degenerate_matches_run(self, tmp_path):
        assert main(["sweep", "--axis1", "1", "--axis2", "0.01", "--ic", "1,2", "--method",
                     "kfad", "--max-iter", "5000", "--out", str(tmp_path / "s")]) == 0
        assert main(["run", "--potential", "rosenbrock", "--method", "kfad",
                     "--max-steps", "5000", "--out", str(tmp_path / "r")]) == 0
        rows = read_csv(tmp_path / "s" / "sweep.csv")
        assert rows[0] == ["axis1", "axis2", "mean_iters", "converged_frac", "n_ics"]
        assert float(rows[1][2]) == meta(tmp_path / "r")["result"]["iterations"]

    def test_grid_shape_and_log_axis(self, tmp_path):
        assert main(["sweep", "--axis1", "0.001,1,4", "--axis1-range", "--log-axis", "1",
                     "--axis2", "0.01,0.02", "--ic-grid", "2", "--max-iter", "50",
                     "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "sweep.csv")[1:]
        assert len(rows) == 8 and all(r[4] == "4" for r in rows)
        np.testing.assert_allclose(sorted({float(r[0]) for r in rows}), [1e-3, 1e-2, 1e-1, 1.0])

    def test_full_ic_grid_shape(self, tmp_path):
        # 40 x 40 initial positions per cell; a single short cell keeps this quick
        assert main(["sweep", "--axis1", "1", "--axis2", "0.01", "--max-iter", "5",
                     "--out", str(tmp_path)]) == 0
        assert read_csv(tmp_path / "sweep.csv")[1][4] == "1600"
        assert meta(tmp_path)["spec"]["ics"] == "1600 initial conditions"

    def test_empty_grid(self, tmp_path):
        assert main(["sweep", "--axis1", "", "--axis2", "0.01", "--out", str(tmp_path)]) == 1

    def test_unsorted_grid(self, tmp_path):
        assert main(["sweep", "--axis1", "1,0.5", "--axis2", "0.01",
                     "--out", str(tmp_path)]) == 1

    def test_replay(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["sweep", "--axis1", "0.5,1", "--axis2", "0.01", "--ic-grid", "3",
                     "--max-iter", "300", "--jobs", "2", "--out", str(a)]) == 0
        assert main(["sweep", "--config", str(a / "metadata.json"), "--out", str(b)]) == 0
        assert (a / "sweep.csv").read_text() == (b / "sweep.csv").read_text()


class TestCluster:
    def test_row_count(self, tmp_path):
        code = main(["cluster", "--system", "morse64", "--method", "kfad", "--gamma", "0",
                     "--alpha", "1", "--mu", "1", "--dt", "0.08", "--steps", "50",
                     "--runs", "20", "--seed", "7", "--init-steps", "10",
                     "--out", str(tmp_path)])
        assert code == 0
        rows = read_csv(tmp_path / "cluster.csv")
        assert rows[0] == ["run", "seed", "init_energy", "final_energy", "min_energy", "success"]
        assert len(rows) == 21 and rows[1][1] == "7"
        assert meta(tmp_path)["spec"]["momenta"] == "zeroed"

    def test_momentum_policies_differ(self, tmp_path):
        energies = {}
        for policy in ("thermalized", "zeroed"):
            out = tmp_path / policy
            assert main(["cluster", "--system", "lj75", "--method", "kfad", "--gamma", "1e-5",
                         "--alpha", "10", "--mu", "0.1", "--steps", "50", "--runs", "2",
                         "--momenta", policy, "--out", str(out)]) == 0
            rows = read_csv(out / "cluster.csv")[1:]
            energies[policy] = [(r[1], r[2], r[3]) for r in rows]
        th, ze = energies["thermalized"], energies["zeroed"]
        assert [r[:2] for r in th] == [r[:2] for r in ze]  # same seeds, same starts
        assert all(a[2] != b[2] for a, b in zip(th, ze))

    def test_missing_fixture(self, tmp_path, capsys):
        missing = tmp_path / "gone.xyz"
        assert main(["cluster", "--system", "lj38", "--reference", str(missing),
                     "--out", str(tmp_path)]) == 1
        assert str(missing) in capsys.readouterr().err

    def test_replay_and_xyz(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["cluster", "--system", "lj38", "--steps", "30", "--runs", "2",
                     "--seed", "3", "--dump-xyz", "--out", str(a)]) == 0
        assert (a / "final_0000.xyz").exists() and (a / "final_0001.xyz").exists()
        assert main(["cluster", "--config", str(a / "metadata.json"), "--out", str(b)]) == 0
        assert (a / "cluster.csv").read_text() == (b / "cluster.csv").read_text()

    def test_bad_threshold(self, tmp_path):
        assert main(["cluster", "--system", "lj38", "--threshold", "0.5",
                     "--out", str(tmp_path)]) == 1


class TestCheck:
    def test_grad(self, tmp_path, capsys):
        assert main(["check", "grad", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 5 and "FAIL" not in out
        assert meta(tmp_path)["passed"] is True

    def test_invariant(self, tmp_path):
        assert main(["check", "invariant", "--out", str(tmp_path)]) == 0
        rows = meta(tmp_path)["report"]["invariant"]
        assert rows[0]["value"] <= 1e-12

    def test_order(self, tmp_path):
        assert main(["check", "order", "--out", str(tmp_path)]) == 0
        orders = [r["value"] for r in meta(tmp_path)["report"]["order"]]
        assert all(1.8 <= v <= 2.2 for v in orders[:3]) and 0.8 <= orders[3] <= 1.2

    def test_unknown_suite(self):
        assert main(["check", "speed"]) == 1


def test_version(capsys):
    with pytest.raises(SystemExit):
        raise SystemExit(main(["--version"]))
    assert "fadopt" in capsys.readouterr().out
