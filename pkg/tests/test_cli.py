import json

import numpy as np
import pytest

from sfsets.cli import EXIT_CAP, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main
from sfsets.dp import Trace, load_sfset, save_sfset
from sfsets.model import load_model
from sfsets.policy import PolicyTree, random_tree


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, json.loads(out) if out.strip() else None


@pytest.fixture(scope="module")
def grid_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("grid")
    assert main(["build-env", "--env", "gridworld", "--size", "3", "--out",
                 str(d / "m.json")]) == EXIT_OK
    assert main(["run-dp", "--model", str(d / "m.json"), "--directions", "60",
                 "--tol", "1e-10", "--fresh-seeds", "3", "--out", str(d / "s.sfset"),
                 "--trace", str(d / "t.csv")]) == EXIT_OK
    return d


def test_build_env(tmp_path, capsys):
    code, info = run(capsys, "build-env", "--env", "gridworld", "--size", "3",
                     "--out", tmp_path / "g.json")
    assert code == EXIT_OK and (info["k"], info["d"], info["A"]) == (9, 2, 4)
    m = load_model(tmp_path / "g.json")
    np.testing.assert_array_equal(m.q1, np.eye(9)[0])
    code, info = run(capsys, "build-env", "--env", "mountain-car", "--out", tmp_path / "mc.json")
    assert code == EXIT_OK and info["k"] == 144 and info["d"] == 9


def test_usage_errors(tmp_path, capsys):
    code, info = run(capsys, "build-env", "--env", "gridworld", "--size", "0",
                     "--out", tmp_path / "x.json")
    assert code == EXIT_USAGE and info["error"] == "usage"
    code, info = run(capsys, "run-dp")
    assert code == EXIT_USAGE and "--model" in info["message"]
    code, _ = run(capsys, "run-dp", "--model", tmp_path / "missing.json", "--out", tmp_path / "s")
    assert code == EXIT_USAGE


def test_model_file_round_trips(grid_files, tmp_path, capsys):
    main(["build-env", "--env", "gridworld", "--size", "3", "--out", str(tmp_path / "g.json")])
    capsys.readouterr()
    text = (grid_files / "m.json").read_text()
    assert (tmp_path / "g.json").read_text() == text


def test_run_dp_is_deterministic(grid_files, tmp_path, capsys):
    code, info = run(capsys, "run-dp", "--model", grid_files / "m.json", "--directions", "60",
                     "--tol", "1e-10", "--fresh-seeds", "3", "--out", tmp_path / "s.sfset",
                     "--trace", tmp_path / "t.csv")
    assert code == EXIT_OK and info["converged"]
    assert (tmp_path / "s.sfset").read_bytes() == (grid_files / "s.sfset").read_bytes()
    assert (tmp_path / "t.csv").read_text() == (grid_files / "t.csv").read_text()


def test_trace_csv_schema_and_round_trip(grid_files):
    text = (grid_files / "t.csv").read_text()
    lines = text.splitlines()
    assert lines[0] == "# sfsets trace v1"
    assert lines[1] == "iteration,max_error_optimized,max_error_fresh,fresh_std_error"
    trace = Trace.from_csv(text)
    assert trace.to_csv() == text
    assert len(lines) - 2 == len(trace.iterations)


def test_sfset_round_trips(grid_files, tmp_path):
    save_sfset(load_sfset(grid_files / "s.sfset"), tmp_path / "again.sfset")
    assert (tmp_path / "again.sfset").read_bytes() == (grid_files / "s.sfset").read_bytes()


def test_gamma_zero_single_row(grid_files, tmp_path, capsys):
    code, info = run(capsys, "run-dp", "--model", grid_files / "m.json", "--gamma", "0",
                     "--directions", "10", "--fresh-seeds", "2", "--out", tmp_path / "s.sfset",
                     "--trace", tmp_path / "t.csv")
    assert code == EXIT_OK and info["iterations"] == 1
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 3


def test_strict_non_convergence(grid_files, tmp_path, capsys):
    code, info = run(capsys, "run-dp", "--model", grid_files / "m.json", "--directions", "10",
                     "--max-iters", "3", "--fresh-seeds", "0", "--strict",
                     "--out", tmp_path / "s.sfset")
    assert code == EXIT_NUMERICAL and not info["converged"]


def test_bellman_error(grid_files, capsys):
    code, info = run(capsys, "bellman-error", "--model", grid_files / "m.json",
                     "--set", grid_files / "s.sfset", "--fresh-seeds", "2")
    assert code == EXIT_OK
    assert info["max_error_optimized"] < 1e-8
    assert len(info["max_error_fresh_per_seed"]) == 2


def test_plan_goes_down_in_left_column(grid_files, capsys):
    code, out = run(capsys, "plan", "--model", grid_files / "m.json", "--set",
                    grid_files / "s.sfset", "--reward", "[-1, -1]",
                    "--state", "0", "--state", "3", "--state", "6")
    assert code == EXIT_OK
    assert [row["action"] for row in out] == [1, 1, 1]
    assert out[0]["value"] == pytest.approx(20.0, abs=1e-5)
    code, info = run(capsys, "plan", "--model", grid_files / "m.json", "--set",
                     grid_files / "s.sfset", "--reward", "[1, 2, 3]")
    assert code == EXIT_USAGE


def test_imitate_from_policy(grid_files, tmp_path, capsys):
    tree = random_tree(4, 9, 4, np.random.default_rng(0))
    (tmp_path / "tree.json").write_text(tree.to_json())
    assert PolicyTree.from_json(tree.to_json()).to_json() == tree.to_json()
    code, info = run(capsys, "imitate", "--model", grid_files / "m.json", "--set",
                     grid_files / "s.sfset", "--target", f"from-policy {tmp_path / 'tree.json'}",
                     "--tail-action", "0", "--rollouts", "2000", "--seed", "1",
                     "--csv", tmp_path / "r.csv", "--summary", tmp_path / "sum.json")
    assert code == EXIT_OK and info is None
    summary = json.loads((tmp_path / "sum.json").read_text())
    target, mean = np.array(summary["target"]), np.array(summary["mean"])
    se = np.array(summary["standard_error"])
    assert np.all(np.abs(mean - target) <= 4 * se + summary["truncation_bound"])
    assert summary["max_drift"] < 1e-6
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[:2] == ["# sfsets rollouts v1", "f0,f1"] and len(lines) == 2002
    rows = np.loadtxt(tmp_path / "r.csv", delimiter=",", skiprows=2)
    np.testing.assert_array_equal(rows.mean(axis=0), mean)


def test_imitate_infeasible_target(grid_files, capsys):
    code, info = run(capsys, "imitate", "--model", grid_files / "m.json", "--set",
                     grid_files / "s.sfset", "--target", "[100, 100]", "--rollouts", "5")
    assert code == EXIT_NUMERICAL
    assert info["error"] == "InfeasibleTarget" and info["distance"] > 50
    assert len(info["nearest"]) == 2


def test_oracle_compare_horizon_four(grid_files, tmp_path, capsys):
    assert main(["run-dp", "--model", str(grid_files / "m.json"), "--directions", "60",
                 "--max-iters", "3", "--tol", "0", "--fresh-seeds", "0",
                 "--out", str(tmp_path / "h4.sfset")]) == EXIT_OK
    capsys.readouterr()
    code, info = run(capsys, "oracle-compare", "--model", grid_files / "m.json",
                     "--set", tmp_path / "h4.sfset", "--horizon", "4")
    assert code == EXIT_OK and info["horizon"] == 4
    assert info["within_threshold"] and info["optimized"]["max"] <= info["threshold"]
    code, info = run(capsys, "oracle-compare", "--model", grid_files / "m.json",
                     "--set", grid_files / "s.sfset", "--horizon", "inf")
    assert code == EXIT_OK and info["within_threshold"]


def test_oracle_compare_enumeration_cap(tmp_path, capsys):
    main(["build-env", "--env", "gridworld-pomdp", "--size", "2", "--out",
          str(tmp_path / "p.json")])
    main(["run-dp", "--model", str(tmp_path / "p.json"), "--directions", "5", "--max-iters",
          "4", "--fresh-seeds", "0", "--out", str(tmp_path / "p.sfset")])
    capsys.readouterr()
    code, info = run(capsys, "oracle-compare", "--model", tmp_path / "p.json",
                     "--set", tmp_path / "p.sfset", "--horizon", "5", "--cap", "100")
    assert code == EXIT_CAP and info["error"] == "EnumerationTooLarge"


def test_mismatched_set_is_rejected(grid_files, tmp_path, capsys):
    main(["build-env", "--env", "gridworld", "--size", "2", "--out", str(tmp_path / "g2.json")])
    capsys.readouterr()
    code, info = run(capsys, "plan", "--model", tmp_path / "g2.json", "--set",
                     grid_files / "s.sfset", "--reward", "[1, 0]")
    assert code == EXIT_USAGE
