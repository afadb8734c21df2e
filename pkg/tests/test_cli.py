import json

import jsonschema
import numpy as np
import pytest

import golden
from bslq import cli
from bslq.errors import NumericalError
from bslq.problem import load_spec, dumps_spec, validate_spec
from bslq.reporting import solution_schema, verification_schema
from bslq.solver import solve
from bslq.tree import read_csv
from conftest import zero_spec


@pytest.fixture
def example_file(tmp_path):
    path = tmp_path / "example.json"
    assert cli.main(["example", "-o", str(path)]) == 0
    return path


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def write_spec(tmp_path, spec, name="spec.json"):
    path = tmp_path / name
    path.write_text(dumps_spec(spec))
    return str(path)


# --- example ----------------------------------------------------------------------


def test_example_is_byte_stable(capsys):
    _, first, _ = run(capsys, "example")
    _, second, _ = run(capsys, "example")
    assert first == second


def test_example_is_valid_four_period_problem(capsys):
    _, text, _ = run(capsys, "example")
    spec = load_spec(text)
    assert spec.horizon == 4 and spec.n == 3 and spec.m == 2
    assert validate_spec(spec).ok


# --- solve ------------------------------------------------------------------------


def test_solve_report(example_file, tmp_path, capsys):
    out = tmp_path / "sol.json"
    code, stdout, _ = run(capsys, "solve", "-i", str(example_file), "-o", str(out))
    assert code == 0
    report = json.loads(out.read_text())
    jsonschema.validate(report, solution_schema())
    assert report["value_variant"] == "derivation"
    assert set(report["values"]) == {"theorem", "derivation", "completed"}
    assert report["value"] == pytest.approx(golden.VALUE_DERIVATION, abs=1e-12)
    assert report["oracle_cost"] == pytest.approx(golden.TRANSFORM_ROUTE_COST, abs=1e-10)
    assert report["version"] and report["seed"] == 0
    assert "value-function variants differ" in report["warnings"]
    # human summary: six significant digits
    assert "27.6242" in stdout and "15.1641" in stdout


def test_solve_to_stdout_is_json(example_file, capsys):
    code, stdout, _ = run(capsys, "solve", "-i", str(example_file))
    assert code == 0
    jsonschema.validate(json.loads(stdout), solution_schema())


def test_solve_auto_variant_picks_closest(example_file, capsys):
    _, stdout, _ = run(capsys, "solve", "-i", str(example_file), "--value-variant", "auto")
    report = json.loads(stdout)
    assert report["value_variant"] == "theorem"


def test_solve_direct_with_qp(example_file, capsys):
    _, stdout, _ = run(capsys, "solve", "-i", str(example_file), "--method", "direct", "--qp")
    report = json.loads(stdout)
    assert report["value"] == pytest.approx(golden.QP_OPTIMUM, abs=1e-10)
    assert report["qp"]["control_gap"] <= 1e-6
    assert report["warnings"] == []


def test_solve_invalid_spec(example, tmp_path, capsys):
    path = write_spec(tmp_path, example.replace(R=-np.eye(2)))
    code, stdout, err = run(capsys, "solve", "-i", path)
    assert code == 2
    assert "validation" in json.loads(stdout)
    assert "invalid problem" in err


def test_solve_malformed_json(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    code, _, err = run(capsys, "solve", "-i", str(path))
    assert code == 2 and "error" in err


def test_solve_missing_input(tmp_path, capsys):
    code, _, err = run(capsys, "solve", "-i", str(tmp_path / "nope.json"))
    assert code == 2 and "not found" in err


def test_solve_numerical_failure(example_file, monkeypatch, capsys):
    def boom(*a, **k):
        raise NumericalError("Theta singular", stage="riccati", step=2)

    monkeypatch.setattr(cli, "solve", boom)
    code, _, err = run(capsys, "solve", "-i", str(example_file))
    assert code == 3 and "numerical failure" in err


def test_dump_trajectories(example, example_file, tmp_path, capsys):
    csv_path = tmp_path / "traj.csv"
    assert cli.main(["solve", "-i", str(example_file), "--dump-trajectories", str(csv_path)]) == 0
    capsys.readouterr()
    procs = read_csv(csv_path.read_text())
    sol = solve(example)
    assert procs["y"].max_abs_diff(sol.y_star) == 0.0
    assert procs["u"].max_abs_diff(sol.u_star) == 0.0
    assert procs["x"].max_abs_diff(sol.x_star) == 0.0


def test_solve_is_byte_deterministic(example_file, tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    cli.main(["solve", "-i", str(example_file), "-o", str(a), "--seed", "9"])
    cli.main(["solve", "-i", str(example_file), "-o", str(b), "--seed", "9"])
    assert a.read_bytes() == b.read_bytes()


# --- verify ------------------------------------------------------------------------


def test_verify_direct_passes(example_file, tmp_path, capsys):
    out = tmp_path / "ver.json"
    code, stdout, _ = run(capsys, "verify", "-i", str(example_file), "--method", "direct", "-o", str(out))
    assert code == 0
    report = json.loads(out.read_text())
    jsonschema.validate(report, verification_schema())
    assert report["verification"]["pass"] is True
    assert "verify PASS" in stdout


def test_verify_transform_route_fails_on_example(example_file, capsys):
    # the transformation route's control is not stationary on this problem
    code, stdout, err = run(capsys, "verify", "-i", str(example_file))
    assert code == 1
    report = json.loads(stdout)
    assert not report["verification"]["checks"]["stationarity"]
    assert "stationarity residual per step" in err


def test_verify_tampered_offsets(example_file, capsys):
    code, stdout, err = run(capsys, "verify", "-i", str(example_file), "--method", "direct", "--tamper", "b")
    assert code == 1
    assert json.loads(stdout)["tampered"] == ["b"]
    assert "k=0" in err and "k=3" in err


def test_verify_zero_problem(tmp_path, capsys):
    path = write_spec(tmp_path, zero_spec())
    code, stdout, _ = run(capsys, "verify", "-i", path)
    assert code == 0
    ver = json.loads(stdout)["verification"]
    assert ver["stationarity_max_residual"] == 0.0
    assert ver["superposition_error"] == 0.0


def test_verify_tolerance_override(example_file, capsys):
    code, stdout, _ = run(capsys, "verify", "-i", str(example_file), "--method", "direct",
                          "--tol", "stationarity=1e-3")
    assert code == 0
    assert json.loads(stdout)["verification"]["thresholds"]["stationarity"] == 1e-3


@pytest.mark.parametrize("bad", ["stationarity", "bogus=1", "stationarity=abc"])
def test_verify_bad_tolerance(example_file, capsys, bad):
    code, _, err = run(capsys, "verify", "-i", str(example_file), "--tol", bad)
    assert code == 2 and ("tol" in err.lower())


def test_verify_is_byte_deterministic(example_file, tmp_path, capsys):
    outs = []
    for name in ("a.json", "b.json"):
        path = tmp_path / name
        cli.main(["verify", "-i", str(example_file), "--method", "direct", "--seed", "4", "-o", str(path)])
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


# --- oracle and schema ---------------------------------------------------------------


def test_oracle_command(example_file, capsys):
    code, stdout, _ = run(capsys, "oracle", "-i", str(example_file))
    assert code == 0
    report = json.loads(stdout)
    assert report["cost"] == pytest.approx(golden.QP_OPTIMUM, abs=1e-9)
    assert report["control_dimension"] == 30
    assert report["hessian_min_eigenvalue"] > 0


@pytest.mark.parametrize("kind", ["spec", "solution", "verification"])
def test_schema_command(capsys, kind):
    code, stdout, _ = run(capsys, "schema", "--kind", kind)
    assert code == 0
    jsonschema.Draft202012Validator.check_schema(json.loads(stdout))


def test_example_validates_against_spec_schema(capsys):
    _, schema, _ = run(capsys, "schema")
    _, text, _ = run(capsys, "example")
    jsonschema.validate(json.loads(text), json.loads(schema))


def test_output_directory_must_exist(example_file, tmp_path, capsys):
    code, _, err = run(capsys, "solve", "-i", str(example_file), "-o", str(tmp_path / "no" / "x.json"))
    assert code == 2 and "does not exist" in err


def test_depth_cap_env(example_file, monkeypatch, capsys):
    monkeypatch.setenv("BSLQ_MAX_DEPTH", "2")
    code, _, err = run(capsys, "solve", "-i", str(example_file))
    assert code == 2 and "BSLQ_MAX_DEPTH" in err
