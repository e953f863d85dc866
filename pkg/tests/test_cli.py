import json
import numpy as np
import pytest
from mkvfbsde import __version__
from mkvfbsde.cli import main
from mkvfbsde.coefficients import CoefficientSet
from mkvfbsde.problems import Problem

SMALL_COUNTEREXAMPLE = [
    "--set", "solver.particles=400",
    "--set", "grid.n_t=20",
    "--set", "grid.n_x=41",
    "--set", "grid.x_max=6",
]
SMALL_DECOUPLED = ["--set", "solver.particles=400", "--set", "grid.n_t=20"]
SOLUTION_FILES = {"convergence.csv", "field.csv", "paths_summary.csv", "plot.csv"}


def run(command, problem, out, *arguments):
    return main([command, "--problem", problem, "--out", str(out), *arguments])


def read_manifest(path):
    return json.loads((path / "manifest.json").read_text())


def read_body(path):
    return np.loadtxt(path, delimiter=",", skiprows=1)


def test_version(capsys):
    with pytest.raises(SystemExit) as error:
        main(["--version"])
    assert error.value.code == 0
    assert capsys.readouterr().out.strip() == __version__


def test_solve_decoupled(tmp_path, capsys):
    out = tmp_path / "run"

    assert run("solve", "decoupled", out, *SMALL_DECOUPLED) == 0
    assert "converged,True" in capsys.readouterr().out

    manifest = read_manifest(out)
    assert manifest["exit_status"] == 0
    assert manifest["results"]["iterations"] == 2
    assert len(manifest["run_id"]) == 12
    assert set(manifest["files"]) == SOLUTION_FILES

    header = (out / "plot.csv").read_text().splitlines()[0]
    assert header == "t,mean_x_1,mean_y_1,ref_x_1,ref_y_1,w2_to_ref"
    body = read_body(out / "plot.csv")
    np.testing.assert_array_equal(body[:, 2], 0.5)
    np.testing.assert_array_equal(body[:, 4], 0.5)


def test_solve_saves_flow_and_paths(tmp_path):
    out = tmp_path / "run"

    assert run("solve", "decoupled", out, "--save-flow", "--save-paths", *SMALL_DECOUPLED) == 0
    assert (out / "flow" / "index.json").exists()
    assert (out / "paths.bin").exists()
    assert "paths.bin" in read_manifest(out)["files"]


def test_default_run_directory(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["solve", "--problem", "decoupled", *SMALL_DECOUPLED]) == 0

    (directory,) = (tmp_path / "runs").iterdir()
    assert directory.name.startswith("decoupled-solve-")
    assert directory.name.endswith(read_manifest(directory)["run_id"])


def test_non_convergence_exits_with_warning(tmp_path):
    out = tmp_path / "run"

    assert run("solve", "decoupled", out, "--set", "solver.max_iters=1", *SMALL_DECOUPLED) == 2
    assert read_manifest(out)["results"]["converged"] is False


def test_counterexample_outside_domain_is_an_error(tmp_path):
    out = tmp_path / "run"
    assert run("solve", "counterexample?A=1&R=1", out) == 1
    assert not out.exists()


def test_failed_solve_writes_manifest(tmp_path):
    out = tmp_path / "run"

    assert run("solve", "decoupled", out, "--set", "solver.gamma_cap=0.1", *SMALL_DECOUPLED) == 1

    manifest = read_manifest(out)
    assert manifest["exit_status"] == 1
    assert manifest["results"]["error"] == "DivergenceError"
    assert manifest["results"]["iteration"] == 1
    assert manifest["config"]["gamma_cap"] == 0.1
    assert manifest["files"] == []


def test_failed_multistart_writes_manifest(tmp_path):
    out = tmp_path / "run"
    arguments = ["--A-values", "0,1", "--set", "solver.gamma_cap=0.5", *SMALL_COUNTEREXAMPLE]

    assert run("multistart", "counterexample", out, *arguments) == 1
    assert read_manifest(out)["exit_status"] == 1
    assert not (out / "runs.csv").exists()


@pytest.mark.parametrize(
    "arguments",
    [["--problem", "unknown"], [], ["--problem", "decoupled", "--set", "solver.thetta=1"]],
)
def test_invalid_invocations_are_errors(tmp_path, arguments):
    assert main(["solve", "--out", str(tmp_path / "run"), *arguments]) == 1


def test_settings_precedence(tmp_path, monkeypatch):
    config = tmp_path / "run.ini"
    config.write_text("[grid]\nn_t = 10\n\n[solver]\nparticles = 400\nseed = 1\n")
    monkeypatch.setenv("MKVFBSDE_GRID__N_T", "12")
    first, second = tmp_path / "first", tmp_path / "second"

    assert run("solve", "decoupled", first, "--config", str(config)) == 0
    overrides = ["--set", "grid.n_t=14", "--set", "solver.seed=2", "--seed", "3"]
    assert run("solve", "decoupled", second, "--config", str(config), *overrides) == 0

    assert read_manifest(first)["config"]["grid"]["n_t"] == 12
    assert read_manifest(first)["config"]["seed"] == 1
    assert read_manifest(second)["config"]["grid"]["n_t"] == 14
    assert read_manifest(second)["config"]["seed"] == 3


def test_problem_parameters_from_overrides(tmp_path):
    out = tmp_path / "run"

    assert run("solve", "decoupled?c=1", out, "--set", "c=2", *SMALL_DECOUPLED) == 0
    assert read_manifest(out)["parameters"]["c"] == 2.0
    np.testing.assert_array_equal(read_body(out / "plot.csv")[:, 2], 2.0)


def test_output_is_independent_of_thread_count(tmp_path):
    outputs = []
    for threads in ("1", "4"):
        out = tmp_path / f"threads-{threads}"
        run("solve", "counterexample", out, "--threads", threads, *SMALL_COUNTEREXAMPLE)
        outputs.append(out)

    for name in SOLUTION_FILES:
        assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()


def test_multistart_on_counterexample(tmp_path, capsys):
    out = tmp_path / "run"

    assert run("multistart", "counterexample", out, "--A-values=-1,0,1", *SMALL_COUNTEREXAMPLE) == 0
    assert "verdict,3 distinct solutions" in capsys.readouterr().out

    runs = read_body(out / "runs.csv")
    np.testing.assert_array_equal(runs[:, 1], [-1, 0, 1])
    np.testing.assert_allclose(runs[:, 6], [-1, 0, 1], atol=5e-2)

    assert read_body(out / "flow_distances.csv").shape == (3, 4)
    assert read_manifest(out)["results"]["n_distinct"] == 3


def test_multistart_with_random_inits(tmp_path, capsys):
    arguments = ["--random-inits", "2", "--format", "json", *SMALL_DECOUPLED]

    assert run("multistart", "decoupled", tmp_path / "run", *arguments) == 0
    assert json.loads(capsys.readouterr().out)["verdict"] == "1 distinct solution"


def test_multistart_needs_a_family(tmp_path):
    assert run("multistart", "decoupled", tmp_path, "--A-values", "0,1") == 1


def test_multistart_needs_inits(tmp_path):
    assert run("multistart", "counterexample", tmp_path) == 1


def test_validate_counterexample(tmp_path, capsys):
    out = tmp_path / "validation"

    assert run("validate", "counterexample", out, "--set", "probe.n_samples=16") == 0
    assert "status,ok" in capsys.readouterr().out
    assert json.loads((out / "assumptions.json").read_text())["status"] == "ok"


@pytest.fixture
def custom_problem(monkeypatch, small_config):
    def install(coefficients):
        problem = Problem("custom", {}, coefficients, small_config)
        monkeypatch.setattr("mkvfbsde.cli.load_problem", lambda spec, **parameters: problem)

    return install


def test_validate_degenerate_volatility(custom_problem, brownian):
    custom_problem(brownian(sigma=0.0))
    assert main(["validate", "--problem", "custom", "--set", "probe.n_samples=8"]) == 1


@pytest.mark.parametrize("policy,status", [("warn", 2), ("reject", 1)])
def test_validate_steep_drift(custom_problem, policy, status):
    custom_problem(
        CoefficientSet(
            (1, 1, 1),
            lambda t, x, y, z, mu: 2 * x,
            lambda t, x, y, z, mu: 0.0,
            lambda t, x, y, mu: 1.0,
            lambda x, mu: 0.0,
        )
    )
    settings = ["--set", "probe.n_samples=8", "--set", f"probe.policy={policy}"]
    assert main(["validate", "--problem", "custom", *settings]) == status


def test_w2_command(tmp_path, capsys):
    first, second = tmp_path / "first.csv", tmp_path / "second.csv"
    first.write_text("x_1\n0\n1\n")
    second.write_text("x_1,weight\n1,0.5\n2,0.5\n")

    assert main(["w2", str(first), str(second)]) == 0
    assert capsys.readouterr().out == "w2\n1\n"

    assert main(["w2", str(first), str(second), "--method", "assignment", "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out) == {"w2": 1.0}


def test_w2_command_missing_file(tmp_path):
    missing = str(tmp_path / "missing.csv")
    assert main(["w2", missing, missing]) == 1
