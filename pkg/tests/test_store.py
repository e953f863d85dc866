import numpy as np
import pytest
from mkvfbsde.exceptions import ProgrammingError, UnsupportedInputError
from mkvfbsde.field import DecouplingField, GridSpec
from mkvfbsde.inner_solver import ParticlePaths
from mkvfbsde.measure import EmpiricalMeasure, MeasureFlow
from mkvfbsde.store import format_float, load_measure


def random_paths(rng, M=6, N=4, dims=(2, 1, 3), seed=11):
    d, p, m = dims
    return ParticlePaths(
        np.linspace(0, 1, N + 1),
        rng.normal(size=(M, N + 1, d)),
        rng.normal(size=(M, N + 1, p)),
        rng.normal(size=(M, N, p, m)),
        rng.normal(size=(M, N, m)),
        seed=seed,
    )


def test_driver_out_of_context_throws_error(run_directory):
    with run_directory.writer() as driver:
        driver.write_json("a.json", {})

    with pytest.raises(ProgrammingError, match="used after its context closed"):
        driver.write_json("b.json", {})


def test_read_not_allowed_in_write_context(run_directory):
    with run_directory.writer() as driver:
        with pytest.raises(ProgrammingError, match="read_json needs read access"):
            driver.read_json("a.json")


def test_write_not_allowed_in_read_context(run_directory):
    with run_directory.reader() as driver:
        with pytest.raises(ProgrammingError, match="write_table needs write access"):
            driver.write_table("a.csv", ["x"], [[1.0]])


def test_float_format():
    assert format_float(0.1) == "0.10000000000000001"
    assert format_float(2) == "2"
    assert float(format_float(1 / 3)) == 1 / 3


def test_table_round_trip(run_directory, rng):
    body = rng.normal(scale=1e3, size=(20, 3))

    with run_directory.writer() as driver:
        driver.write_table("table.csv", ["a", "b", "c"], body)

    with run_directory.reader() as driver:
        header, read = driver.read_table("table.csv")

    assert header == ["a", "b", "c"]
    np.testing.assert_array_equal(read, body)


def test_table_layout(run_directory):
    with run_directory.writer() as driver:
        driver.write_table("table.csv", ["t", "value"], [[0.0, 0.5], [1.0, -2.0]])

    assert (run_directory.path / "table.csv").read_text() == "t,value\n0,0.5\n1,-2\n"


def test_measure_round_trip(run_directory, rng):
    uniform = EmpiricalMeasure(rng.normal(size=(7, 2)))
    weighted = EmpiricalMeasure(rng.normal(size=(3, 1)), [0.2, 0.5, 0.3])

    with run_directory.writer() as driver:
        driver.write_measure("uniform.csv", uniform)
        driver.write_measure("weighted.csv", weighted)

    with run_directory.reader() as driver:
        read_uniform = driver.read_measure("uniform.csv")
        read_weighted = driver.read_measure("weighted.csv")

    np.testing.assert_array_equal(read_uniform.points, uniform.points)
    assert read_uniform.is_uniform
    np.testing.assert_array_equal(read_weighted.weights, weighted.weights)
    assert not read_weighted.is_uniform


def test_measure_without_weight_column(run_directory):
    with run_directory.writer() as driver:
        driver.write_table("cloud.csv", ["x_1"], [[1.0], [3.0]])

    assert load_measure(run_directory.path / "cloud.csv").mean[0] == 2.0


def test_flow_round_trip(run_directory, rng):
    times = np.linspace(0, 1, 4)
    flow = MeasureFlow.from_paths(times, rng.normal(size=(5, 4, 1)))

    with run_directory.writer() as driver:
        driver.write_flow("flow", flow)

    with run_directory.reader() as driver:
        read = driver.read_flow("flow")

    np.testing.assert_array_equal(read.times, times)
    np.testing.assert_array_equal(read.stack(), flow.stack())
    assert (run_directory.path / "flow" / "00003.csv").exists()


def test_field_round_trip(run_directory):
    grid = GridSpec(1.0, 3, (1.0, 2.0), (3, 5))
    field = DecouplingField.from_function(
        grid, lambda t, x: np.stack([x[:, 0] * t, x[:, 1] - t], axis=1)
    )

    with run_directory.writer() as driver:
        driver.write_field("field.csv", field)

    with run_directory.reader() as driver:
        header, _ = driver.read_table("field.csv")
        read = driver.read_field("field.csv", grid)

    assert header == ["t", "x_1", "x_2", "u_1", "u_2"]
    np.testing.assert_array_equal(read.values, field.values)


def test_paths_round_trip(run_directory, rng):
    paths = random_paths(rng)

    with run_directory.writer() as driver:
        driver.write_paths("paths.bin", paths)

    with run_directory.reader() as driver:
        read = driver.read_paths("paths.bin", paths.times)

    assert read.seed == 11
    assert read.dims == (2, 1, 3)
    for name in ("X", "Y", "Z", "dW"):
        np.testing.assert_array_equal(getattr(read, name), getattr(paths, name))


def test_paths_with_bad_magic_are_rejected(run_directory, rng):
    with run_directory.writer() as driver:
        driver.write_paths("paths.bin", random_paths(rng))

    target = run_directory.path / "paths.bin"
    target.write_bytes(b"XXXX" + target.read_bytes()[4:])

    with run_directory.reader() as driver:
        with pytest.raises(UnsupportedInputError):
            driver.read_paths("paths.bin", np.linspace(0, 1, 5))


def test_paths_summary(run_directory, rng):
    with run_directory.writer() as driver:
        driver.write_paths_summary("summary.csv", random_paths(rng, dims=(1, 1, 1)))

    with run_directory.reader() as driver:
        header, body = driver.read_table("summary.csv")

    assert header[:3] == ["t", "mean_x_1", "var_x_1"]
    assert body.shape == (5, 11)


def test_inventory_and_atomic_writes(run_directory):
    with run_directory.writer() as driver:
        driver.write_json("manifest.json", {"a": 1})
        driver.write_json("manifest.json", {"a": 2})
        driver.write_table("sub/table.csv", ["x"], [[1.0]])
        inventory = list(driver.inventory)

    assert inventory == ["manifest.json", "sub/table.csv"]
    assert not list(run_directory.path.rglob("*.tmp"))

    with run_directory.reader() as driver:
        assert driver.read_json("manifest.json") == {"a": 2}


def test_failed_write_leaves_nothing_behind(run_directory):
    def rows():
        yield [1.0]
        raise RuntimeError("interrupted")

    with run_directory.writer() as driver:
        with pytest.raises(RuntimeError):
            driver.write_table("table.csv", ["x"], rows())
        assert driver.inventory == []

    assert list(run_directory.path.iterdir()) == []
