"""Command line interface.

Exit codes: 0 on success, 2 on non-convergence or assumption warnings, 1 on errors.
"""

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
import numpy as np
from . import __version__
from .coefficients import probe_assumptions
from .config import (
    build_config,
    probe_settings,
    read_config_file,
    read_environment,
    split_overrides,
)
from .exceptions import ConfigurationError, FBSDEError
from .fixed_point import continuation_solve, multi_start, random_init, solve
from .measure import w2, w2_1d, w2_assignment, w2_sliced
from .problems import available_problems, load_problem
from .store import RunDirectory, load_measure

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_WARNING = 2

MANIFEST_SCHEMA_VERSION = 1


def _jsonable(value):
    """Convert numpy values and non-finite floats for JSON output."""
    if isinstance(value, dict):
        return {str(key): _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


@dataclass
class RunManifest:
    """Record of one command, written last into its run directory."""

    command: str
    problem: str
    parameters: dict
    config: dict
    run_id: str
    schema_version: int = MANIFEST_SCHEMA_VERSION
    version: str = __version__
    timings: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    files: list = field(default_factory=list)
    results: dict = field(default_factory=dict)
    exit_status: int = EXIT_OK

    def write(self, driver):
        self.files = list(driver.inventory)
        driver.write_json("manifest.json", _jsonable(asdict(self)))


@contextmanager
def _recording_failure(directory, manifest):
    """Write the manifest with an error status when the wrapped computation fails."""
    try:
        yield
    except FBSDEError as e:
        manifest.exit_status = EXIT_ERROR
        manifest.results = {
            "error": e.__class__.__name__,
            "message": str(e),
            "iteration": getattr(e, "iteration", None),
            "level": getattr(e, "level", None),
        }
        with directory.writer() as driver:
            manifest.write(driver)
        raise


def run_id(problem, config):
    """Digest of the problem and the configuration."""
    document = json.dumps(
        _jsonable({"problem": problem.name, "parameters": problem.parameters, "config": config}),
        sort_keys=True,
    )
    return hashlib.sha1(document.encode()).hexdigest()[:12]


def _prepare(args):
    if not args.problem:
        raise ConfigurationError(
            f"--problem is required (available: {', '.join(available_problems())})"
        )

    settings = read_config_file(args.config) if args.config else {}
    settings.update(read_environment())
    overrides, parameters = split_overrides(args.set)
    settings.update(overrides)

    if args.seed is not None:
        settings["solver.seed"] = args.seed
    if args.threads is not None:
        settings["solver.threads"] = args.threads

    problem = load_problem(args.problem, **parameters)
    solver_settings = {k: v for k, v in settings.items() if not k.startswith("probe.")}
    cfg = build_config(problem.config, solver_settings)

    return problem, cfg, settings


def _run_directory(args, problem, cfg, command):
    identifier = run_id(problem, cfg.to_dict())
    path = Path(args.out) if args.out else Path("runs") / f"{problem.name}-{command}-{identifier}"
    return RunDirectory(path), identifier


def _plot_rows(problem, bundle, cfg):
    d, p = bundle.paths.dims[:2]
    times = bundle.field.grid.times
    header = (
        ["t"]
        + [f"mean_x_{i}" for i in range(1, d + 1)]
        + [f"mean_y_{i}" for i in range(1, p + 1)]
        + [f"ref_x_{i}" for i in range(1, d + 1)]
        + [f"ref_y_{i}" for i in range(1, p + 1)]
        + ["w2_to_ref"]
    )

    mean_x, mean_y = bundle.mean_x(), bundle.mean_y()
    reference = problem.reference
    if reference is not None:
        ref_x, ref_y = reference.evaluate(times)
    else:
        ref_x = np.full((len(times), d), np.nan)
        ref_y = np.full((len(times), p), np.nan)

    rows = []
    for k, t in enumerate(times):
        distance = math.nan
        law = reference.law_x(t, cfg.particles) if reference is not None else None
        if law is not None:
            distance = w2(bundle.flow[k], law, **cfg.w2_options())
        rows.append([t, *mean_x[k], *mean_y[k], *ref_x[k], *ref_y[k], distance])

    return header, rows


def _write_solution(driver, problem, bundle, cfg, args):
    driver.write_table(
        "convergence.csv",
        ["iteration", "delta_u", "delta_flow", "reflections"],
        (
            [i, du, dflow, reflections]
            for i, ((du, dflow), reflections) in enumerate(
                zip(bundle.history, bundle.diagnostics["reflections"]), start=1
            )
        ),
    )
    driver.write_field("field.csv", bundle.field)
    driver.write_paths_summary("paths_summary.csv", bundle.paths)
    driver.write_table("plot.csv", *_plot_rows(problem, bundle, cfg))

    if args.save_flow:
        driver.write_flow("flow", bundle.flow)
    if args.save_paths:
        driver.write_paths("paths.bin", bundle.paths)


def _print(args, document):
    if args.format == "json":
        print(json.dumps(_jsonable(document), indent=2, sort_keys=True))
    else:
        for key, value in document.items():
            print(f"{key},{value}")


def cmd_solve(args):
    problem, cfg, _ = _prepare(args)
    directory, identifier = _run_directory(args, problem, cfg, "solve")
    manifest = RunManifest("solve", problem.name, problem.parameters, cfg.to_dict(), identifier)

    started = time.perf_counter()
    with _recording_failure(directory, manifest):
        init = problem.init(cfg)
        if cfg.truncation_ladder:
            bundle = continuation_solve(problem.coefficients, cfg, init=init)
        else:
            bundle = solve(problem.coefficients, cfg, init=init)
    manifest.timings["solve"] = time.perf_counter() - started

    manifest.exit_status = EXIT_OK if bundle.converged else EXIT_WARNING
    manifest.history = bundle.history
    manifest.results = {
        "converged": bundle.converged,
        "iterations": bundle.iterations,
        "delta_u": bundle.delta_u,
        "delta_flow": bundle.delta_flow,
        "diagnostics": bundle.diagnostics,
    }

    started = time.perf_counter()
    with directory.writer() as driver:
        _write_solution(driver, problem, bundle, cfg, args)
        manifest.timings["write"] = time.perf_counter() - started
        manifest.write(driver)

    _print(
        args,
        {
            "converged": bundle.converged,
            "iterations": bundle.iterations,
            "delta_u": bundle.delta_u,
            "delta_flow": bundle.delta_flow,
            "out": str(directory),
        },
    )
    return manifest.exit_status


def cmd_multistart(args):
    problem, cfg, _ = _prepare(args)
    c = problem.coefficients

    if args.A_values:
        if problem.family is None:
            raise ConfigurationError(
                f"problem {problem.name!r} has no parametric family of solutions"
            )
        labels = [float(value) for value in args.A_values.split(",") if value.strip()]
        inits = [problem.family(cfg, value) for value in labels]
    elif args.random_inits:
        labels = list(range(args.random_inits))
        inits = [random_init(c, cfg, seed) for seed in labels]
    else:
        raise ConfigurationError("give --A-values or --random-inits")

    if len(inits) < 2:
        raise ConfigurationError("multi-start needs at least two initial pairs")

    directory, identifier = _run_directory(args, problem, cfg, "multistart")
    manifest = RunManifest(
        "multistart", problem.name, problem.parameters, cfg.to_dict(), identifier
    )

    started = time.perf_counter()
    with _recording_failure(directory, manifest):
        result = multi_start(c, cfg, inits, threads=cfg.threads)
    manifest.timings["multistart"] = time.perf_counter() - started

    converged = all(bundle.converged for bundle in result.bundles)
    manifest.exit_status = EXIT_OK if converged else EXIT_WARNING
    manifest.history = [bundle.history for bundle in result.bundles]
    manifest.results = {
        "verdict": result.verdict,
        "n_distinct": result.n_distinct(),
        "threshold": result.threshold,
        "inits": labels,
        "converged": [bundle.converged for bundle in result.bundles],
    }

    with directory.writer() as driver:
        columns = [f"run_{i}" for i in range(len(inits))]
        for name, distances in (
            ("field_distances.csv", result.field_distances),
            ("flow_distances.csv", result.flow_distances),
        ):
            rows = ([i, *row] for i, row in enumerate(distances))
            driver.write_table(name, ["run"] + columns, rows)
        driver.write_table(
            "runs.csv",
            ["run", "init", "converged", "iterations", "delta_u", "delta_flow", "mean_y_0"],
            (
                [
                    i,
                    label,
                    int(bundle.converged),
                    bundle.iterations,
                    bundle.delta_u,
                    bundle.delta_flow,
                    bundle.mean_y()[0, 0],
                ]
                for i, (label, bundle) in enumerate(zip(labels, result.bundles))
            ),
        )
        manifest.write(driver)

    _print(args, {"verdict": result.verdict, "out": str(directory)})
    return manifest.exit_status


def cmd_validate(args):
    problem, cfg, settings = _prepare(args)
    probe = probe_settings(settings)

    report = probe_assumptions(
        problem.coefficients,
        n_samples=probe.n_samples,
        box_radius=probe.box_radius,
        seed=probe.seed,
        horizon=probe.horizon or cfg.horizon,
        threads=cfg.threads,
    )

    if args.out:
        with RunDirectory(args.out).writer() as driver:
            driver.write_json("assumptions.json", _jsonable(report.to_dict()))

    document = {
        "status": report.status,
        "ellipticity_min": report.ellipticity_min,
        "sigma_time_continuity": report.sigma_time_continuity,
        **{f"lipschitz_{name}": value for name, value in report.lipschitz_estimates.items()},
        "growth_violations": len(report.growth_violations),
    }
    _print(args, document)

    for message in report.errors():
        logger.error(message)
    for message in report.warnings():
        logger.warning(message)

    if report.errors():
        return EXIT_ERROR
    if report.warnings():
        return EXIT_ERROR if probe.policy == "reject" else EXIT_WARNING
    return EXIT_OK


def cmd_w2(args):
    a, b = load_measure(args.first), load_measure(args.second)
    seed = 0 if args.seed is None else args.seed

    if args.method == "1d":
        value = w2_1d(a, b)
    elif args.method == "assignment":
        value = w2_assignment(a, b)
    elif args.method == "sliced":
        value = w2_sliced(a, b, n_projections=args.projections, seed=seed)
    else:
        value = w2(a, b, n_projections=args.projections, seed=seed)

    if args.format == "json":
        print(json.dumps({"w2": value}))
    else:
        print("w2")
        print(format(value, ".17g"))
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--problem", help="registered problem, e.g. 'counterexample?A=1&R=10'")
    common.add_argument("--config", help="INI configuration file")
    common.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="setting (dotted key) or problem parameter (plain key); repeatable",
    )
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--threads", type=int, help="worker cap")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="report format")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="count", default=0)

    parser = argparse.ArgumentParser(
        prog="mkvfbsde",
        description="Solver for forward-backward SDEs of McKean-Vlasov type.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)

    solve_parser = commands.add_parser("solve", parents=[common], help="solve a problem")
    solve_parser.add_argument("--save-flow", action="store_true", help="write every marginal")
    solve_parser.add_argument("--save-paths", action="store_true", help="write binary paths")
    solve_parser.set_defaults(handler=cmd_solve)

    multistart_parser = commands.add_parser(
        "multistart", parents=[common], help="solve from several initial pairs"
    )
    multistart_parser.add_argument("--A-values", help="comma separated family parameters")
    multistart_parser.add_argument(
        "--random-inits", type=int, help="number of random initial pairs"
    )
    multistart_parser.set_defaults(handler=cmd_multistart)

    validate_parser = commands.add_parser(
        "validate", parents=[common], help="probe the standing assumptions"
    )
    validate_parser.set_defaults(handler=cmd_validate)

    w2_parser = commands.add_parser("w2", parents=[common], help="distance between two CSV clouds")
    w2_parser.add_argument("first")
    w2_parser.add_argument("second")
    w2_parser.add_argument(
        "--method", choices=("auto", "1d", "assignment", "sliced"), default="auto"
    )
    w2_parser.add_argument("--projections", type=int, default=64)
    w2_parser.set_defaults(handler=cmd_w2)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)

    level = logging.WARNING - 10 * (args.verbose - args.quiet)
    logging.basicConfig(
        level=min(max(level, logging.DEBUG), logging.CRITICAL),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        return args.handler(args)
    except FBSDEError as e:
        logger.error("%s: %s", e.__class__.__name__, e)
        return EXIT_ERROR
    except OSError as e:
        logger.error("%s", e)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
