"""Outer fixed-point iteration over (decoupling field, measure flow) pairs.

The map Phi sends an input pair (phi, mu) to the decoupling field u and the state law of the
system whose coefficients see the frozen joint flow nu_t = phi(t, .) <> mu_t. Solutions of the
mean-field system are the fixed points of Phi; :func:`solve` looks for one by damped Picard
iteration.
"""

import dataclasses
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Tuple
import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from .coefficients import truncate
from .exceptions import ConfigurationError, ContinuationError, DivergenceError, DomainError
from .field import DecouplingField, GridSpec
from .inner_solver import (
    MAX_REFLECTION_FRACTION,
    bsde_residual,
    brownian_increments,
    solve_frozen,
    z_field,
)
from .measure import EmpiricalMeasure, MeasureFlow, flow_distance, weighted_sup_distance

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    """Settings of the outer iteration.

    Parameters
    ----------
    x0 : tuple of float
        Starting point of the forward equation.
    grid : :class:`.GridSpec`
        Discretization; its horizon is the terminal time T.
    particles : int
        Number of particles M.
    theta : float
        Damping in (0, 1]; 1 is undamped Picard iteration.
    tol_u, tol_flow : float
        Stopping tolerances on the weighted sup distance of fields and the largest per-time W2
        distance of flows between consecutive iterates.
    max_iters : int
        Largest number of applications of Phi.
    truncation_ladder : tuple of float
        Strictly increasing truncation levels for :func:`continuation_solve`.
    seed : int
        Seed of the Brownian increments, shared by all iterations.
    gamma_cap : float
        Bound on the sup norm of accepted fields.
    lipschitz_cap : float
        Bound on the grid Lipschitz constant of accepted fields.
    gamma_prime : float, optional
        Bound on E[sup_t |X_t|^4] of accepted flows. Derived from the declared constant of the
        coefficients when omitted.
    antithetic : bool
        Draw antithetic Brownian increments.
    w2_cap : int
        Largest cloud compared with the exact assignment distance.
    w2_projections : int
        Directions used by the sliced distance above `w2_cap`.
    threads : int
        Worker cap for independent runs.
    """

    x0: Tuple[float, ...]
    grid: GridSpec
    particles: int = 2000
    theta: float = 0.5
    tol_u: float = 5e-3
    tol_flow: float = 5e-3
    max_iters: int = 50
    truncation_ladder: Tuple[float, ...] = ()
    seed: int = 0
    gamma_cap: float = 1e3
    lipschitz_cap: float = 1e3
    gamma_prime: Optional[float] = None
    antithetic: bool = True
    w2_cap: int = 512
    w2_projections: int = 64
    max_reflection_fraction: float = MAX_REFLECTION_FRACTION
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in np.atleast_1d(self.x0)))
        ladder = tuple(float(n) for n in self.truncation_ladder)
        object.__setattr__(self, "truncation_ladder", ladder)

        if len(self.x0) != self.grid.d:
            raise ConfigurationError(
                f"has {len(self.x0)} coordinates for a grid of dimension {self.grid.d}",
                field="solver.x0",
            )
        if not self.grid.contains(self.x0):
            raise ConfigurationError("lies outside the grid box", field="solver.x0")
        if self.particles < 2:
            raise ConfigurationError("must be at least 2", field="solver.particles")
        if not 0 < self.theta <= 1:
            raise ConfigurationError("must lie in (0, 1]", field="solver.theta")
        if self.tol_u < 0:
            raise ConfigurationError("must be nonnegative", field="solver.tol_u")
        if self.tol_flow < 0:
            raise ConfigurationError("must be nonnegative", field="solver.tol_flow")
        if self.max_iters < 1:
            raise ConfigurationError("must be at least 1", field="solver.max_iters")
        ladder = self.truncation_ladder
        if any(n <= 0 for n in ladder) or any(b <= a for a, b in zip(ladder, ladder[1:])):
            raise ConfigurationError(
                "must be positive and strictly increasing", field="solver.truncation_ladder"
            )
        if self.seed < 0:
            raise ConfigurationError("must be nonnegative", field="solver.seed")
        if not self.gamma_cap > 0:
            raise ConfigurationError("must be positive", field="solver.gamma_cap")
        if not self.lipschitz_cap > 0:
            raise ConfigurationError("must be positive", field="solver.lipschitz_cap")
        if self.gamma_prime is not None and not self.gamma_prime > 0:
            raise ConfigurationError("must be positive", field="solver.gamma_prime")
        if self.w2_cap < 1:
            raise ConfigurationError("must be positive", field="w2.cap")
        if self.w2_projections < 1:
            raise ConfigurationError("must be positive", field="w2.projections")
        if self.threads < 1:
            raise ConfigurationError("must be at least 1", field="solver.threads")

    @property
    def horizon(self):
        return self.grid.horizon

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def gamma_prime_for(self, L):
        """Bound on the fourth path moment: 8 (|x0| + L T + L T^(1/2))^4 unless configured."""
        if self.gamma_prime is not None:
            return self.gamma_prime
        T = self.horizon
        return 8 * (float(np.linalg.norm(self.x0)) + L * T + L * math.sqrt(T)) ** 4

    def w2_options(self):
        return {"cap": self.w2_cap, "n_projections": self.w2_projections, "seed": self.seed}

    def to_dict(self):
        config = {
            f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "grid"
        }
        config["x0"] = list(self.x0)
        config["truncation_ladder"] = list(self.truncation_ladder)
        config["grid"] = self.grid.to_dict()
        return config


@dataclass
class IterationState:
    """An input pair (phi, mu) of the outer map with its history."""

    phi: DecouplingField
    mu_flow: MeasureFlow
    iteration: int = 0
    history: list = field(default_factory=list)
    reflections: list = field(default_factory=list)


@dataclass
class SolutionBundle:
    """Result of :func:`solve`.

    `field`, `flow` and `paths` are the outputs of the last application of Phi; `joint_flow` is the
    measure argument those outputs were computed with and `state` the last blended input pair.
    """

    field: DecouplingField
    z: object
    flow: MeasureFlow
    joint_flow: MeasureFlow
    paths: object
    converged: bool
    iterations: int
    delta_u: float
    delta_flow: float
    history: list
    diagnostics: dict
    state: IterationState

    def mean_x(self):
        return self.paths.X.mean(axis=0)

    def mean_y(self):
        return self.paths.Y.mean(axis=0)

    def consistency_gap(self):
        """Largest per-time discrepancy between u(t, .) <> law(X_t) and the law of (X_t, Y_t).

        Zero by construction since Y_t is read off the field at X_t.
        """
        X, Y = self.paths.X, self.paths.Y
        grid = self.field.grid
        return max(
            float(np.max(np.abs(self.field.interpolate(k, X[:, k]) - Y[:, k])))
            for k in range(grid.n_t + 1)
        )


def default_init(c, cfg):
    """Initial pair: phi(t, x) = G(x, delta_x0) and the law of x0 + Sigma_0 W."""
    grid = cfg.grid
    x0 = np.asarray(cfg.x0)
    dirac = EmpiricalMeasure.dirac(x0)
    terminal = c.terminal(grid.nodes, dirac).reshape(grid.shape + (c.p,))
    phi = DecouplingField(grid, np.broadcast_to(terminal, (grid.n_t + 1,) + terminal.shape))

    y0 = phi.interpolate(0, x0[None])
    sigma0 = c.volatility(0.0, x0[None], y0, EmpiricalMeasure(np.hstack([x0[None], y0])))[0]

    return IterationState(phi, diffusion_flow(cfg, sigma0, c.m))


def diffusion_flow(cfg, sigma, m, drift=None):
    """Flow of x0 + sigma W_t + drift(t) on the particles and increments of `cfg`.

    `drift` holds the deterministic displacement at every time node, shape (N + 1, d).
    """
    grid = cfg.grid
    dW = brownian_increments(cfg.particles, grid.n_t, m, grid.dt, cfg.seed, cfg.antithetic)
    X = np.empty((cfg.particles, grid.n_t + 1, grid.d))
    X[:, 0] = cfg.x0

    for k in range(grid.n_t):
        X[:, k + 1] = X[:, k] + dW[:, k] @ np.asarray(sigma).T
        if drift is not None:
            X[:, k + 1] += drift[k + 1] - drift[k]

    return MeasureFlow.from_paths(grid.times, X)


def random_init(c, cfg, seed):
    """Random initial pair for exploring several basins.

    The field is a constant drawn uniformly from the ball of radius |G(x0, delta_x0)| + 1, the flow
    that of x0 + Sigma_0 W plus a random linear drift.
    """
    rng = np.random.default_rng([cfg.seed, seed])
    state = default_init(c, cfg)
    scale = float(np.max(np.abs(state.phi.values))) + 1
    phi = DecouplingField.constant(cfg.grid, rng.uniform(-scale, scale, c.p))

    x0 = np.asarray(cfg.x0)
    y0 = phi.interpolate(0, x0[None])
    sigma0 = c.volatility(0.0, x0[None], y0, EmpiricalMeasure(np.hstack([x0[None], y0])))[0]
    slope = rng.uniform(-scale, scale, c.d)
    drift = cfg.grid.times[:, None] * slope

    return IterationState(phi, diffusion_flow(cfg, sigma0, c.m, drift=drift))


def blend_flows(old, new, theta, seed, iteration):
    """Replace a theta-share of the particles of `old` by the matching particles of `new`."""
    if theta == 1:
        return new

    a, b = old.stack(), new.stack()
    if a.shape != b.shape:
        logger.debug("flows have different particle counts; taking the new flow")
        return new

    M = a.shape[0]
    rng = np.random.default_rng([seed, iteration])
    chosen = rng.choice(M, size=int(round(theta * M)), replace=False)
    mixed = a.copy()
    mixed[chosen] = b[chosen]

    return MeasureFlow.from_paths(old.times, mixed)


@dataclass
class PhiOutput:
    run: object
    law: MeasureFlow


def _apply(state, c, cfg, iteration):
    run = solve_frozen(
        c,
        state.phi,
        state.mu_flow,
        cfg.particles,
        cfg.seed,
        cfg.x0,
        gamma_cap=cfg.gamma_cap,
        antithetic=cfg.antithetic,
        max_reflection_fraction=cfg.max_reflection_fraction,
    )
    law = run.paths.law()
    u = run.field

    dump = {"iteration": iteration, "sup_norm": u.sup_norm(), "lipschitz": u.lipschitz_estimate()}
    if dump["sup_norm"] > cfg.gamma_cap:
        raise DivergenceError(
            f"|u| = {dump['sup_norm']:.6g} exceeds gamma_cap = {cfg.gamma_cap:.6g}",
            iteration=iteration,
            dump=dump,
        )
    if dump["lipschitz"] > cfg.lipschitz_cap:
        raise DivergenceError(
            f"Lipschitz estimate {dump['lipschitz']:.6g} of u exceeds lipschitz_cap = "
            f"{cfg.lipschitz_cap:.6g}",
            iteration=iteration,
            dump=dump,
        )

    moment = law.path_moment(4)
    gamma_prime = cfg.gamma_prime_for(c.declared_L)
    if moment > gamma_prime:
        dump["path_moment"] = moment
        raise DivergenceError(
            f"E[sup |X|^4] = {moment:.6g} exceeds gamma' = {gamma_prime:.6g}",
            iteration=iteration,
            dump=dump,
        )

    return PhiOutput(run, law)


def phi_map(state, c, cfg):
    """One application of the outer map.

    Returns
    -------
    tuple
        The new decoupling field and the flow of state marginals.
    """
    output = _apply(state, c, cfg, state.iteration + 1)
    return output.run.field, output.law


def solve(c, cfg, init=None):
    """Damped Picard iteration for a solution of the mean-field system.

    Parameters
    ----------
    c : :class:`.CoefficientSet`
        Coefficients, bounded for the iteration to be well defined.
    cfg : :class:`SolverConfig`
        Settings.
    init : :class:`IterationState` or tuple, optional
        Initial pair (phi, mu). Defaults to :func:`default_init`.

    Returns
    -------
    :class:`SolutionBundle`
        Non-convergence is reported through `converged`, not raised.
    """
    if init is None:
        state = default_init(c, cfg)
    elif isinstance(init, IterationState):
        state = IterationState(init.phi, init.mu_flow)
    else:
        state = IterationState(*init)

    history = []
    reflections = []
    options = cfg.w2_options()
    converged = False
    output = None
    delta_u = delta_flow = math.inf
    started = time.perf_counter()

    for iteration in range(1, cfg.max_iters + 1):
        output = _apply(state, c, cfg, iteration)
        reflections.append(output.run.paths.reflections)

        phi = state.phi.blend(output.run.field, cfg.theta)
        mu = blend_flows(state.mu_flow, output.law, cfg.theta, cfg.seed, iteration)
        delta_u = weighted_sup_distance(phi, state.phi)
        delta_flow = flow_distance(mu, state.mu_flow, **options)
        history.append((delta_u, delta_flow))

        logger.info(
            "iteration %d: delta_u = %.3e, delta_flow = %.3e", iteration, delta_u, delta_flow
        )

        state = IterationState(phi, mu, iteration, history, reflections)

        # The initial pair is not an output of Phi, so one application never certifies.
        if iteration >= 2 and delta_u <= cfg.tol_u and delta_flow <= cfg.tol_flow:
            converged = True
            break

    if not converged:
        logger.warning(
            "no convergence after %d iterations (delta_u = %.3e, delta_flow = %.3e)",
            cfg.max_iters,
            delta_u,
            delta_flow,
        )

    run = output.run
    diagnostics = {
        "bsde_residual": bsde_residual(run.paths, run.field, c, run.joint_flow),
        "sup_norm": run.field.sup_norm(),
        "lipschitz": run.field.lipschitz_estimate(),
        "holder_time": run.field.holder_time_estimate(),
        "path_moment_4": output.law.path_moment(4),
        "gamma_cap": cfg.gamma_cap,
        "lipschitz_cap": cfg.lipschitz_cap,
        "gamma_prime": cfg.gamma_prime_for(c.declared_L),
        "reflections": reflections,
        "seconds": time.perf_counter() - started,
    }

    return SolutionBundle(
        field=run.field,
        z=z_field(run.field, c, run.joint_flow),
        flow=output.law,
        joint_flow=run.joint_flow,
        paths=run.paths,
        converged=converged,
        iterations=len(history),
        delta_u=delta_u,
        delta_flow=delta_flow,
        history=history,
        diagnostics=diagnostics,
        state=state,
    )


def continuation_solve(c, cfg, init=None):
    """Solve along the truncation ladder, warm-starting each level from the previous one.

    `init` seeds the first level only.
    """
    if not cfg.truncation_ladder:
        raise ConfigurationError("needs at least one level", field="solver.truncation_ladder")

    levels = []
    bundle = None

    for n in cfg.truncation_ladder:
        if bundle is not None:
            init = (bundle.field, bundle.flow)

        try:
            current = solve(truncate(c, n), cfg, init=init)
        except DivergenceError as e:
            raise ContinuationError(
                f"truncation level {n:g} diverged: {e}",
                level=n,
                bundle=bundle,
                iteration=e.iteration,
                dump=e.dump,
            ) from e

        report = {"level": n, "converged": current.converged, "iterations": current.iterations}
        if bundle is not None:
            report["field_distance"] = weighted_sup_distance(current.field, bundle.field)
            report["flow_distance"] = flow_distance(current.flow, bundle.flow, **cfg.w2_options())
        levels.append(report)
        logger.info("truncation level %g: %s", n, report)

        bundle = current

    bundle.diagnostics["continuation"] = levels
    return bundle


@dataclass
class MultiStartResult:
    """Solutions from several initial pairs and their pairwise distances."""

    bundles: list
    field_distances: np.ndarray
    flow_distances: np.ndarray
    threshold: float

    @property
    def pairwise_distances(self):
        return np.maximum(self.field_distances, self.flow_distances)

    def n_distinct(self):
        """Number of connected components of the graph linking runs closer than the threshold."""
        n, _ = connected_components(
            csr_matrix(self.pairwise_distances <= self.threshold), directed=False
        )
        return int(n)

    @property
    def verdict(self):
        count = self.n_distinct()
        return f"{count} distinct solution{'s' if count != 1 else ''}"


def multi_start(c, cfg, inits, threads=None):
    """Solve from every initial pair and compare the solutions."""
    inits = list(inits)
    if len(inits) < 2:
        raise DomainError("multi-start needs at least two initial pairs")

    with ThreadPoolExecutor(max_workers=threads or cfg.threads) as executor:
        bundles = list(executor.map(lambda init: solve(c, cfg, init=init), inits))

    n = len(bundles)
    field_distances = np.zeros((n, n))
    flow_distances = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            field_distances[i, j] = field_distances[j, i] = weighted_sup_distance(
                bundles[i].field, bundles[j].field
            )
            flow_distances[i, j] = flow_distances[j, i] = flow_distance(
                bundles[i].flow, bundles[j].flow, **cfg.w2_options()
            )

    return MultiStartResult(
        bundles, field_distances, flow_distances, 10 * (cfg.tol_u + cfg.tol_flow)
    )
