"""Solver for the forward-backward system with a frozen measure flow.

The backward half is an explicit finite-difference sweep for the decoupling field u of the
quasilinear equation

    du/dt + 1/2 tr(a d2u/dx2) + B . du/dx + F = 0,   a = Sigma Sigma^T,

with every coefficient evaluated against the frozen joint flow. The forward half is an
Euler-Maruyama particle system driven by u and its gradient.
"""

import logging
import math
from dataclasses import dataclass
import numpy as np
from .exceptions import (
    BoxExitError,
    DivergenceError,
    DomainError,
    GridError,
    InvalidComparisonError,
    NumericError,
)
from .field import DecouplingField
from .measure import EmpiricalMeasure, MeasureFlow, diamond, w2

logger = logging.getLogger(__name__)

MAX_REFLECTION_FRACTION = 0.05
"""Share of particles allowed to touch the box boundary before a run is aborted."""


def brownian_increments(M, N, m, dt, seed, antithetic=True):
    """Brownian increments of shape (M, N, m) from a Philox stream keyed by `seed`.

    With `antithetic`, the second half of the particles receives the negated increments of the
    first half, so the empirical mean of every increment is zero.
    """
    if seed < 0:
        raise DomainError("seed must be nonnegative")

    rng = np.random.Generator(np.random.Philox(key=seed))

    if antithetic:
        half = rng.standard_normal((math.ceil(M / 2), N, m))
        draws = np.concatenate([half, -half])[:M]
    else:
        draws = rng.standard_normal((M, N, m))

    return draws * math.sqrt(dt)


@dataclass(frozen=True)
class ParticlePaths:
    """Simulated particles.

    Attributes
    ----------
    times : :class:`numpy.ndarray`
        Time nodes, shape (N + 1,).
    X, Y : :class:`numpy.ndarray`
        State and value paths, shapes (M, N + 1, d) and (M, N + 1, p).
    Z : :class:`numpy.ndarray`
        Martingale integrands, shape (M, N, p, m).
    dW : :class:`numpy.ndarray`
        Brownian increments, shape (M, N, m).
    seed : int
        Seed of the increments.
    reflections : int
        Number of particles reflected at the box boundary at least once.
    """

    times: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    dW: np.ndarray
    seed: int
    reflections: int = 0

    @property
    def M(self):
        return self.X.shape[0]

    @property
    def N(self):
        return self.X.shape[1] - 1

    @property
    def dims(self):
        return self.X.shape[2], self.Y.shape[2], self.dW.shape[2]

    def law(self):
        """Flow of empirical marginals of X."""
        return MeasureFlow.from_paths(self.times, self.X)

    def joint_cloud(self, k):
        """Empirical law of (X_{t_k}, Y_{t_k})."""
        return EmpiricalMeasure(np.hstack([self.X[:, k], self.Y[:, k]]))

    def summary(self, quantiles=(0.05, 0.5, 0.95)):
        """Per-time statistics as (header, rows)."""
        d, p, _ = self.dims
        header = ["t"]
        for name, dim in (("x", d), ("y", p)):
            for i in range(1, dim + 1):
                header += [f"mean_{name}_{i}", f"var_{name}_{i}"]
                header += [f"q{int(round(100 * q)):02d}_{name}_{i}" for q in quantiles]

        rows = []
        for k, t in enumerate(self.times):
            row = [t]
            for values in (self.X[:, k], self.Y[:, k]):
                for column in values.T:
                    row += [column.mean(), column.var()]
                    row += list(np.quantile(column, quantiles))
            rows.append(row)

        return header, rows


def _derivatives(values, grid):
    """Gradient (n, p, d) and Hessian (n, p, d, d) of one level of nodal values.

    Boundary nodes use an odd reflection (ghost = 2 u_0 - u_1), which makes the gradient one-sided
    and the second derivative normal to the boundary vanish there.
    """
    d = grid.d
    V = values.reshape(grid.shape + (values.shape[-1],))
    gradients = []
    hessian = [[None] * d for _ in range(d)]

    for i, h in enumerate(grid.dx):
        width = [(0, 0)] * V.ndim
        width[i] = (1, 1)
        P = np.pad(V, width, mode="reflect", reflect_type="odd")
        upper = np.take(P, range(2, P.shape[i]), axis=i)
        lower = np.take(P, range(0, P.shape[i] - 2), axis=i)
        gradients.append((upper - lower) / (2 * h))
        hessian[i][i] = (upper - 2 * V + lower) / h ** 2

    for i in range(d):
        for j in range(i + 1, d):
            cross = np.gradient(gradients[i], grid.dx[j], axis=j, edge_order=1)
            hessian[i][j] = hessian[j][i] = cross

    n = grid.n_nodes
    D = np.stack(gradients, axis=-1).reshape(n, -1, d)
    H = np.stack([np.stack(row, axis=-1) for row in hessian], axis=-2).reshape(n, -1, d, d)

    return D, H


def solve_backward(c, flow, terminal_mu, grid, gamma_cap=math.inf):
    """Decoupling field of the system with the joint flow `flow` frozen.

    Each output interval [t_k, t_{k+1}] is covered by as many explicit sub-steps as the stability
    bound requires. A sub-step ending at time s evaluates the coefficients at s, with the values of
    the already-computed later level and the flow node nearest to s; the last sub-step of every
    interval therefore uses nu_{t_k}.

    Parameters
    ----------
    c : :class:`.CoefficientSet`
        Coefficients.
    flow : :class:`.MeasureFlow`
        Joint flow on R^(d+p) on the time nodes of `grid`.
    terminal_mu : :class:`.EmpiricalMeasure`
        Measure passed to the terminal condition.
    grid : :class:`.GridSpec`
        Discretization.
    gamma_cap : float, optional
        Bound on |u|; sweeps exceeding ten times this value abort.

    Returns
    -------
    :class:`.DecouplingField`
    """
    times = grid.times
    if len(flow) != len(times) or not np.allclose(flow.times, times):
        raise GridError("flow time nodes do not match the grid")

    nodes = grid.nodes
    U = c.terminal(nodes, terminal_mu)
    levels = [None] * (grid.n_t + 1)
    levels[grid.n_t] = U

    for k in range(grid.n_t - 1, -1, -1):
        probe = c.volatility(times[k], nodes, U, flow[k])
        a_max = float(np.max(np.linalg.eigvalsh(np.einsum("ndm,nem->nde", probe, probe))))
        n_sub = grid.substeps_for(a_max)
        delta = grid.dt / n_sub

        for j in range(1, n_sub + 1):
            s = times[k] if j == n_sub else times[k + 1] - j * delta
            mu = flow[k + 1] if times[k + 1] - s < s - times[k] else flow[k]

            D, H = _derivatives(U, grid)
            sigma = c.volatility(s, nodes, U, mu)
            Z = np.einsum("npd,ndm->npm", D, sigma)
            b = c.drift(s, nodes, U, Z, mu)
            f = c.driver(s, nodes, U, Z, mu)
            a = np.einsum("ndm,nem->nde", sigma, sigma)

            U = U + delta * (
                0.5 * np.einsum("nde,npde->np", a, H) + np.einsum("nd,npd->np", b, D) + f
            )

            if not np.all(np.isfinite(U)):
                row = int(np.argwhere(~np.isfinite(U))[0][0])
                raise NumericError(
                    "non-finite value in backward sweep",
                    context={"t": float(s), "node": nodes[row].tolist()},
                )

        sup = float(np.max(np.linalg.norm(U, axis=-1)))
        if sup > 10 * gamma_cap:
            raise DivergenceError(
                f"backward sweep reached |u| = {sup:.6g} at t = {times[k]:.6g}, "
                f"more than ten times the cap {gamma_cap:.6g}",
                dump={"t": float(times[k]), "sup_norm": sup},
            )

        levels[k] = U

    values = np.stack(levels).reshape((grid.n_t + 1,) + grid.shape + (c.p,))
    return DecouplingField(grid, values)


class ZField:
    """The map v(t, x) = du/dx(t, x) Sigma(t, x, u(t, x), nu_t)."""

    def __init__(self, field, c, flow):
        self.field = field
        self.coefficients = c
        self.flow = flow

    def at_node(self, k, x, y=None):
        """Evaluate at time node `k`, optionally reusing precomputed values y = u(t_k, x)."""
        x = np.asarray(x, dtype=float).reshape(-1, self.field.grid.d)
        if y is None:
            y = self.field.interpolate(k, x)
        gradient = self.field.gradient_at(k, x)
        sigma = self.coefficients.volatility(self.field.grid.times[k], x, y, self.flow[k])
        return np.einsum("npd,ndm->npm", gradient, sigma)

    def __call__(self, t, x):
        return self.at_node(self.field.grid.nearest_index(t), x)


def z_field(field, c, flow):
    """The martingale integrand v as a function of (t, x)."""
    return ZField(field, c, flow)


def _reflect(x, x_max):
    """Reflect points back into the box; returns the points and a per-row hit mask."""
    bound = np.asarray(x_max)
    hit = np.any(np.abs(x) > bound, axis=1)

    if np.any(hit):
        x = np.where(x > bound, 2 * bound - x, x)
        x = np.where(x < -bound, -2 * bound - x, x)
        x = np.clip(x, -bound, bound)

    return x, hit


def simulate_forward(
    c,
    field,
    flow,
    M,
    seed,
    x0,
    antithetic=True,
    max_reflection_fraction=MAX_REFLECTION_FRACTION,
    increments=None,
):
    """Euler-Maruyama particles driven by the decoupling field.

    Parameters
    ----------
    c : :class:`.CoefficientSet`
        Coefficients.
    field : :class:`.DecouplingField`
        Decoupling field u; Y is read off as u(t_k, X_k) and Z as v(t_k, X_k).
    flow : :class:`.MeasureFlow`
        Frozen joint flow passed to the coefficients.
    M : int
        Number of particles.
    seed : int
        Seed of the Brownian increments.
    x0 : array_like
        Starting point, inside the grid box.
    antithetic : bool
        Draw antithetic increments.
    max_reflection_fraction : float
        Largest share of particles that may be reflected at the box boundary.
    increments : :class:`numpy.ndarray`, optional
        Precomputed increments of shape (M, N, m), overriding `seed`.

    Returns
    -------
    :class:`ParticlePaths`
    """
    grid = field.grid
    d, p, m = c.dims
    times = grid.times
    N = grid.n_t

    if len(flow) != len(times) or not np.allclose(flow.times, times):
        raise GridError("flow time nodes do not match the grid")

    x0 = np.asarray(x0, dtype=float).reshape(d)
    if not grid.contains(x0):
        raise DomainError(f"starting point {x0.tolist()} lies outside the grid box")

    if increments is None:
        dW = brownian_increments(M, N, m, grid.dt, seed, antithetic=antithetic)
    else:
        dW = np.asarray(increments, dtype=float)

    zf = z_field(field, c, flow)
    X = np.empty((M, N + 1, d))
    Y = np.empty((M, N + 1, p))
    Z = np.empty((M, N, p, m))
    X[:, 0] = x0
    reflected = np.zeros(M, dtype=bool)

    for k in range(N):
        x = X[:, k]
        y = field.interpolate(k, x)
        z = zf.at_node(k, x, y)
        Y[:, k] = y
        Z[:, k] = z

        b = c.drift(times[k], x, y, z, flow[k])
        sigma = c.volatility(times[k], x, y, flow[k])
        x_next, hit = _reflect(
            x + b * grid.dt + np.einsum("ndm,nm->nd", sigma, dW[:, k]), grid.x_max
        )
        reflected |= hit
        X[:, k + 1] = x_next

    Y[:, N] = field.interpolate(N, X[:, N])

    count = int(reflected.sum())
    if count > max_reflection_fraction * M:
        raise BoxExitError(
            f"{count} of {M} particles left the box [-{max(grid.x_max)}, {max(grid.x_max)}]; "
            f"enlarge grid.x_max",
            dump={"reflections": count},
        )
    if count:
        logger.warning("%d of %d particles were reflected at the box boundary", count, M)

    return ParticlePaths(times, X, Y, Z, dW, seed, count)


def bsde_residual(paths, field, c, flow):
    """Root mean square of the one-step backward equation defects along the particles.

    The defect at step k is Y_{k+1} - Y_k + F(t_k, X_k, Y_k, Z_k, nu_k) dt - Z_k dW_k.
    """
    dt = field.grid.dt
    squares = 0.0

    for k in range(paths.N):
        f = c.driver(paths.times[k], paths.X[:, k], paths.Y[:, k], paths.Z[:, k], flow[k])
        defect = (
            paths.Y[:, k + 1]
            - paths.Y[:, k]
            + f * dt
            - np.einsum("npm,nm->np", paths.Z[:, k], paths.dW[:, k])
        )
        squares += float(np.sum(defect ** 2))

    return math.sqrt(squares / (paths.M * paths.N))


@dataclass(frozen=True)
class FrozenRun:
    """Inputs and outputs of one frozen-flow solve.

    Attributes
    ----------
    phi : :class:`.DecouplingField`
        Input field.
    mu : :class:`.MeasureFlow`
        Input state flow on R^d.
    field : :class:`.DecouplingField`
        Output decoupling field.
    joint_flow : :class:`.MeasureFlow`
        The lifted input flow passed to the coefficients.
    paths : :class:`ParticlePaths`
        Output particles.
    """

    phi: DecouplingField
    mu: MeasureFlow
    field: DecouplingField
    joint_flow: MeasureFlow
    paths: ParticlePaths


def lift_flow(phi, mu):
    """The joint flow t -> phi(t, .) <> mu_t."""
    grid = phi.grid
    return MeasureFlow(
        grid.times,
        [diamond(lambda x, k=k: phi.interpolate(k, x), mu[k]) for k in range(grid.n_t + 1)],
    )


def solve_frozen(c, phi, mu, M, seed, x0, gamma_cap=math.inf, **kwargs):
    """Solve the system with input field `phi` and state flow `mu` frozen in the coefficients."""
    joint = lift_flow(phi, mu)
    field = solve_backward(c, joint, mu[-1], phi.grid, gamma_cap=gamma_cap)
    paths = simulate_forward(c, field, joint, M, seed, x0, **kwargs)
    return FrozenRun(phi, mu, field, joint, paths)


@dataclass
class StabilityGap:
    lhs: float
    rhs: float
    ratio: float
    within_cap: bool = True


def stability_gap(run1, run2, Gamma_cap=None, **w2_options):
    """Pathwise output gap between two coupled frozen runs against the gap of their inputs.

    lhs = E sup|X - X'|^2 + E sup|Y - Y'|^2 + E sum |Z - Z'|^2 dt over matched particles;
    rhs = W2(mu_T, mu'_T)^2 + sum_k W2(phi_k <> mu_k, phi'_k <> mu'_k)^2 dt.
    """
    p1, p2 = run1.paths, run2.paths

    if p1.seed != p2.seed or p1.X.shape != p2.X.shape or not np.array_equal(p1.dW, p2.dW):
        raise InvalidComparisonError(
            "runs must share grid, particle count and Brownian increments"
        )

    dt = run1.field.grid.dt
    lhs = (
        np.mean(np.max(np.sum((p1.X - p2.X) ** 2, axis=-1), axis=1))
        + np.mean(np.max(np.sum((p1.Y - p2.Y) ** 2, axis=-1), axis=1))
        + np.mean(np.sum((p1.Z - p2.Z) ** 2, axis=(1, 2, 3))) * dt
    )
    rhs = w2(run1.mu[-1], run2.mu[-1], **w2_options) ** 2 + dt * sum(
        w2(run1.joint_flow[k], run2.joint_flow[k], **w2_options) ** 2
        for k in range(p1.N)
    )

    lhs, rhs = float(lhs), float(rhs)
    if rhs == 0:
        ratio = 0.0 if lhs == 0 else math.inf
    else:
        ratio = lhs / rhs

    within = True if Gamma_cap is None else ratio <= Gamma_cap
    return StabilityGap(lhs, rhs, ratio, within)
