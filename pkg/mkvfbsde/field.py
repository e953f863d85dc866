"""Space-time grids and decoupling fields.

A :class:`DecouplingField` stores the values of a function u: [0,T] x R^d -> R^p on the nodes of a
:class:`GridSpec`. Evaluation is multilinear in space and nearest-node in time. Outside the spatial
box the field is extrapolated linearly, which is the clamped-gradient boundary condition used by the
backward solver.
"""

import math
from functools import cached_property, partial
import numpy as np
from scipy.interpolate import RegularGridInterpolator
from .exceptions import ConfigurationError, DimensionError, GridError, NumericError

BOUNDARY_CONDITIONS = ("clamped-gradient",)
"""Supported spatial boundary conditions."""


def default_box(x0, a_max, horizon, drift_bound=0.0):
    """Half-width of a spatial box that particles rarely leave.

    Six diffusive standard deviations around the starting point plus the distance the drift can
    carry a particle over the horizon.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    return float(np.max(np.abs(x0)) + 6 * math.sqrt(a_max * horizon) + drift_bound * horizon)


class GridSpec:
    """Uniform discretization of [0,T] x [-x_max, x_max]^d.

    Parameters
    ----------
    horizon : float
        Terminal time T.
    n_t : int
        Number of time steps N; the grid has N + 1 time nodes.
    x_max : float or sequence of float
        Half-width of the box along each axis.
    n_x : int or sequence of int
        Number of nodes along each axis.
    cfl_factor : float, optional
        Safety factor of the explicit scheme, at most 1/(2d). Defaults to 0.25/d.
    substeps : int, optional
        Fixed number of backward sub-steps per time interval. By default the count is chosen per
        interval to satisfy the step-size bound.
    boundary : str
        Spatial boundary condition.
    """

    def __init__(
        self,
        horizon,
        n_t,
        x_max,
        n_x,
        cfl_factor=None,
        substeps=None,
        boundary="clamped-gradient",
    ):
        x_max = tuple(float(v) for v in np.atleast_1d(x_max))
        n_x = tuple(int(v) for v in np.atleast_1d(n_x))

        if len(x_max) == 1 and len(n_x) > 1:
            x_max = x_max * len(n_x)
        if len(n_x) == 1 and len(x_max) > 1:
            n_x = n_x * len(x_max)
        if len(x_max) != len(n_x):
            raise DimensionError(
                f"x_max has {len(x_max)} axes but n_x has {len(n_x)}"
            )
        if len(n_x) > 2:
            raise DimensionError(
                f"grids are supported for d <= 2 only (got d = {len(n_x)})"
            )

        self.horizon = float(horizon)
        self.n_t = int(n_t)
        self.x_max = x_max
        self.n_x = n_x
        self.boundary = boundary
        self.substeps = None if substeps is None else int(substeps)
        self.cfl_factor = 0.25 / self.d if cfl_factor is None else float(cfl_factor)

        if not self.horizon > 0:
            raise ConfigurationError("must be positive", field="grid.horizon")
        if self.n_t < 1:
            raise ConfigurationError("must be at least 1", field="grid.n_t")
        if any(n < 3 for n in self.n_x):
            raise ConfigurationError("every axis needs at least 3 nodes", field="grid.n_x")
        if any(not v > 0 for v in self.x_max):
            raise ConfigurationError("must be positive", field="grid.x_max")
        if not 0 < self.cfl_factor <= 1 / (2 * self.d):
            raise ConfigurationError(
                f"must lie in (0, {1 / (2 * self.d)}]", field="grid.cfl_factor"
            )
        if self.substeps is not None and self.substeps < 1:
            raise ConfigurationError("must be at least 1", field="grid.substeps")
        if boundary not in BOUNDARY_CONDITIONS:
            raise ConfigurationError(
                f"unknown boundary condition {boundary!r}", field="grid.boundary"
            )

    @property
    def d(self):
        """Spatial dimension."""
        return len(self.n_x)

    @cached_property
    def times(self):
        """Time nodes t_0 = 0 < ... < t_N = T."""
        times = np.linspace(0.0, self.horizon, self.n_t + 1)
        times.setflags(write=False)
        return times

    @property
    def dt(self):
        """Time step."""
        return self.horizon / self.n_t

    @cached_property
    def axes(self):
        """Node coordinates along each axis."""
        return tuple(np.linspace(-xm, xm, n) for xm, n in zip(self.x_max, self.n_x))

    @property
    def dx(self):
        """Node spacing along each axis."""
        return tuple(2 * xm / (n - 1) for xm, n in zip(self.x_max, self.n_x))

    @property
    def shape(self):
        """Shape of one time level of nodes."""
        return self.n_x

    @property
    def n_nodes(self):
        """Number of spatial nodes."""
        return int(np.prod(self.n_x))

    @cached_property
    def nodes(self):
        """Spatial nodes as an array of shape (n_nodes, d), in C order of :attr:`shape`."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        nodes = np.stack([m.ravel() for m in mesh], axis=-1)
        nodes.setflags(write=False)
        return nodes

    @cached_property
    def node_norms(self):
        """Euclidean norm of every node, shaped like :attr:`shape`."""
        return np.linalg.norm(self.nodes, axis=-1).reshape(self.shape)

    def max_stable_dt(self, a_max):
        """Largest explicit step allowed for diffusion matrices with top eigenvalue `a_max`."""
        if a_max <= 0:
            return math.inf
        return self.cfl_factor * min(self.dx) ** 2 / a_max

    def substeps_for(self, a_max):
        """Number of backward sub-steps per time interval.

        Raises
        ------
        :class:`.ConfigurationError`
            If a fixed sub-step count is configured and violates the step-size bound.
        """
        max_dt = self.max_stable_dt(a_max)

        if self.substeps is None:
            if math.isinf(max_dt):
                return 1
            return max(1, math.ceil(self.dt / max_dt * (1 - 1e-12)))

        if self.dt / self.substeps > max_dt * (1 + 1e-12):
            raise ConfigurationError(
                f"backward step {self.dt / self.substeps:.6g} exceeds the stability bound; "
                f"a time step of at most {max_dt * self.substeps:.6g} is required "
                f"({self.substeps} sub-steps, a_max = {a_max:.6g})",
                field="grid.n_t",
                required_dt=max_dt * self.substeps,
            )

        return self.substeps

    def nearest_index(self, t):
        """Index of the time node nearest to `t` (ties go to the earlier node)."""
        k = math.ceil(float(t) / self.dt - 0.5)
        return min(max(k, 0), self.n_t)

    def contains(self, x):
        """Whether the point `x` lies in the closed box."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return bool(np.all(np.abs(x) <= np.asarray(self.x_max)))

    def same_as(self, other):
        """Whether `other` discretizes the same domain with the same nodes."""
        return (
            self.horizon == other.horizon
            and self.n_t == other.n_t
            and self.x_max == other.x_max
            and self.n_x == other.n_x
        )

    def to_dict(self):
        """Plain representation for manifests."""
        return {
            "horizon": self.horizon,
            "n_t": self.n_t,
            "x_max": list(self.x_max),
            "n_x": list(self.n_x),
            "cfl_factor": self.cfl_factor,
            "substeps": "auto" if self.substeps is None else self.substeps,
            "boundary": self.boundary,
        }

    def __repr__(self):
        return (
            f"{self.__class__.__name__}(horizon={self.horizon}, n_t={self.n_t}, "
            f"x_max={self.x_max}, n_x={self.n_x})"
        )


class DecouplingField:
    """Grid representation of a function u: [0,T] x R^d -> R^p.

    Parameters
    ----------
    grid : :class:`GridSpec`
        The grid.
    values : array_like
        Values of shape (N + 1, *grid.shape, p).
    """

    def __init__(self, grid, values):
        values = np.array(values, dtype=float)
        expected = (grid.n_t + 1,) + grid.shape

        if values.shape[:-1] != expected:
            raise GridError(
                f"values of shape {values.shape} do not fit a grid of shape {expected} + (p,)"
            )
        if not np.all(np.isfinite(values)):
            k, *node = np.argwhere(~np.isfinite(values))[0][:-1]
            raise NumericError(
                f"non-finite field value at time index {k}",
                context={
                    "t": float(grid.times[k]),
                    "node": [ax[i] for ax, i in zip(grid.axes, node)],
                },
            )

        values.setflags(write=False)
        self.grid = grid
        self.values = values
        self._interpolators = {}
        self._gradient_interpolators = {}

    @classmethod
    def from_function(cls, grid, function):
        """Tabulate `function(t, x)` with x of shape (n_nodes, d) at every time node."""
        levels = []

        for t in grid.times:
            level = np.asarray(function(t, grid.nodes), dtype=float)
            if level.ndim == 1:
                level = level[:, None]
            levels.append(level.reshape(grid.shape + (level.shape[-1],)))

        return cls(grid, np.stack(levels))

    @classmethod
    def constant(cls, grid, value):
        """Field equal to `value` everywhere."""
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.broadcast_to(value, (grid.n_t + 1,) + grid.shape + value.shape))

    @property
    def p(self):
        """Dimension of the field values."""
        return self.values.shape[-1]

    def level(self, k):
        """Values at time node `k` as an array of shape (n_nodes, p)."""
        return self.values[k].reshape(self.grid.n_nodes, self.p)

    def interpolate(self, k, x):
        """Evaluate the field at time node `k` and points `x` of shape (n, d)."""
        if k not in self._interpolators:
            self._interpolators[k] = RegularGridInterpolator(
                self.grid.axes, self.values[k], bounds_error=False, fill_value=None
            )
        x = np.asarray(x, dtype=float).reshape(-1, self.grid.d)
        return self._interpolators[k](x)

    def __call__(self, t, x):
        return self.interpolate(self.grid.nearest_index(t), x)

    def slice(self, t):
        """The map x -> u(t, x) at the time node nearest to `t`."""
        return partial(self.interpolate, self.grid.nearest_index(t))

    def gradient(self, k):
        """Finite-difference gradient at time node `k`, of shape (*grid.shape, p, d).

        Central differences at interior nodes, one-sided differences at boundary nodes.
        """
        axes = tuple(range(self.grid.d))
        grads = np.gradient(self.values[k], *self.grid.dx, axis=axes, edge_order=1)
        if not isinstance(grads, (list, tuple)):
            grads = [grads]
        return np.stack(grads, axis=-1)

    def gradient_at(self, k, x):
        """Gradient at time node `k` interpolated at points `x`, of shape (n, p, d)."""
        if k not in self._gradient_interpolators:
            self._gradient_interpolators[k] = RegularGridInterpolator(
                self.grid.axes, self.gradient(k), bounds_error=False, fill_value=None
            )
        x = np.asarray(x, dtype=float).reshape(-1, self.grid.d)
        return self._gradient_interpolators[k](x)

    def sup_norm(self):
        """Largest Euclidean norm over all nodes."""
        return float(np.max(np.linalg.norm(self.values, axis=-1)))

    def lipschitz_estimate(self):
        """Largest slope between adjacent nodes along any axis."""
        slopes = [
            np.max(np.linalg.norm(np.diff(self.values, axis=axis + 1), axis=-1)) / h
            for axis, h in enumerate(self.grid.dx)
        ]
        return float(max(slopes))

    def holder_time_estimate(self):
        """Largest ratio |u(t_{k+1}, x) - u(t_k, x)| / dt^(1/2) over nodes."""
        jumps = np.linalg.norm(np.diff(self.values, axis=0), axis=-1)
        return float(np.max(jumps) / math.sqrt(self.grid.dt))

    def blend(self, other, theta):
        """Nodewise convex combination (1 - theta) * self + theta * other."""
        if not self.grid.same_as(other.grid):
            raise GridError("cannot blend fields defined on different grids")
        if theta == 1:
            return other
        return DecouplingField(self.grid, (1 - theta) * self.values + theta * other.values)

    def rows(self):
        """Yield (t, x_1.., u_1..) tuples for every node, time-major."""
        for k, t in enumerate(self.grid.times):
            for x, u in zip(self.grid.nodes, self.level(k)):
                yield (t, *x, *u)

    def __repr__(self):
        return f"{self.__class__.__name__}(grid={self.grid!r}, p={self.p})"
