"""Empirical measures, measure flows and 2-Wasserstein distances."""

import logging
from collections import namedtuple
from functools import cached_property
import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from .exceptions import (
    CapacityError,
    DimensionError,
    DomainError,
    GridError,
    NumericError,
    UnsupportedInputError,
)

logger = logging.getLogger(__name__)

ASSIGNMENT_CAP = 512
"""Largest cloud handled by the exact assignment distance."""

N_PROJECTIONS = 64
"""Default number of directions for the sliced distance."""

BoundCheck = namedtuple("BoundCheck", ["lhs", "rhs", "holds"])


class EmpiricalMeasure:
    """Weighted particle cloud on R^k.

    Parameters
    ----------
    points : array_like
        Atoms, of shape (M, k). One-dimensional input is read as M atoms in R^1.
    weights : array_like, optional
        Nonnegative weights summing to one. Defaults to uniform weights 1/M.
    """

    def __init__(self, points, weights=None):
        points = np.array(points, dtype=float)

        if points.ndim == 1:
            points = points[:, None]
        if points.ndim != 2 or points.shape[1] < 1:
            raise DimensionError(f"points must have shape (M, k), got {points.shape}")
        if points.shape[0] == 0:
            raise DomainError("empirical measure needs at least one atom")
        if not np.all(np.isfinite(points)):
            row = int(np.argwhere(~np.isfinite(points))[0][0])
            raise NumericError("non-finite atom", context={"atom": points[row].tolist()})

        if weights is None:
            weights = np.full(points.shape[0], 1 / points.shape[0])
            uniform = True
        else:
            weights = np.array(weights, dtype=float).ravel()
            if weights.shape[0] != points.shape[0]:
                raise DimensionError(
                    f"{weights.shape[0]} weights given for {points.shape[0]} atoms"
                )
            if np.any(weights < 0) or abs(weights.sum() - 1) > 1e-12:
                raise DomainError("weights must be nonnegative and sum to 1")
            uniform = bool(np.ptp(weights) <= 1e-15)

        points.setflags(write=False)
        weights.setflags(write=False)
        self.points = points
        self.weights = weights
        self.is_uniform = uniform

    @classmethod
    def dirac(cls, point):
        """Unit mass at `point`."""
        return cls(np.atleast_1d(np.asarray(point, dtype=float))[None, :])

    @property
    def dim(self):
        """Dimension k of the atoms."""
        return self.points.shape[1]

    @property
    def size(self):
        """Number of atoms M."""
        return self.points.shape[0]

    def __len__(self):
        return self.size

    @cached_property
    def mean(self):
        """First moment, a vector of R^k."""
        return self.weights @ self.points

    @cached_property
    def second_moment(self):
        """Matrix of second moments E[x x^T]."""
        return (self.points * self.weights[:, None]).T @ self.points

    @cached_property
    def square_moment(self):
        """Scalar moment E|x|^2."""
        return float(self.weights @ np.einsum("ij,ij->i", self.points, self.points))

    def marginal(self, coordinates):
        """Image of the measure under projection onto `coordinates`."""
        if isinstance(coordinates, slice):
            coordinates = range(self.dim)[coordinates]
        return EmpiricalMeasure(self.points[:, list(coordinates)], self._weights_or_none())

    def shifted(self, offset):
        """The measure translated by `offset`."""
        points = self.points + np.asarray(offset, dtype=float)
        return EmpiricalMeasure(points, self._weights_or_none())

    def _weights_or_none(self):
        return None if self.is_uniform else self.weights

    def __repr__(self):
        return f"{self.__class__.__name__}(size={self.size}, dim={self.dim})"


class MeasureFlow:
    """One empirical measure per node of a time grid.

    Parameters
    ----------
    times : array_like
        Strictly increasing time nodes.
    measures : sequence of :class:`EmpiricalMeasure`
        Measures of equal dimension, one per time node.
    """

    def __init__(self, times, measures):
        times = np.array(times, dtype=float)
        measures = tuple(measures)

        if times.ndim != 1 or len(times) != len(measures):
            raise DimensionError(f"{len(measures)} measures given for {times.size} time nodes")
        if np.any(np.diff(times) <= 0):
            raise DomainError("time nodes must be strictly increasing")
        if len({measure.dim for measure in measures}) > 1:
            raise DimensionError("all measures of a flow must share their dimension")

        times.setflags(write=False)
        self.times = times
        self.measures = measures

    @classmethod
    def from_paths(cls, times, paths):
        """Flow of empirical marginals of particle paths of shape (M, N + 1, k)."""
        paths = np.asarray(paths, dtype=float)
        if paths.ndim == 2:
            paths = paths[..., None]
        return cls(times, [EmpiricalMeasure(paths[:, k]) for k in range(paths.shape[1])])

    @property
    def dim(self):
        return self.measures[0].dim

    def __len__(self):
        return len(self.measures)

    def __getitem__(self, k):
        return self.measures[k]

    def __iter__(self):
        return iter(self.measures)

    def stack(self):
        """Atoms of every time node as an array of shape (M, N + 1, k).

        Only meaningful for flows built from aligned particle paths.
        """
        sizes = {measure.size for measure in self.measures}
        if len(sizes) > 1:
            raise UnsupportedInputError("flow measures have different particle counts")
        return np.stack([measure.points for measure in self.measures], axis=1)

    def marginal(self, coordinates):
        return MeasureFlow(self.times, [measure.marginal(coordinates) for measure in self.measures])

    def means(self):
        """Means at every time node, of shape (N + 1, k)."""
        return np.stack([measure.mean for measure in self.measures])

    def path_moment(self, power):
        """Moment E[sup_t |X_t|^power] over aligned particle paths."""
        norms = np.linalg.norm(self.stack(), axis=-1)
        return float(np.mean(np.max(norms, axis=1) ** power))

    def same_times(self, other):
        return len(self.times) == len(other.times) and np.allclose(self.times, other.times)

    def __repr__(self):
        return f"{self.__class__.__name__}(nodes={len(self)}, dim={self.dim})"


def _rows(f, points):
    """Evaluate a vectorized function on atoms, returning shape (M, q)."""
    values = np.asarray(f(points), dtype=float)
    size = points.shape[0]

    if values.ndim == 0:
        values = np.full((size, 1), float(values))
    elif values.ndim == 1:
        if values.shape[0] == size:
            values = values[:, None]
        else:
            values = np.broadcast_to(values, (size, values.shape[0]))

    if values.shape[0] != size:
        raise DimensionError(f"function returned {values.shape[0]} rows for {size} atoms")

    return values


def integrate(mu, f):
    """Integral of the vectorized function `f` against `mu`.

    Returns
    -------
    :class:`numpy.ndarray`
        Vector of R^q.
    """
    values = _rows(f, mu.points)

    if not np.all(np.isfinite(values)):
        row = int(np.argwhere(~np.isfinite(values))[0][0])
        raise NumericError("integrand is not finite", context={"atom": mu.points[row].tolist()})

    return mu.weights @ values


def diamond(psi, mu):
    """Lift `mu` on R^d to the image of x -> (x, psi(x)) on R^(d+p).

    Weights are carried over unchanged, so the first d coordinates of the result reproduce `mu`
    atom by atom.
    """
    values = _rows(psi, mu.points)

    if not np.all(np.isfinite(values)):
        row = int(np.argwhere(~np.isfinite(values))[0][0])
        raise NumericError(
            "lifted function is not finite", context={"atom": mu.points[row].tolist()}
        )

    return EmpiricalMeasure(np.hstack([mu.points, values]), mu._weights_or_none())


def w2_1d(a, b):
    """Exact W2 between measures on the real line via the monotone coupling."""
    if a.dim != 1 or b.dim != 1:
        raise DimensionError(f"w2_1d needs one-dimensional measures, got {a.dim} and {b.dim}")

    xa = np.sort(a.points[:, 0])
    xb = np.sort(b.points[:, 0])

    if a.is_uniform and b.is_uniform and a.size == b.size:
        return float(np.sqrt(np.mean((xa - xb) ** 2)))

    order_a = np.argsort(a.points[:, 0], kind="stable")
    order_b = np.argsort(b.points[:, 0], kind="stable")
    cum_a = np.cumsum(a.weights[order_a])
    cum_b = np.cumsum(b.weights[order_b])

    # Common refinement of both quantile functions.
    levels = np.union1d(np.minimum(cum_a, 1.0), np.minimum(cum_b, 1.0))
    breaks = np.concatenate([[0.0], levels])
    widths = np.diff(breaks)
    middles = breaks[:-1] + widths / 2

    ia = np.minimum(np.searchsorted(cum_a, middles), a.size - 1)
    ib = np.minimum(np.searchsorted(cum_b, middles), b.size - 1)

    return float(np.sqrt(np.sum(widths * (xa[ia] - xb[ib]) ** 2)))


def w2_assignment(a, b, cap=ASSIGNMENT_CAP):
    """Exact W2 between equal-size uniform clouds via optimal assignment."""
    if a.dim != b.dim:
        raise DimensionError(f"cannot compare measures on R^{a.dim} and R^{b.dim}")
    if a.size != b.size or not (a.is_uniform and b.is_uniform):
        raise UnsupportedInputError(
            "exact assignment needs uniform clouds with equal particle counts"
        )
    if a.size > cap:
        raise CapacityError(
            f"{a.size} particles exceed the assignment cap of {cap}; use w2_sliced instead"
        )

    cost = cdist(a.points, b.points, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)

    return float(np.sqrt(cost[rows, cols].sum() / a.size))


def w2_sliced(a, b, n_projections=N_PROJECTIONS, seed=0):
    """Sliced W2: mean of exact one-dimensional distances over random directions."""
    if n_projections < 1:
        raise DomainError("n_projections must be positive")
    if a.dim != b.dim:
        raise DimensionError(f"cannot compare measures on R^{a.dim} and R^{b.dim}")

    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((n_projections, a.dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    if a.is_uniform and b.is_uniform and a.size == b.size:
        pa = np.sort(a.points @ directions.T, axis=0)
        pb = np.sort(b.points @ directions.T, axis=0)
        return float(np.mean(np.sqrt(np.mean((pa - pb) ** 2, axis=0))))

    distances = [
        w2_1d(
            EmpiricalMeasure(a.points @ e, a._weights_or_none()),
            EmpiricalMeasure(b.points @ e, b._weights_or_none()),
        )
        for e in directions
    ]
    return float(np.mean(distances))


def w2(a, b, cap=ASSIGNMENT_CAP, n_projections=N_PROJECTIONS, seed=0):
    """W2 with the cheapest exact method available, sliced above the assignment cap."""
    if a.dim == 1 and b.dim == 1:
        return w2_1d(a, b)
    if a.size <= cap and b.size <= cap:
        return w2_assignment(a, b, cap=cap)
    return w2_sliced(a, b, n_projections=n_projections, seed=seed)


def flow_distance(flow1, flow2, **kwargs):
    """Largest W2 distance between the marginals of two flows over the time nodes."""
    if not flow1.same_times(flow2):
        raise GridError("flows are defined on different time grids")
    return max(w2(a, b, **kwargs) for a, b in zip(flow1, flow2))


def weighted_sup_distance(u1, u2):
    """Exponentially weighted sup distance max e^(-|x|) |u1(t, x) - u2(t, x)| over grid nodes."""
    if not u1.grid.same_as(u2.grid):
        raise GridError("fields are defined on different grids")

    difference = np.linalg.norm(u1.values - u2.values, axis=-1)
    return float(np.max(np.exp(-u1.grid.node_norms) * difference))


def _exact_w2(a, b, cap):
    return w2_1d(a, b) if a.dim == 1 else w2_assignment(a, b, cap=cap)


def preW2_bound_check(phi, phi_prime, mu, mu_prime, C, cap=ASSIGNMENT_CAP):
    """Compare W2(phi <> mu, phi' <> mu') with C times its three-term upper bound.

    The bound is W2(phi(mu), phi(mu')) + W2(mu, mu') + (int |phi - phi'|^2 dmu')^(1/2), where
    phi(mu) denotes the image measure of `mu` under `phi`.

    Returns
    -------
    :class:`BoundCheck`
        Left-hand side, bracketed right-hand side and whether lhs <= C * rhs.
    """
    lhs = _exact_w2(diamond(phi, mu), diamond(phi_prime, mu_prime), cap)

    image = EmpiricalMeasure(_rows(phi, mu.points), mu._weights_or_none())
    image_prime = EmpiricalMeasure(_rows(phi, mu_prime.points), mu_prime._weights_or_none())
    gap = _rows(phi, mu_prime.points) - _rows(phi_prime, mu_prime.points)

    rhs = (
        _exact_w2(image, image_prime, cap)
        + _exact_w2(mu, mu_prime, cap)
        + float(np.sqrt(mu_prime.weights @ np.sum(gap ** 2, axis=1)))
    )

    return BoundCheck(lhs, rhs, lhs <= C * rhs + 1e-12)
