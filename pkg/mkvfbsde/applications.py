"""Adjoint systems of mean-field control problems.

A :class:`ControlProblem` describes a controlled McKean-Vlasov diffusion

    dX_t = b(t, X_t, law(X_t), alpha_t) dt + sigma dW_t

with running cost f(t, x, mu, alpha) and terminal cost g(x, mu). The stochastic maximum principle
turns both the mean field game and the control of McKean-Vlasov dynamics into forward-backward
systems of mean-field type, assembled here as :class:`.CoefficientSet` bundles.

Callables are vectorized over a leading batch axis:

- ``b(t, x[n, d], mu, alpha[n, k]) -> [n, d]``, ``f(...) -> [n]``, ``g(x[n, d], mu) -> [n]``
- ``dx_b(...) -> [n, d, d]`` with ``dx_b[:, i, j] = d b_i / d x_j``; ``dx_f(...) -> [n, d]``;
  ``dx_g(x, mu) -> [n, d]``
- ``dmu_b(t, x_tilde[n, d], mu, alpha[n, k], v[n, d]) -> [n, d, d]``, ``dmu_f(...) -> [n, d]``,
  ``dmu_g(x_tilde[n, d], mu, v[n, d]) -> [n, d]``: Lions derivatives in the measure argument,
  evaluated at the point v
- ``alpha_hat(t, x[n, d], y[n, d], mu) -> [n, k]``

where ``mu`` is an :class:`.EmpiricalMeasure` on R^d.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional
import numpy as np
from .coefficients import CoefficientSet
from .exceptions import ConfigurationError, NumericError
from .measure import EmpiricalMeasure

logger = logging.getLogger(__name__)

GOLDEN = (np.sqrt(5) - 1) / 2
LIONS_CHUNK = 256
"""Evaluation points per work item of the Lions-term pass."""


@dataclass
class ControlProblem:
    """Primitives of a mean-field control problem with constant volatility."""

    d: int
    k: int
    b: Callable
    f: Callable
    g: Callable
    sigma: np.ndarray
    dx_b: Optional[Callable] = None
    dx_f: Optional[Callable] = None
    dx_g: Optional[Callable] = None
    dmu_b: Optional[Callable] = None
    dmu_f: Optional[Callable] = None
    dmu_g: Optional[Callable] = None
    alpha_hat: Optional[Callable] = None
    alpha_bounds: Optional[np.ndarray] = None
    declared_L: float = 1.0
    name: str = "control"
    threads: int = 1

    def __post_init__(self):
        if callable(self.sigma):
            raise ConfigurationError(
                "the volatility of a control problem must be a constant matrix", field="sigma"
            )

        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if sigma.shape[0] != self.d:
            raise ConfigurationError(
                f"must have {self.d} rows, got {sigma.shape[0]}", field="sigma"
            )
        if np.linalg.eigvalsh(sigma @ sigma.T)[0] <= 0:
            raise ConfigurationError("sigma sigma^T must be positive definite", field="sigma")
        self.sigma = sigma

        if self.alpha_bounds is not None:
            bounds = np.atleast_2d(np.asarray(self.alpha_bounds, dtype=float))
            if bounds.shape != (self.k, 2) or np.any(bounds[:, 0] >= bounds[:, 1]):
                raise ConfigurationError(
                    f"must be {self.k} (low, high) pairs with low < high", field="alpha_bounds"
                )
            self.alpha_bounds = bounds

    @property
    def m(self):
        return self.sigma.shape[1]


@dataclass
class HamiltonianEval:
    """H(t, x, y, mu, alpha) = b . y + f with the tuple it was evaluated at."""

    value: np.ndarray
    t: float
    x: np.ndarray
    y: np.ndarray
    alpha: np.ndarray


def _h_values(p, t, x, y, mu, alpha):
    drift = np.asarray(p.b(t, x, mu, alpha), dtype=float).reshape(len(x), p.d)
    value = np.einsum("nd,nd->n", drift, y)
    value = value + np.asarray(p.f(t, x, mu, alpha), dtype=float).reshape(len(x))

    if not np.all(np.isfinite(value)):
        row = int(np.argwhere(~np.isfinite(value))[0][0])
        raise NumericError(
            "non-finite Hamiltonian",
            context={"t": float(t), "x": x[row].tolist(), "alpha": alpha[row].tolist()},
        )

    return value


def hamiltonian(p, t, x, y, mu, alpha):
    """Evaluate the Hamiltonian on a batch."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    return HamiltonianEval(_h_values(p, t, x, y, mu, alpha), t, x, y, alpha)


def _grid_minimum(p, t, x, y, mu, axes):
    """Minimize H over the tensor grid `axes` (one array per control coordinate, per row)."""
    n = len(x)
    mesh = np.stack(np.meshgrid(*[np.arange(len(a[0])) for a in axes], indexing="ij"), -1)
    mesh = mesh.reshape(-1, len(axes))
    G = len(mesh)

    candidates = np.stack([axes[i][:, mesh[:, i]] for i in range(len(axes))], axis=-1)
    values = _h_values(
        p,
        t,
        np.repeat(x, G, axis=0),
        np.repeat(y, G, axis=0),
        mu,
        candidates.reshape(n * G, -1),
    ).reshape(n, G)

    best = np.argmin(values, axis=1)
    return candidates[np.arange(n), best], values[np.arange(n), best]


def _golden_section(p, t, x, y, mu, lo, hi, iterations=80):
    """Vectorized golden-section search of H over [lo, hi] per row (k = 1)."""

    def h(alpha):
        return _h_values(p, t, x, y, mu, alpha[:, None])

    for _ in range(iterations):
        c = hi - GOLDEN * (hi - lo)
        d = lo + GOLDEN * (hi - lo)
        left = h(c) < h(d)
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)

    alpha = (lo + hi) / 2
    return alpha[:, None], h(alpha)


def argmin_hamiltonian(p, t, x, y, mu, grid_size=201, rounds=30):
    """Minimizer of the Hamiltonian in the control for every row of (x, y).

    Uses the closed form `alpha_hat` when the problem has one. Otherwise a grid search over
    `alpha_bounds` is refined by golden-section search (one control coordinate) or by repeated
    grid zooming (two coordinates).

    Returns
    -------
    :class:`numpy.ndarray`
        Controls of shape (n, k).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n = len(x)

    if p.alpha_hat is not None:
        alpha = np.asarray(p.alpha_hat(t, x, y, mu), dtype=float).reshape(n, p.k)
        if not np.all(np.isfinite(alpha)):
            raise NumericError("alpha_hat returned non-finite controls", context={"t": float(t)})
        return alpha

    if p.alpha_bounds is None:
        raise ConfigurationError(
            "the Hamiltonian can only be minimized with alpha_hat or alpha_bounds",
            field="alpha_bounds",
        )
    if p.k > 2:
        raise ConfigurationError(
            "numerical minimization supports at most two control coordinates", field="alpha_bounds"
        )

    bounds = p.alpha_bounds

    if p.k == 1:
        low, high = bounds[0]
        axis = np.broadcast_to(np.linspace(low, high, grid_size), (n, grid_size))
        best, best_h = _grid_minimum(p, t, x, y, mu, [axis])
        step = (high - low) / (grid_size - 1)
        lo = np.maximum(best[:, 0] - step, low)
        hi = np.minimum(best[:, 0] + step, high)
        refined, refined_h = _golden_section(p, t, x, y, mu, lo, hi)
        return np.where((refined_h <= best_h)[:, None], refined, best)

    side = 41
    lows = np.broadcast_to(bounds[:, 0], (n, 2)).copy()
    highs = np.broadcast_to(bounds[:, 1], (n, 2)).copy()
    best = best_h = None

    for _ in range(rounds):
        axes = [np.linspace(lows[:, i], highs[:, i], side, axis=1) for i in range(2)]
        candidate, candidate_h = _grid_minimum(p, t, x, y, mu, axes)
        if best is None:
            best, best_h = candidate, candidate_h
        else:
            better = candidate_h <= best_h
            best = np.where(better[:, None], candidate, best)
            best_h = np.where(better, candidate_h, best_h)

        width = (highs - lows) / (side - 1)
        lows = np.maximum(best - 2 * width, bounds[:, 0])
        highs = np.minimum(best + 2 * width, bounds[:, 1])

    return best


def _require(p, *names):
    missing = [name for name in names if getattr(p, name) is None]
    if missing:
        raise ConfigurationError(f"missing partial derivative(s): {', '.join(missing)}")


def _state_marginal(mu, d):
    return mu if mu.dim == d else mu.marginal(range(d))


def _average_over_atoms(values, weights, n, M):
    """Weighted mean over the atom axis of values laid out as (n * M, ...)."""
    values = values.reshape((n, M) + values.shape[1:])
    return np.einsum("nm...,m->n...", values, weights)


def lions_term(p, which, t, joint_cloud, x_eval, y_weights=None, threads=None):
    """Empirical tilde-expectation of a Lions derivative at the points `x_eval`.

    For ``which="f"`` returns E~[d_mu f(t, X~, mu, alpha~)(x)], for ``which="b"`` returns
    E~[d_mu b(t, X~, mu, alpha~)(x)^T Y~] and for ``which="g"`` returns E~[d_mu g(X~, mu)(x)],
    where (X~, Y~) runs over the atoms of `joint_cloud`, mu is its state marginal and
    alpha~ = alpha_hat(t, X~, Y~, mu). `y_weights` replaces the Y~ atoms in the contraction.

    Returns
    -------
    :class:`numpy.ndarray`
        Shape (n, d).
    """
    derivative = {"b": p.dmu_b, "f": p.dmu_f, "g": p.dmu_g}[which]
    if derivative is None:
        raise ConfigurationError(f"the Lions derivative dmu_{which} is required")

    d = p.d
    x_eval = np.atleast_2d(np.asarray(x_eval, dtype=float))
    mu = _state_marginal(joint_cloud, d)
    X_tilde = joint_cloud.points[:, :d]
    M = len(X_tilde)

    if which != "g":
        Y_tilde = joint_cloud.points[:, d:] if y_weights is None else np.asarray(y_weights, float)
        alpha = argmin_hamiltonian(p, t, X_tilde, joint_cloud.points[:, d:], mu)

    def chunk(start):
        v = x_eval[start:start + LIONS_CHUNK]
        n = len(v)
        points = np.repeat(v, M, axis=0)
        tilde = np.tile(X_tilde, (n, 1))

        if which == "g":
            values = np.asarray(derivative(tilde, mu, points), dtype=float).reshape(n * M, d)
        elif which == "f":
            values = np.asarray(
                derivative(t, tilde, mu, np.tile(alpha, (n, 1)), points), dtype=float
            ).reshape(n * M, d)
        else:
            matrices = np.asarray(
                derivative(t, tilde, mu, np.tile(alpha, (n, 1)), points), dtype=float
            ).reshape(n * M, d, d)
            values = np.einsum("rij,ri->rj", matrices, np.tile(Y_tilde, (n, 1)))

        return _average_over_atoms(values, joint_cloud.weights, n, M)

    starts = range(0, len(x_eval), LIONS_CHUNK)
    with ThreadPoolExecutor(max_workers=threads or p.threads) as executor:
        parts = list(executor.map(chunk, starts))

    result = np.concatenate(parts)
    if not np.all(np.isfinite(result)):
        raise NumericError(f"non-finite Lions term for dmu_{which}", context={"t": float(t)})

    return result


def _mfg_parts(p):
    d = p.d

    def B(t, x, y, z, mu):
        mu_x = _state_marginal(mu, d)
        return p.b(t, x, mu_x, argmin_hamiltonian(p, t, x, y, mu_x))

    def F(t, x, y, z, mu):
        mu_x = _state_marginal(mu, d)
        alpha = argmin_hamiltonian(p, t, x, y, mu_x)
        gradient = np.asarray(p.dx_b(t, x, mu_x, alpha), dtype=float).reshape(len(x), d, d)
        return np.asarray(p.dx_f(t, x, mu_x, alpha), dtype=float).reshape(len(x), d) + np.einsum(
            "nij,ni->nj", gradient, y
        )

    def Sigma(t, x, y, mu):
        return p.sigma

    def G(x, mu):
        return p.dx_g(x, _state_marginal(mu, d))

    return B, F, Sigma, G


def assemble_mfg(p):
    """Adjoint system of the mean field game.

    The measure argument of the coefficients is only read through its state marginal.
    """
    _require(p, "dx_b", "dx_f", "dx_g")
    B, F, Sigma, G = _mfg_parts(p)
    return CoefficientSet((p.d, p.d, p.m), B, F, Sigma, G, p.declared_L, name=f"{p.name}-mfg")


def assemble_mkv_control(p):
    """Adjoint system of the optimal control of McKean-Vlasov dynamics.

    The driver and terminal condition add tilde-expectations of the Lions derivatives over the
    joint law of (X, Y).
    """
    _require(p, "dx_b", "dx_f", "dx_g", "dmu_b", "dmu_f", "dmu_g")
    B, F_mfg, Sigma, G_mfg = _mfg_parts(p)

    def F(t, x, y, z, mu):
        return (
            F_mfg(t, x, y, z, mu)
            + lions_term(p, "f", t, mu, x)
            + lions_term(p, "b", t, mu, x)
        )

    def G(x, mu):
        return np.asarray(G_mfg(x, mu), dtype=float).reshape(len(x), p.d) + lions_term(
            p, "g", None, mu, x
        )

    return CoefficientSet((p.d, p.d, p.m), B, F, Sigma, G, p.declared_L, name=f"{p.name}-mkv")


def expected_cost(p, bundle):
    """Cost of the feedback control alpha_hat(t, X_t, Y_t, law(X_t)) along a solution.

    Left-point rule on the solver grid.
    """
    paths = bundle.paths
    dt = bundle.field.grid.dt
    cost = 0.0

    for k in range(paths.N):
        mu = bundle.flow[k]
        x = paths.X[:, k]
        alpha = argmin_hamiltonian(p, paths.times[k], x, paths.Y[:, k], mu)
        cost += dt * float(np.mean(p.f(paths.times[k], x, mu, alpha)))

    cost += float(np.mean(p.g(paths.X[:, -1], bundle.flow[-1])))
    return cost


@dataclass
class FeedbackReport:
    """Empirical regularity of the optimal feedback and of the drift."""

    alpha_lipschitz: dict
    drift_lipschitz: dict
    drift_time_continuity: float
    n_samples: int
    seed: int


def probe_feedback(p, n_samples=64, box_radius=5.0, seed=0, horizon=1.0, cloud_size=8):
    """Estimate the Lipschitz constants of alpha_hat in (x, y, mu) and of b in (x, mu).

    Reported without thresholds.
    """
    d = p.d
    alpha_ratios = {"x": 0.0, "y": 0.0, "measure": 0.0}
    drift_ratios = {"x": 0.0, "measure": 0.0}

    def ratio(delta, step):
        return float(np.linalg.norm(delta) / np.linalg.norm(step))

    for i in range(n_samples):
        rng = np.random.default_rng([seed, i])
        t = rng.uniform(0, horizon)
        x, y = rng.uniform(-box_radius, box_radius, (2, 1, d))
        hx, hy, hmu = rng.normal(size=(3, 1, d))
        cloud = EmpiricalMeasure(rng.uniform(-box_radius, box_radius, (cloud_size, d)))
        moved = cloud.shifted(hmu[0])

        a0 = argmin_hamiltonian(p, t, x, y, cloud)
        alpha_ratios["x"] = max(
            alpha_ratios["x"], ratio(argmin_hamiltonian(p, t, x + hx, y, cloud) - a0, hx)
        )
        alpha_ratios["y"] = max(
            alpha_ratios["y"], ratio(argmin_hamiltonian(p, t, x, y + hy, cloud) - a0, hy)
        )
        alpha_ratios["measure"] = max(
            alpha_ratios["measure"], ratio(argmin_hamiltonian(p, t, x, y, moved) - a0, hmu)
        )

        if p.alpha_bounds is not None:
            alpha = rng.uniform(p.alpha_bounds[:, 0], p.alpha_bounds[:, 1])[None]
        else:
            alpha = a0
        b0 = np.asarray(p.b(t, x, cloud, alpha), dtype=float)
        drift_ratios["x"] = max(
            drift_ratios["x"], ratio(np.asarray(p.b(t, x + hx, cloud, alpha)) - b0, hx)
        )
        drift_ratios["measure"] = max(
            drift_ratios["measure"], ratio(np.asarray(p.b(t, x, moved, alpha)) - b0, hmu)
        )

    origin = EmpiricalMeasure.dirac(np.zeros(d))
    zero = np.zeros((1, d))
    zero_control = np.zeros((1, p.k))
    drifts = [
        np.asarray(p.b(t, zero, origin, zero_control), dtype=float)
        for t in np.linspace(0, horizon, n_samples)
    ]
    continuity = max(float(np.linalg.norm(b1 - b0)) for b0, b1 in zip(drifts[:-1], drifts[1:]))

    return FeedbackReport(alpha_ratios, drift_ratios, continuity, n_samples, seed)
