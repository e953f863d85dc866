"""Coefficient bundles, truncation and assumption probing.

Coefficient callables are vectorized over a leading batch axis sharing a single measure argument:

- ``B(t, x[n, d], y[n, p], z[n, p, m], mu) -> [n, d]``
- ``F(t, x[n, d], y[n, p], z[n, p, m], mu) -> [n, p]``
- ``Sigma(t, x[n, d], y[n, p], mu) -> [n, d, m]``
- ``G(x[n, d], mu_T) -> [n, p]``

where ``mu`` is an :class:`.EmpiricalMeasure` on R^(d+p) and ``mu_T`` one on R^d. Anything
broadcastable to these shapes is accepted.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
import numpy as np
from .exceptions import ConfigurationError, DimensionError, DomainError, FBSDEError, NumericError
from .measure import EmpiricalMeasure

logger = logging.getLogger(__name__)

LIPSCHITZ_SLACK = 1e-9
"""Relative slack before an empirical Lipschitz ratio counts as exceeding the declared constant."""


def _shaped(name, values, shape, **context):
    try:
        values = np.array(np.broadcast_to(np.asarray(values, dtype=float), shape))
    except ValueError as e:
        raise DimensionError(
            f"{name} returned shape {np.shape(values)}, expected {shape}"
        ) from e

    if not np.all(np.isfinite(values)):
        rows = np.unique(np.argwhere(~np.isfinite(values))[:, 0])
        raise NumericError(
            f"{name} returned non-finite values",
            context={"coefficient": name, "rows": rows.tolist(), **context},
        )

    return values


class CoefficientSet:
    """The coefficients (B, F, Sigma, G) of a mean-field forward-backward system.

    Parameters
    ----------
    dims : tuple of int
        State, value and noise dimensions (d, p, m).
    B, F, Sigma, G : callable
        Coefficients following the module's calling convention.
    declared_L : float
        Constant of the standing assumptions, audited by :func:`probe_assumptions`.
    name : str, optional
        Label used in logs and manifests.
    """

    def __init__(self, dims, B, F, Sigma, G, declared_L=1.0, name=None):
        dims = tuple(int(n) for n in dims)

        if len(dims) != 3 or min(dims) < 1:
            raise ConfigurationError(f"dims must be three positive integers, got {dims}")
        if not declared_L > 0:
            raise ConfigurationError("declared_L must be positive")

        self.dims = dims
        self.B = B
        self.F = F
        self.Sigma = Sigma
        self.G = G
        self.declared_L = float(declared_L)
        self.name = name or "custom"

    @property
    def d(self):
        return self.dims[0]

    @property
    def p(self):
        return self.dims[1]

    @property
    def m(self):
        return self.dims[2]

    def drift(self, t, x, y, z, mu):
        return _shaped("B", self.B(t, x, y, z, mu), (len(x), self.d), t=float(t))

    def driver(self, t, x, y, z, mu):
        return _shaped("F", self.F(t, x, y, z, mu), (len(x), self.p), t=float(t))

    def volatility(self, t, x, y, mu):
        return _shaped("Sigma", self.Sigma(t, x, y, mu), (len(x), self.d, self.m), t=float(t))

    def terminal(self, x, mu):
        return _shaped("G", self.G(x, mu), (len(x), self.p))

    def replace(self, **changes):
        """Copy of the bundle with some attributes replaced."""
        attributes = dict(
            dims=self.dims,
            B=self.B,
            F=self.F,
            Sigma=self.Sigma,
            G=self.G,
            declared_L=self.declared_L,
            name=self.name,
        )
        attributes.update(changes)
        return CoefficientSet(**attributes)

    def __repr__(self):
        return f"{self.__class__.__name__}({self.name!r}, dims={self.dims})"


def project_ball(v, n):
    """Orthogonal projection of the last axis of `v` onto the closed ball of radius `n`."""
    if not n > 0:
        raise DomainError("ball radius must be positive")

    v = np.asarray(v, dtype=float)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    outside = norms > n

    return np.where(outside, v * (n / np.where(outside, norms, 1.0)), v)


def truncate(c, n):
    """Bundle with drift and driver projected onto the ball of radius `n`."""
    if not n > 0:
        raise DomainError("truncation level must be positive")

    def B(t, x, y, z, mu):
        return project_ball(c.drift(t, x, y, z, mu), n)

    def F(t, x, y, z, mu):
        return project_ball(c.driver(t, x, y, z, mu), n)

    return c.replace(B=B, F=F, name=f"{c.name}|{n:g}")


@dataclass
class AssumptionReport:
    """Empirical audit of the Lipschitz, growth and ellipticity assumptions."""

    declared_L: float
    lipschitz_estimates: dict
    lipschitz_by_argument: dict
    growth_violations: list
    ellipticity_min: float
    sigma_time_continuity: float
    n_samples: int
    seed: int
    notes: list = field(default_factory=list)

    def lipschitz_violations(self):
        """Coefficients whose empirical Lipschitz ratio exceeds the declared constant."""
        bound = self.declared_L * (1 + LIPSCHITZ_SLACK)
        return sorted(name for name, value in self.lipschitz_estimates.items() if value > bound)

    @property
    def ellipticity_violated(self):
        return self.ellipticity_min < (1 / self.declared_L) * (1 - 1e-12)

    def errors(self):
        """Hard violations."""
        if self.ellipticity_violated:
            return [
                f"ellipticity: smallest eigenvalue {self.ellipticity_min:.6g} of Sigma Sigma^T "
                f"is below 1/L = {1 / self.declared_L:.6g}"
            ]
        return []

    def warnings(self):
        """Soft violations."""
        messages = [
            f"lipschitz: {name} ratio {self.lipschitz_estimates[name]:.6g} exceeds L = "
            f"{self.declared_L:.6g}"
            for name in self.lipschitz_violations()
        ]
        names = sorted({violation["coefficient"] for violation in self.growth_violations})
        messages.extend(
            f"growth: {name} exceeds its bound at "
            f"{sum(v['coefficient'] == name for v in self.growth_violations)} probe point(s)"
            for name in names
        )
        return messages

    @property
    def status(self):
        if self.errors():
            return "error"
        if self.warnings():
            return "warn"
        return "ok"

    def enforce(self, policy="warn"):
        """Log or raise on violations.

        Parameters
        ----------
        policy : {"warn", "reject"}
            With "warn", violations are logged. With "reject", any violation raises
            :class:`.ConfigurationError`.
        """
        problems = self.errors() + self.warnings()

        if policy == "reject" and problems:
            raise ConfigurationError("; ".join(problems))

        for message in problems:
            logger.warning(message)

    def to_dict(self):
        report = asdict(self)
        report["status"] = self.status
        report["errors"] = self.errors()
        report["warnings"] = self.warnings()
        return report

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def _ratio(delta, step):
    step = float(np.linalg.norm(step))
    return float(np.linalg.norm(delta)) / step if step > 0 else 0.0


def _probe_point(c, i, seed, box_radius, horizon, cloud_size):
    """Evaluate all coefficients around one random point."""
    d, p, m = c.dims
    rng = np.random.default_rng([seed, i])

    t = rng.uniform(0, horizon)
    x = rng.uniform(-box_radius, box_radius, d)
    y = rng.uniform(-box_radius, box_radius, p)
    z = rng.uniform(-box_radius, box_radius, (p, m))
    hx, hy = rng.normal(size=d), rng.normal(size=p)
    hz, hmu = rng.normal(size=(p, m)), rng.normal(size=d + p)

    cloud = EmpiricalMeasure(rng.uniform(-box_radius, box_radius, (cloud_size, d + p)))
    # A rigid shift moves every atom by the same vector, so W2 equals its norm.
    cloud_shifted = cloud.shifted(hmu)
    terminal_cloud = cloud.marginal(range(d))
    terminal_shifted = terminal_cloud.shifted(hmu[:d])

    xs = np.stack([x, x + hx, x, x])
    ys = np.stack([y, y, y + hy, y])
    zs = np.stack([z, z, z, z + hz])
    steps = {"x": hx, "y": hy, "z": hz, "measure": hmu}

    outputs = {
        "B": (c.drift(t, xs, ys, zs, cloud), c.drift(t, xs[:1], ys[:1], zs[:1], cloud_shifted)),
        "F": (c.driver(t, xs, ys, zs, cloud), c.driver(t, xs[:1], ys[:1], zs[:1], cloud_shifted)),
        "Sigma": (
            c.volatility(t, xs[:3], ys[:3], cloud),
            c.volatility(t, xs[:1], ys[:1], cloud_shifted),
        ),
        "G": (
            c.terminal(xs[:2], terminal_cloud),
            c.terminal(xs[:1], terminal_shifted),
        ),
    }

    ratios = {}
    for name, (batch, moved) in outputs.items():
        base = batch[0]
        ratios[name] = {
            argument: _ratio(batch[row] - base, steps[argument])
            for row, argument in enumerate(("x", "y", "z"), start=1)
            if row < len(batch)
        }
        ratios[name]["measure"] = _ratio(
            moved[0] - base, hmu if name != "G" else hmu[:d]
        )

    # Growth bounds at the base point.
    L = c.declared_L
    joint_moment = np.sqrt(cloud.square_moment)
    value_moment = np.sqrt(np.mean(np.sum(cloud.points[:, d:] ** 2, axis=1)))
    B0, F0 = outputs["B"][0][0], outputs["F"][0][0]
    S0, G0 = outputs["Sigma"][0][0], outputs["G"][0][0]
    bounds = {
        "B": (
            np.linalg.norm(B0),
            L * (1 + np.linalg.norm(x) + np.linalg.norm(y) + np.linalg.norm(z) + joint_moment),
        ),
        "F": (np.linalg.norm(F0), L * (1 + np.linalg.norm(y) + value_moment)),
        "Sigma": (np.linalg.norm(S0, ord=2), L),
        "G": (np.linalg.norm(G0), L),
    }
    violations = [
        {
            "coefficient": name,
            "t": float(t),
            "x": x.tolist(),
            "y": y.tolist(),
            "value": float(value),
            "bound": float(bound),
        }
        for name, (value, bound) in bounds.items()
        if value > bound * (1 + 1e-12)
    ]

    a = S0 @ S0.T
    ellipticity = float(np.linalg.eigvalsh(a)[0])

    return ratios, violations, ellipticity


def probe_assumptions(
    c, n_samples=64, box_radius=5.0, seed=0, horizon=1.0, cloud_size=8, threads=1
):
    """Probe a coefficient bundle for the Lipschitz, growth and ellipticity assumptions.

    Every probe point perturbs one argument at a time (x, y, z, or the measure by a rigid shift of
    a random cloud) and records |change of output| / |change of input|. Probe points are drawn from
    independent streams keyed by (seed, index), so the report does not depend on `threads`.

    Returns
    -------
    :class:`AssumptionReport`
    """
    if n_samples < 2:
        raise DomainError("n_samples must be at least 2")

    def run(i):
        try:
            return _probe_point(c, i, seed, box_radius, horizon, cloud_size)
        except FBSDEError:
            raise
        except Exception as e:
            raise NumericError(
                f"coefficient evaluation failed at probe point {i}: {e}",
                context={"probe": i, "seed": seed},
            ) from e

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        results = list(executor.map(run, range(n_samples)))

    by_argument = {}
    violations = []
    for ratios, point_violations, _ in results:
        violations.extend(point_violations)
        for name, values in ratios.items():
            current = by_argument.setdefault(name, {})
            for argument, value in values.items():
                current[argument] = max(current.get(argument, 0.0), value)

    estimates = {name: max(values.values()) for name, values in by_argument.items()}
    ellipticity = min(result[2] for result in results)

    # Continuity in time of Sigma at the origin with a Dirac at the origin.
    d, p, _ = c.dims
    origin = EmpiricalMeasure.dirac(np.zeros(d + p))
    times = np.linspace(0, horizon, n_samples)
    sigmas = [c.volatility(t, np.zeros((1, d)), np.zeros((1, p)), origin)[0] for t in times]
    continuity = max(
        float(np.linalg.norm(s1 - s0)) for s0, s1 in zip(sigmas[:-1], sigmas[1:])
    )

    report = AssumptionReport(
        declared_L=c.declared_L,
        lipschitz_estimates=estimates,
        lipschitz_by_argument=by_argument,
        growth_violations=violations,
        ellipticity_min=ellipticity,
        sigma_time_continuity=continuity,
        n_samples=n_samples,
        seed=seed,
    )
    logger.debug("probed %s: status %s", c.name, report.status)

    return report
