"""Built-in problems with known solutions.

Problems are registered by name and can be addressed with a query string carrying their
parameters, e.g. ``counterexample?A=1&R=10``.
"""

import difflib
import inspect
import math
from dataclasses import dataclass, field
from typing import Callable, Optional
from urllib.parse import parse_qsl, urlsplit
import numpy as np
from scipy.stats import norm
from .applications import ControlProblem, assemble_mfg, assemble_mkv_control
from .coefficients import CoefficientSet
from .exceptions import ConfigurationError, DomainError
from .field import DecouplingField, GridSpec, default_box
from .fixed_point import IterationState, SolverConfig, diffusion_flow
from .measure import EmpiricalMeasure


def gaussian_cloud(mean, std, n):
    """Quantile cloud of n atoms of the normal law N(mean, std^2) on R^1."""
    levels = (np.arange(n) + 0.5) / n
    return EmpiricalMeasure(mean + std * norm.ppf(levels))


@dataclass
class ReferenceSolution:
    """Known means of a solution, and optionally its state marginals."""

    mean_x: Callable
    mean_y: Callable
    description: str
    validity: str = ""
    law: Optional[Callable] = None

    def law_x(self, t, n):
        """Cloud of n atoms approximating the law of X_t, or None when it is not known."""
        return None if self.law is None else self.law(t, n)

    def evaluate(self, times):
        """Reference means at `times`, as arrays of shape (len(times), d) and (len(times), p)."""
        mean_x = np.stack([np.atleast_1d(self.mean_x(t)) for t in times])
        mean_y = np.stack([np.atleast_1d(self.mean_y(t)) for t in times])
        return mean_x, mean_y


def _clip(R):
    def clip(s):
        return np.clip(s, -R, R)

    return clip


def counterexample(A=1.0, R=10.0):
    """Scalar system whose solutions form the family x_t = A sin t, y_t = A cos t.

    dX = E[Y] dt + dW, dY = -E[X] dt + Z dW, X_0 = 0, Y_T = E[X_T] on T = pi/4, with every mean
    clipped to [-R, R]. Uniqueness fails: every A with |A| sqrt(2) < R gives a solution.

    The clipped means reach R in absolute value and the coefficients must stay bounded by the
    declared constant, so L = R rather than 1. The assumption prober's thresholds scale with L and
    are loose for this problem accordingly.

    Returns
    -------
    tuple
        The coefficients, default solver settings and the reference solution for `A`.
    """
    if not R > 0:
        raise DomainError("R must be positive")
    if abs(A) * math.sqrt(2) >= R:
        raise DomainError(f"|A| sqrt(2) = {abs(A) * math.sqrt(2):.6g} must be below R = {R:g}")

    clip = _clip(R)

    def B(t, x, y, z, mu):
        return clip(mu.mean[1])

    def F(t, x, y, z, mu):
        return clip(mu.mean[0])

    def Sigma(t, x, y, mu):
        return 1.0

    def G(x, mu):
        return clip(mu.mean[0])

    coefficients = CoefficientSet((1, 1, 1), B, F, Sigma, G, declared_L=R, name="counterexample")

    horizon = math.pi / 4
    config = SolverConfig(
        x0=(0.0,),
        grid=GridSpec(horizon, 200, 8.0, 201),
        particles=20000,
        theta=0.5,
        tol_u=5e-3,
        tol_flow=5e-3,
        max_iters=40,
    )
    reference = ReferenceSolution(
        mean_x=lambda t: A * math.sin(t),
        mean_y=lambda t: A * math.cos(t),
        description=f"x_t = {A:g} sin t, y_t = {A:g} cos t",
        validity=f"|A| sqrt(2) < R = {R:g}",
        law=lambda t, n: gaussian_cloud(A * math.sin(t), math.sqrt(t), n),
    )

    return coefficients, config, reference


def counterexample_init(cfg, A):
    """Initial pair phi(t, x) = A cos t, mu = law(A sin t + W_t) of the solution family."""
    grid = cfg.grid
    phi = DecouplingField.from_function(
        grid, lambda t, x: np.full((len(x), 1), A * math.cos(t))
    )
    drift = A * np.sin(grid.times)[:, None]
    return IterationState(phi, diffusion_flow(cfg, np.eye(1), 1, drift=drift))


def decoupled_oracle(c=0.5, x0=0.0):
    """Brownian forward equation with constant terminal value c: Y = c, Z = 0."""

    def zero(t, x, y, z, mu):
        return 0.0

    def Sigma(t, x, y, mu):
        return 1.0

    def G(x, mu):
        return c

    coefficients = CoefficientSet(
        (1, 1, 1), zero, zero, Sigma, G, declared_L=max(1.0, abs(c)), name="decoupled"
    )
    reference = ReferenceSolution(
        mean_x=lambda t: x0,
        mean_y=lambda t: c,
        description=f"X = {x0:g} + W, Y = {c:g}, Z = 0",
        law=lambda t, n: gaussian_cloud(x0, math.sqrt(t), n),
    )

    return coefficients, reference


def mean_reversion_reference(x0=1.0, R=10.0):
    """Drift towards the population mean: dX = -(X - E[X]) dt + dW, Y_T = clip(X_T, R).

    The mean of X is constant, so X is an Ornstein-Uhlenbeck process around x0.
    """
    clip = _clip(R)

    def B(t, x, y, z, mu):
        return -(x - mu.mean[0])

    def F(t, x, y, z, mu):
        return 0.0

    def Sigma(t, x, y, mu):
        return 1.0

    def G(x, mu):
        return clip(x)

    coefficients = CoefficientSet((1, 1, 1), B, F, Sigma, G, declared_L=R, name="mean-reversion")
    reference = ReferenceSolution(
        mean_x=lambda t: x0,
        mean_y=lambda t: x0,
        description=f"X Ornstein-Uhlenbeck around {x0:g}",
        validity="mean_y exact up to the clipping at R, valid while |x0| + 3 << R",
        law=lambda t, n: gaussian_cloud(x0, math.sqrt((1 - math.exp(-2 * t)) / 2), n),
    )

    return coefficients, reference


def attraction_problem(kappa=1.0, c=1.0, sigma=1.0):
    """Players attracted to the population mean.

    b = alpha, f = alpha^2 / 2 + kappa / 2 |x - m(mu)|^2, g = c / 2 |x - m(mu)|^2 with m(mu) the
    mean of mu. The optimal feedback is alpha = -y.
    """

    def b(t, x, mu, alpha):
        return alpha

    def f(t, x, mu, alpha):
        return 0.5 * np.sum(alpha ** 2, axis=-1) + 0.5 * kappa * np.sum((x - mu.mean) ** 2, axis=-1)

    def g(x, mu):
        return 0.5 * c * np.sum((x - mu.mean) ** 2, axis=-1)

    def dx_b(t, x, mu, alpha):
        return np.zeros((len(x), 1, 1))

    def dx_f(t, x, mu, alpha):
        return kappa * (x - mu.mean)

    def dx_g(x, mu):
        return c * (x - mu.mean)

    def dmu_b(t, x_tilde, mu, alpha, v):
        return np.zeros((len(x_tilde), 1, 1))

    def dmu_f(t, x_tilde, mu, alpha, v):
        return -kappa * (x_tilde - mu.mean)

    def dmu_g(x_tilde, mu, v):
        return -c * (x_tilde - mu.mean)

    def alpha_hat(t, x, y, mu):
        return -y

    return ControlProblem(
        d=1,
        k=1,
        b=b,
        f=f,
        g=g,
        sigma=[[sigma]],
        dx_b=dx_b,
        dx_f=dx_f,
        dx_g=dx_g,
        dmu_b=dmu_b,
        dmu_f=dmu_f,
        dmu_g=dmu_g,
        alpha_hat=alpha_hat,
        declared_L=max(1.0, kappa, c, 1 / sigma ** 2),
        name="attraction",
    )


@dataclass
class Problem:
    """A registered problem with its default settings."""

    name: str
    parameters: dict
    coefficients: CoefficientSet
    config: SolverConfig
    reference: Optional[ReferenceSolution] = None
    family: Optional[Callable] = None
    control: Optional[ControlProblem] = None
    notes: dict = field(default_factory=dict)

    def init(self, cfg):
        """Initial pair of the parametric family at the problem's own parameter, if any."""
        if self.family is None:
            return None
        return self.family(cfg, self.parameters[self.notes["family_parameter"]])


_REGISTRY = {}


def register_problem(name):
    """Register a builder returning a :class:`Problem` from keyword parameters."""

    def decorator(builder):
        _REGISTRY[name] = builder
        return builder

    return decorator


def available_problems():
    return sorted(_REGISTRY)


def parse_problem_spec(spec):
    """Split ``name?key=value&...`` into the name and a dict of float parameters."""
    parts = urlsplit(spec)
    name = parts.path

    parameters = {}
    for key, value in parse_qsl(parts.query, keep_blank_values=True):
        try:
            parameters[key] = float(value)
        except ValueError:
            raise ConfigurationError(
                f"parameter value {value!r} is not a number", field=key
            ) from None

    return name, parameters


def load_problem(spec, **overrides):
    """Build a registered problem.

    Raises
    ------
    :class:`.ConfigurationError`
        For unknown problems (with close matches suggested) or unknown parameters.
    """
    name, parameters = parse_problem_spec(spec)
    parameters.update({key: float(value) for key, value in overrides.items()})

    if name not in _REGISTRY:
        suggestions = difflib.get_close_matches(name, available_problems())
        hint = f"; did you mean {', '.join(suggestions)}?" if suggestions else ""
        raise ConfigurationError(
            f"unknown problem {name!r}{hint} (available: {', '.join(available_problems())})"
        )

    builder = _REGISTRY[name]
    accepted = inspect.signature(builder).parameters
    for key in parameters:
        if key not in accepted:
            raise ConfigurationError(
                f"problem {name!r} takes parameters {', '.join(accepted) or 'none'}", field=key
            )

    return builder(**parameters)


def _default_config(x0, horizon=1.0, drift_bound=0.0, n_t=50, n_x=101, particles=2000):
    x_max = math.ceil(default_box(x0, 1.0, horizon, drift_bound))
    return SolverConfig(
        x0=(x0,), grid=GridSpec(horizon, n_t, x_max, n_x), particles=particles, max_iters=30
    )


@register_problem("counterexample")
def _counterexample(A=1.0, R=10.0):
    coefficients, config, reference = counterexample(A, R)
    return Problem(
        "counterexample",
        {"A": A, "R": R},
        coefficients,
        config,
        reference,
        family=counterexample_init,
        notes={"family_parameter": "A"},
    )


@register_problem("decoupled")
def _decoupled(c=0.5, x0=0.0):
    coefficients, reference = decoupled_oracle(c, x0)
    return Problem("decoupled", {"c": c, "x0": x0}, coefficients, _default_config(x0), reference)


@register_problem("mean-reversion")
def _mean_reversion(x0=1.0, R=10.0):
    coefficients, reference = mean_reversion_reference(x0, R)
    return Problem(
        "mean-reversion", {"x0": x0, "R": R}, coefficients, _default_config(x0), reference
    )


def _attraction(assemble, name, kappa, c, x0):
    control = attraction_problem(kappa, c)
    reference = ReferenceSolution(
        mean_x=lambda t: x0,
        mean_y=lambda t: 0.0,
        description=f"mean state stays at {x0:g}, mean adjoint at 0",
    )
    return Problem(
        name,
        {"kappa": kappa, "c": c, "x0": x0},
        assemble(control),
        _default_config(x0),
        reference,
        control=control,
    )


@register_problem("attraction-mfg")
def _attraction_mfg(kappa=1.0, c=1.0, x0=0.5):
    return _attraction(assemble_mfg, "attraction-mfg", kappa, c, x0)


@register_problem("attraction-mkv")
def _attraction_mkv(kappa=1.0, c=1.0, x0=0.5):
    return _attraction(assemble_mkv_control, "attraction-mkv", kappa, c, x0)
