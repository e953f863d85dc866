"""Key-value configuration.

Settings are addressed by dotted keys (``grid.n_t``, ``solver.theta``, ...). They come from an
INI file with one section per prefix, from environment variables named
``MKVFBSDE_<SECTION>__<KEY>`` and from ``key=value`` overrides; later sources win.
"""

import configparser
import difflib
import os
from dataclasses import dataclass
from typing import Optional
from .exceptions import ConfigurationError
from .field import GridSpec

ENV_PREFIX = "MKVFBSDE_"


def _floats(value):
    return tuple(float(v) for v in str(value).split(",") if v.strip())


def _ints(value):
    return tuple(int(v) for v in str(value).split(",") if v.strip())


def _boolean(value):
    states = configparser.ConfigParser.BOOLEAN_STATES
    if str(value).lower() not in states:
        raise ValueError(f"{value!r} is not a boolean")
    return states[str(value).lower()]


def _substeps(value):
    return None if str(value).lower() == "auto" else int(value)


def _optional_float(value):
    return None if str(value).lower() in ("", "auto", "none") else float(value)


def _policy(value):
    if value not in ("warn", "reject"):
        raise ValueError("expected 'warn' or 'reject'")
    return value


SCHEMA = {
    "grid.horizon": float,
    "grid.n_t": int,
    "grid.x_max": _floats,
    "grid.n_x": _ints,
    "grid.cfl_factor": float,
    "grid.substeps": _substeps,
    "solver.x0": _floats,
    "solver.particles": int,
    "solver.theta": float,
    "solver.tol_u": float,
    "solver.tol_flow": float,
    "solver.max_iters": int,
    "solver.truncation_ladder": _floats,
    "solver.seed": int,
    "solver.gamma_cap": float,
    "solver.lipschitz_cap": float,
    "solver.gamma_prime": _optional_float,
    "solver.antithetic": _boolean,
    "solver.max_reflection_fraction": float,
    "solver.threads": int,
    "w2.cap": int,
    "w2.projections": int,
    "probe.n_samples": int,
    "probe.box_radius": float,
    "probe.seed": int,
    "probe.horizon": _optional_float,
    "probe.policy": _policy,
}
"""Converter of every known key."""

_SOLVER_FIELDS = {"w2.cap": "w2_cap", "w2.projections": "w2_projections"}


def convert(key, value):
    """Convert a raw setting to its typed value."""
    if key not in SCHEMA:
        suggestions = difflib.get_close_matches(key, SCHEMA)
        hint = f"; did you mean {', '.join(suggestions)}?" if suggestions else ""
        raise ConfigurationError(f"unknown setting{hint}", field=key)

    if not isinstance(value, str):
        return value

    try:
        return SCHEMA[key](value)
    except ValueError as e:
        raise ConfigurationError(f"invalid value {value!r} ({e})", field=key) from None


def read_config_file(path):
    """Settings from an INI file as a dict of dotted keys to raw strings."""
    parser = configparser.ConfigParser()

    if not parser.read(path):
        raise ConfigurationError(f"cannot read configuration file {path}")

    return {
        f"{section}.{key}": value
        for section in parser.sections()
        for key, value in parser.items(section)
    }


def read_environment(environ=None):
    """Settings from ``MKVFBSDE_<SECTION>__<KEY>`` variables."""
    environ = os.environ if environ is None else environ
    settings = {}

    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name[len(ENV_PREFIX):]:
            continue
        section, key = name[len(ENV_PREFIX):].lower().split("__", 1)
        settings[f"{section}.{key}"] = value

    return settings


def split_overrides(items):
    """Split ``key=value`` overrides into dotted settings and problem parameters."""
    settings = {}
    parameters = {}

    for item in items or ():
        key, separator, value = item.partition("=")
        key = key.strip()
        if not separator or not key:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        (settings if "." in key else parameters)[key] = value.strip()

    return settings, parameters


def build_config(base, settings):
    """Apply dotted settings to a :class:`.SolverConfig`."""
    typed = {key: convert(key, value) for key, value in settings.items()}

    grid = base.grid
    grid_changes = {key[5:]: value for key, value in typed.items() if key.startswith("grid.")}
    if grid_changes:
        arguments = dict(
            horizon=grid.horizon,
            n_t=grid.n_t,
            x_max=grid.x_max,
            n_x=grid.n_x,
            cfl_factor=grid.cfl_factor,
            substeps=grid.substeps,
            boundary=grid.boundary,
        )
        arguments.update(grid_changes)
        grid = GridSpec(**arguments)

    changes = {"grid": grid}
    for key, value in typed.items():
        if key.startswith("solver."):
            changes[key[7:]] = value
        elif key in _SOLVER_FIELDS:
            changes[_SOLVER_FIELDS[key]] = value

    return base.replace(**changes)


@dataclass
class ProbeSettings:
    """Settings of the assumption prober."""

    n_samples: int = 64
    box_radius: float = 5.0
    seed: int = 0
    horizon: Optional[float] = None
    policy: str = "warn"


def probe_settings(settings):
    typed = {
        key[6:]: convert(key, value) for key, value in settings.items() if key.startswith("probe.")
    }
    return ProbeSettings(**typed)
