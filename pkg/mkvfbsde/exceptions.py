"""Exceptions."""


class FBSDEError(Exception):
    """Base class for errors raised by the solver."""


class ProgrammingError(FBSDEError):
    """Signals an error in the way a run directory is being used by the calling program."""


class DimensionError(FBSDEError):
    """Inputs have incompatible or unsupported dimensions."""


class DomainError(FBSDEError):
    """An argument lies outside the domain of the operation."""


class UnsupportedInputError(FBSDEError):
    """The operation does not handle this kind of input (e.g. non-uniform weights)."""


class CapacityError(FBSDEError):
    """The input is larger than the configured capacity of an exact method."""


class GridError(FBSDEError):
    """Two fields or flows are defined on different grids."""


class ConfigurationError(FBSDEError):
    """Invalid solver, grid or problem configuration.

    Parameters
    ----------
    message : str
        Description of the problem.
    field : str, optional
        Dotted path of the offending configuration key.
    required_dt : float, optional
        Largest admissible time step, for step-size violations.
    """

    def __init__(self, message, field=None, required_dt=None):
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field
        self.required_dt = required_dt


class NumericError(FBSDEError):
    """A computation produced a non-finite value.

    The offending input (an atom, a grid node or a batch of rows) is attached as `context`.
    """

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = context


class DivergenceError(FBSDEError):
    """An iterate left the bounded set the fixed-point map is supposed to preserve.

    Parameters
    ----------
    message : str
        Description of the breach.
    iteration : int, optional
        Outer iteration at which the breach was detected.
    dump : dict, optional
        Diagnostics of the last iterate.
    """

    def __init__(self, message, iteration=None, dump=None):
        super().__init__(message)
        self.iteration = iteration
        self.dump = dump or {}


class BoxExitError(DivergenceError):
    """Too many particles left the spatial box of the grid."""


class ContinuationError(DivergenceError):
    """A truncation level diverged; the bundle of the last good level is attached."""

    def __init__(self, message, level=None, bundle=None, **kwargs):
        super().__init__(message, **kwargs)
        self.level = level
        self.bundle = bundle


class InvalidComparisonError(FBSDEError):
    """Two runs cannot be compared pathwise (different noise, grid or particle count)."""
