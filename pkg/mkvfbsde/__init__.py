"""Solver for forward-backward SDEs of McKean-Vlasov type."""

__version__ = "0.1.0"

from .coefficients import CoefficientSet, probe_assumptions
from .field import DecouplingField, GridSpec
from .fixed_point import SolverConfig, continuation_solve, multi_start, solve
from .measure import EmpiricalMeasure, MeasureFlow, w2
from .problems import available_problems, load_problem
from .store import RunDirectory

ALL = (
    CoefficientSet,
    DecouplingField,
    EmpiricalMeasure,
    GridSpec,
    MeasureFlow,
    RunDirectory,
    SolverConfig,
)
