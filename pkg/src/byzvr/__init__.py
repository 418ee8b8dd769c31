"""Byzantine-robust variance-reduced optimization on finite sums.

A deterministic desk-scale simulator: a loopless-SVRG method and a SAGA
baseline run against robust aggregators (geometric median, coordinate
median, Krum, each optionally bucketed) under standard gradient attacks,
plus the surrounding analysis and experiment harness.
"""

from .aggregation import AggregatorSpec, aggregate, audit_robustness
from .analysis import (ComplexityReport, ReferenceSolution, complexity_bounds,
                       lyapunov, neighborhood_size, solve_reference)
from .attacks import AttackSpec, alie, bit_flip, ipm
from .data import Dataset, SparseRow, load_libsvm, parse_libsvm, subsample
from .engine import RunConfig, RunTrace, WorkerState, run, theoretical_stepsize
from .objective import Objective, OracleCounter, make_logistic

__version__ = "0.1.0"

__all__ = [
    "AggregatorSpec", "aggregate", "audit_robustness",
    "ComplexityReport", "ReferenceSolution", "complexity_bounds",
    "lyapunov", "neighborhood_size", "solve_reference",
    "AttackSpec", "alie", "bit_flip", "ipm",
    "Dataset", "SparseRow", "load_libsvm", "parse_libsvm", "subsample",
    "RunConfig", "RunTrace", "WorkerState", "run", "theoretical_stepsize",
    "Objective", "OracleCounter", "make_logistic",
    "__version__",
]
