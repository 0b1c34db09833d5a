"""Near-optimal periodic controls via occupational-measure linear programs."""

from .basis import BasisMode, BasisSizeError, MonomialBasis, build_basis, tensor, total_degree
from .colgen import ColGenConfig, ColGenError, ColGenState, MaxIterations, Stalled, run_colgen
from .control import FeedbackLaw, HJBReport, ValuePolynomial, load_certificate, verify_hjb
from .lp import DiscreteMeasure, DualCertificate, Infeasible, RestrictedLP, dense_grid_oracle
from .problem import Box, ConfigError, ControlProblem, DomainError, load_problem, pendulum
from .simulate import (
    EquilibriumDetected,
    NoLimitCycle,
    StateLeftY,
    Trajectory,
    average_cost,
    detect_limit_cycle,
    empirical_moments,
    integrate_closed_loop,
)

__version__ = "0.1.0"

__all__ = [
    "BasisMode",
    "BasisSizeError",
    "Box",
    "ColGenConfig",
    "ColGenError",
    "ColGenState",
    "ConfigError",
    "ControlProblem",
    "DiscreteMeasure",
    "DomainError",
    "DualCertificate",
    "EquilibriumDetected",
    "FeedbackLaw",
    "HJBReport",
    "Infeasible",
    "MaxIterations",
    "MonomialBasis",
    "NoLimitCycle",
    "RestrictedLP",
    "Stalled",
    "StateLeftY",
    "Trajectory",
    "ValuePolynomial",
    "average_cost",
    "build_basis",
    "dense_grid_oracle",
    "detect_limit_cycle",
    "empirical_moments",
    "integrate_closed_loop",
    "load_certificate",
    "load_problem",
    "pendulum",
    "run_colgen",
    "tensor",
    "total_degree",
    "verify_hjb",
]
