"""vandisc: desk-scale verification of vanishing-discount limits for
BSDE-driven stochastic control."""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    Ball,
    Box,
    ControlProblem,
    ProblemConfig,
    builtin_problem,
    catalog_names,
    lipschitz_audit,
    parse_config,
    parse_problem,
)
from .reports import ConditionReport  # noqa: F401
