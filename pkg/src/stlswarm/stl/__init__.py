"""Signal temporal logic: syntax, parser, exact and smooth robustness."""

from .formula import (
    And,
    BoundError,
    Eventually,
    Formula,
    Globally,
    HalfPlanePredicate,
    Implies,
    Not,
    Or,
    Predicate,
    RegionPredicate,
    SpecConfig,
    Until,
    VisitCountPredicate,
)
from .parser import SpecSyntaxError, parse_spec, to_text
from .robustness import (
    DEFAULT_TEMP,
    HorizonError,
    boolean_sat,
    robustness_batch,
    robustness_exact,
    robustness_smooth,
    robustness_trace,
    smooth_gap_bound,
)
from .specs import BUILTIN_NAMES, REGIONS, UnknownSpecError, builtin_spec, custom_spec

__all__ = [
    "And",
    "BoundError",
    "BUILTIN_NAMES",
    "DEFAULT_TEMP",
    "Eventually",
    "Formula",
    "Globally",
    "HalfPlanePredicate",
    "HorizonError",
    "Implies",
    "Not",
    "Or",
    "Predicate",
    "REGIONS",
    "RegionPredicate",
    "SpecConfig",
    "SpecSyntaxError",
    "UnknownSpecError",
    "Until",
    "VisitCountPredicate",
    "boolean_sat",
    "builtin_spec",
    "custom_spec",
    "parse_spec",
    "robustness_batch",
    "robustness_exact",
    "robustness_smooth",
    "robustness_trace",
    "smooth_gap_bound",
    "to_text",
]
