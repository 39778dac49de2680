"""The five builtin multi-agent specifications."""

from __future__ import annotations

from .formula import (
    And,
    Eventually,
    Globally,
    Or,
    Predicate,
    RegionPredicate,
    SpecConfig,
    Until,
    VisitCountPredicate,
)
from .parser import parse_spec

REGION_A = RegionPredicate((0.0, 0.0), 1.0, "A")
REGION_B = RegionPredicate((2.0, 2.0), 1.0, "B")
REGION_C = RegionPredicate((2.0, 0.0), 1.0, "C")
REGION_D = RegionPredicate((0.0, 2.0), 1.0, "D")

# Psi_1 of the signal spec: region A entered at least twice
TWICE_A = VisitCountPredicate(REGION_A, 2, "A2")

REGIONS = {"A": REGION_A, "B": REGION_B, "C": REGION_C, "D": REGION_D, "A2": TWICE_A}

BUILTIN_NAMES = ("seq", "cover", "loop", "signal", "branch")

# (T, k) per spec
_LENGTHS = {
    "seq": (15, 20),
    "cover": (15, 20),
    "loop": (30, 20),
    "signal": (30, 20),
    "branch": (20, 10),
}


class UnknownSpecError(KeyError):
    pass


def _loop_body(span: int):
    return And(
        (
            Eventually(0, span, Predicate(REGION_A)),
            Eventually(0, span, Predicate(REGION_B)),
            Eventually(0, span, Predicate(REGION_C)),
        )
    )


def _formula(name: str, T: int):
    A, B, C, D = (Predicate(r) for r in (REGION_A, REGION_B, REGION_C, REGION_D))
    if name == "seq":
        third = T // 3
        return And(
            (
                Eventually(0, third, A),
                Eventually(third, 2 * third, B),
                Eventually(2 * third, T, C),
            )
        )
    if name == "cover":
        return And((Eventually(0, T, A), Eventually(0, T, B), Eventually(0, T, C)))
    if name == "loop":
        half = T // 2
        return Globally(0, T - half, _loop_body(half))
    if name == "signal":
        half = T // 2
        # outer G shortened by one step so Until[0,1] fits inside the plan
        loop = Globally(0, T - half - 1, _loop_body(half))
        return And((Until(0, 1, loop, Predicate(TWICE_A)), Eventually(0, T, D)))
    if name == "branch":
        return Or(
            (
                And((Eventually(0, T, A), Eventually(0, T, B))),
                And((Eventually(0, T, C), Eventually(0, T, D))),
            )
        )
    raise UnknownSpecError(f"unknown spec {name!r}; choose from {', '.join(BUILTIN_NAMES)}")


def builtin_spec(name: str) -> SpecConfig:
    """Return the formula, plan length T and goal sampling interval k for ``name``."""
    key = name.lower()
    if key not in _LENGTHS:
        raise UnknownSpecError(f"unknown spec {name!r}; choose from {', '.join(BUILTIN_NAMES)}")
    T, k = _LENGTHS[key]
    return SpecConfig(key, _formula(key, T), T, k, dict(REGIONS))


def custom_spec(
    text: str,
    regions: dict,
    plan_length: int,
    sample_interval: int,
    name: str = "custom",
) -> SpecConfig:
    return SpecConfig(name, parse_spec(text, regions), plan_length, sample_interval, dict(regions))
