from .enumeration import (
    InvariantReport,
    MAX_SITES,
    ScenarioFinding,
    enumerate_and_check,
    expected_scenario_count,
    normalize_sites,
    site_label,
)
from .invariants import Violation, check_invariants
from .scenario import FaultSpec, ScenarioInvalid, ScenarioSpec, SendSpec, ServiceProfile
from .sim import SimWorld, run
from .trace import Trace, TraceRecorder, body_digest

__all__ = [
    "FaultSpec",
    "InvariantReport",
    "MAX_SITES",
    "ScenarioFinding",
    "ScenarioInvalid",
    "ScenarioSpec",
    "SendSpec",
    "ServiceProfile",
    "SimWorld",
    "Trace",
    "TraceRecorder",
    "Violation",
    "body_digest",
    "check_invariants",
    "enumerate_and_check",
    "expected_scenario_count",
    "normalize_sites",
    "run",
    "site_label",
]
