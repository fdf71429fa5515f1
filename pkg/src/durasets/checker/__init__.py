"""History recording, crash injection and durable-linearizability checking."""

from .history import History, HistoryEvent, MalformedHistory, Operation, apply_op
from .linearize import DEFAULT_BUDGET, Verdict, check_durable, check_linearizable, replay
from .scenario import (Phase, Scenario, ScenarioRun, ScriptOp, count_steps, format_scenario,
                       inject_crash, parse_scenario, random_scenario, run_phase, run_scenario)
from .survival import NOT_APPLICABLE, NOT_SURVIVED, SURVIVED, classify_surviving

__all__ = [
    "History", "HistoryEvent", "MalformedHistory", "Operation", "apply_op",
    "DEFAULT_BUDGET", "Verdict", "check_durable", "check_linearizable", "replay",
    "Phase", "Scenario", "ScenarioRun", "ScriptOp", "count_steps", "format_scenario",
    "inject_crash", "parse_scenario", "random_scenario", "run_phase", "run_scenario",
    "NOT_APPLICABLE", "NOT_SURVIVED", "SURVIVED", "classify_surviving",
]
