"""Contest equilibria, discriminatory-weight design and staggered-adoption DiD tools."""

from contest_lab.core import (
    ClassificationScheme,
    ContestError,
    ContestSpec,
    EffortProfile,
    EquilibriumSolution,
    Regime,
    SpecError,
    expected_utility,
    load_scenario,
    win_probability,
)
from contest_lab.design import classify_costs, compare_task_counts, optimal_weights, specialization_report
from contest_lab.did import RegressionSpec, cs_group_time, event_study, placebo_test, twfe
from contest_lab.equilibrium import SolverSettings, brute_force_oracle, solve
from contest_lab.panel import PanelConfig, generate_contest_linked_panel, generate_panel, read_panel, write_panel

__version__ = "0.1.0"

__all__ = [
    "ClassificationScheme", "ContestError", "ContestSpec", "EffortProfile", "EquilibriumSolution", "Regime",
    "SpecError", "expected_utility", "load_scenario", "win_probability", "classify_costs", "compare_task_counts",
    "optimal_weights", "specialization_report", "RegressionSpec", "cs_group_time", "event_study", "placebo_test",
    "twfe", "SolverSettings", "brute_force_oracle", "solve", "PanelConfig", "generate_contest_linked_panel",
    "generate_panel", "read_panel", "write_panel",
]
