"""Ground-truth scenarios: trace replay, synthetic grid, attackers, pseudonyms."""

from mbdsim.scenario.attack import AttackConfig, assign_roles, falsify_position
from mbdsim.scenario.grid import GridParams, synth_grid
from mbdsim.scenario.model import PSEUDONYM_PERIOD, Scenario, Trajectory, ValidationError
from mbdsim.scenario.trace import load_trace

__all__ = [
    "AttackConfig",
    "GridParams",
    "PSEUDONYM_PERIOD",
    "Scenario",
    "Trajectory",
    "ValidationError",
    "assign_roles",
    "falsify_position",
    "load_trace",
    "synth_grid",
]
