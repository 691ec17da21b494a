"""Integrated MV-LV distribution network modelling.

Parse OpenDSS-style circuits, splice pass-through buses, synthesize hybrid
MV-LV models from an MV circuit and a catalog of LV circuits, and solve
unbalanced three-phase power flows with tap control.
"""

from .demand import DemandScenario
from .dss_io import parse_circuit, write_circuit
from .errors import MvlvError
from .netmodel import NetworkModel, assign_bases, topology_report
from .pflow import SolveOptions, solve, solve_with_controls
from .reduce import certify, splice

__version__ = "0.1.0"

__all__ = ["DemandScenario", "MvlvError", "NetworkModel", "SolveOptions", "assign_bases",
           "certify", "parse_circuit", "solve", "solve_with_controls", "splice",
           "topology_report", "write_circuit"]
