"""Exception hierarchy shared by every module.

All domain failures derive from :class:`MvlvError` so the CLI can map them to
exit code 1 with a machine-readable payload.
"""

from __future__ import annotations


class MvlvError(Exception):
    """Base class for all domain errors."""

    kind = "error"

    def to_dict(self) -> dict:
        return {"error": self.kind, "message": str(self)}


class ParseError(MvlvError):
    kind = "parse_error"

    def __init__(self, file, line: int, message: str):
        self.file = str(file)
        self.line = line
        self.message = message
        super().__init__(f"{self.file}:{line}: {message}")

    def to_dict(self) -> dict:
        return {"error": self.kind, "file": self.file, "line": self.line,
                "message": self.message}


class LinkError(MvlvError):
    kind = "link_error"


class TopologyError(MvlvError):
    kind = "topology_error"


class BaseConflictError(TopologyError):
    kind = "base_conflict"


class CapacityError(MvlvError):
    kind = "capacity_error"


class NonConvergence(MvlvError):
    kind = "non_convergence"

    def __init__(self, iterations: int, residual: float, message: str = ""):
        self.iterations = iterations
        self.residual = residual
        super().__init__(message or f"no convergence after {iterations} iterations "
                                    f"(residual {residual:.3e})")

    def to_dict(self) -> dict:
        return {"error": self.kind, "iterations": self.iterations,
                "residual": self.residual, "message": str(self)}


class SingularSystem(MvlvError):
    kind = "singular_system"


class ControlOscillation(MvlvError):
    kind = "control_oscillation"


class LoadSetMismatch(MvlvError):
    kind = "load_set_mismatch"


class EmptySampleError(MvlvError):
    kind = "empty_sample"


class ScenarioError(MvlvError):
    kind = "scenario_error"
