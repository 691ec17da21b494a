"""Per-load demand assignments layered over a network model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

from .errors import ScenarioError


@dataclass(frozen=True)
class DemandScenario:
    """Map of load id to (kW, pf).  Negative kW is a generation injection."""

    loads: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        loads = {}
        for lid, (kw, pf) in dict(self.loads).items():
            if not 0 < pf <= 1:
                raise ScenarioError(f"load {lid!r}: pf {pf} outside (0, 1]")
            loads[lid] = (float(kw), float(pf))
        object.__setattr__(self, "loads", MappingProxyType(loads))

    def complex_power_kva(self, load_id: str) -> complex:
        kw, pf = self.loads.get(load_id, (0.0, 1.0))
        kvar = kw * math.tan(math.acos(pf)) if pf < 1 else 0.0
        return complex(kw, kvar)

    def total_kw(self) -> float:
        return sum(kw for kw, _ in self.loads.values())

    def with_overrides(self, overrides: Mapping[str, float], label: str | None = None):
        """Add signed kW deltas to the listed loads; pf is kept."""
        loads = dict(self.loads)
        for lid, delta in overrides.items():
            kw, pf = loads.get(lid, (0.0, 1.0))
            loads[lid] = (kw + delta, pf)
        return DemandScenario(loads, self.label if label is None else label)

    def __hash__(self):
        return hash((self.label, tuple(sorted(self.loads.items()))))
