"""Flexibility case-study builders: peer-to-peer trading and system-wide uptake."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .demand import DemandScenario
from .errors import ScenarioError
from .netmodel import NetworkModel, assign_bases
from .pflow import PowerFlowSolution, SolveOptions, solve_with_controls, write_voltage_csv
from .report import (HIGH_KW, LOW_KW, StatutoryLimits, Violation, emergency_check,
                     statutory_check, uniform_scenario, voltage_stats, write_stats_csv,
                     write_violations_csv)


@dataclass(frozen=True)
class Scenario:
    base: DemandScenario
    overrides: Mapping[str, float] = field(default_factory=dict)
    metadata: Mapping[str, object] = field(default_factory=dict)

    @property
    def demand(self) -> DemandScenario:
        return self.base.with_overrides(self.overrides, label=self.metadata.get("type", ""))

    def added_kw(self) -> float:
        return float(sum(self.overrides.values()))

    def to_dict(self) -> dict:
        meta = dict(self.metadata)
        return {"type": meta.pop("type", ""), "params": meta.pop("params", {}),
                "seed": meta.pop("seed", None),
                "overrides": {k: self.overrides[k] for k in sorted(self.overrides)}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _loads_by_circuit(model: NetworkModel) -> dict[str, list[str]]:
    if not model.has_bases:
        model = assign_bases(model)
    out: dict[str, list[str]] = {}
    for ld in model.loads:
        cid = model.bus(ld.bus).lv_circuit_id
        if cid is not None:
            out.setdefault(cid, []).append(ld.id)
    return {k: sorted(v) for k, v in out.items()}


def _pick(ids: list[str], n: int, rng: Optional[np.random.Generator]) -> list[str]:
    if rng is None:
        return ids[:n]
    return sorted(rng.choice(ids, size=n, replace=False).tolist())


def peer2peer(model: NetworkModel, exporting_circuit: str, importing_circuit: str,
              n_pairs: int = 15, kw: float = 3.0, base: Optional[DemandScenario] = None,
              seed: Optional[int] = None) -> Scenario:
    """PV export on one LV circuit matched by EV charging on another.

    Hosts are the first ``n_pairs`` loads by id on each circuit, or a seeded
    random choice when ``seed`` is given.
    """
    groups = _loads_by_circuit(model)
    for cid in (exporting_circuit, importing_circuit):
        if cid not in groups:
            raise ScenarioError(f"unknown LV circuit {cid!r}")
        if len(groups[cid]) < n_pairs:
            raise ScenarioError(f"LV circuit {cid!r} has {len(groups[cid])} loads, "
                                f"fewer than {n_pairs}")
    rng = np.random.default_rng(seed) if seed is not None else None
    base = base or uniform_scenario(model, LOW_KW, label="Low")
    overrides: dict[str, float] = {}
    for lid in _pick(groups[exporting_circuit], n_pairs, rng):
        overrides[lid] = overrides.get(lid, 0.0) - kw
    for lid in _pick(groups[importing_circuit], n_pairs, rng):
        overrides[lid] = overrides.get(lid, 0.0) + kw
    meta = {"type": "peer2peer", "seed": seed,
            "params": {"exporting_circuit": exporting_circuit,
                       "importing_circuit": importing_circuit, "n_pairs": n_pairs, "kw": kw,
                       "base": base.label,
                       "selection": "seeded-random" if seed is not None else "sorted-id-prefix"}}
    return Scenario(base, overrides, meta)


def flex_uptake(model: NetworkModel, fraction: float = 0.13, delta_kw: float = 3.0,
                seed: int = 0, base: Optional[DemandScenario] = None) -> Scenario:
    """Raise demand by ``delta_kw`` at ceil(fraction * n_loads) random loads."""
    if not 0 <= fraction <= 1:
        raise ScenarioError("fraction must lie in [0, 1]")
    ids = sorted(ld.id for ld in model.loads)
    k = math.ceil(round(fraction * len(ids), 9))
    rng = np.random.default_rng(seed)
    chosen = _pick(ids, k, rng) if k else []
    base = base or uniform_scenario(model, HIGH_KW, label="High")
    meta = {"type": "flex_uptake", "seed": seed,
            "params": {"fraction": fraction, "delta_kw": delta_kw, "n_selected": k,
                       "base": base.label}}
    return Scenario(base, {lid: delta_kw for lid in chosen}, meta)


@dataclass(frozen=True)
class ScenarioResult:
    solution: PowerFlowSolution
    violations: list
    emergency: list
    stats: list
    summary: dict


def _worst(violations: list[Violation]) -> Optional[float]:
    if not violations:
        return None
    return max(abs(v.v_pu - v.bound) for v in violations)


def run(scenario: Scenario, model: NetworkModel, opts: SolveOptions = SolveOptions(),
        limits: StatutoryLimits = StatutoryLimits()) -> ScenarioResult:
    unknown = set(scenario.overrides) - set(ld.id for ld in model.loads)
    if unknown:
        raise ScenarioError(f"overrides for unknown loads: {sorted(unknown)[:5]}")
    sol = solve_with_controls(model, scenario.demand, opts)
    viol = statutory_check(sol, limits)
    emer = emergency_check(sol, limits)
    summary = {"violations": len(viol), "worst_violation_pu": _worst(viol),
               "emergency_violations": len(emer), "worst_emergency_pu": _worst(emer),
               "added_kw": scenario.added_kw(), "time_basis": "snapshot only",
               "band_unmet": list(sol.band_unmet)}
    return ScenarioResult(sol, viol, emer, voltage_stats(sol), summary)


def write_results(result: ScenarioResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "voltages.csv", out / "violations.csv", out / "stats.csv"]
    write_voltage_csv(result.solution, paths[0])
    write_violations_csv(result.violations, paths[1])
    write_stats_csv(result.stats, paths[2])
    return paths
