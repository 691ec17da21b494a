"""Demand conditions, voltage statistics, statutory limits and QQ comparison."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .demand import DemandScenario
from .errors import EmptySampleError, ScenarioError
from .netmodel import PHASE_NAMES, NetworkModel, assign_bases
from .pflow import PowerFlowSolution, fmt

HIGH_KW = 1.3
LOW_KW = 0.16
NOMINAL_LV_VOLTS = 230.0

__all__ = ["DemandScenario", "VoltageStats", "StatutoryLimits", "Violation",
           "uniform_scenario", "voltage_stats", "statutory_check", "emergency_check",
           "qq", "read_measurements", "MeasurementSample"]


@dataclass(frozen=True)
class VoltageStats:
    group_id: str
    n: int
    v_min: float
    v_q1: float
    v_med: float
    v_q3: float
    v_max: float


@dataclass(frozen=True)
class StatutoryLimits:
    mv: tuple[float, float] = (0.94, 1.06)
    lv: tuple[float, float] = (0.94, 1.10)
    emergency_floor: float = 0.85
    emergency_time_fraction: float = 0.05

    def __post_init__(self):
        for lo, hi in (self.mv, self.lv):
            if not lo < hi:
                raise ValueError("lower limit must be below upper limit")


@dataclass(frozen=True)
class Violation:
    bus: str
    phase: int
    v_pu: float
    bound: float
    zone: str


def uniform_scenario(model: NetworkModel, kw_per_load: float, pf: float = 1.0,
                     label: str = "") -> DemandScenario:
    """Same kW at every LV load; MV-connected loads scaled by kw / 1.3."""
    if kw_per_load < 0:
        raise ScenarioError("kw_per_load must be non-negative")
    if not model.has_bases:
        model = assign_bases(model)
    scale = kw_per_load / HIGH_KW
    loads = {}
    for ld in model.loads:
        if model.bus(ld.bus).zone == "MV":
            loads[ld.id] = (ld.kw * scale, pf)
        else:
            loads[ld.id] = (kw_per_load, pf)
    return DemandScenario(loads, label or f"{kw_per_load:g} kW")


def _median(sorted_vals: Sequence[float]) -> float:
    n = len(sorted_vals)
    mid = n // 2
    if n % 2:
        return sorted_vals[mid]
    return 0.5 * (sorted_vals[mid - 1] + sorted_vals[mid])


def five_number(values: Iterable[float]) -> tuple[float, float, float, float, float]:
    """min, Q1, median, Q3, max; quartiles are medians of the lower/upper halves
    (the median itself excluded from both halves when the count is odd)."""
    v = sorted(values)
    n = len(v)
    if n == 0:
        raise EmptySampleError("no values")
    if n == 1:
        return (v[0],) * 5
    half = n // 2
    lower, upper = v[:half], v[n - half:]
    return v[0], _median(lower), _median(v), _median(upper), v[-1]


def voltage_stats(solution: PowerFlowSolution, group_by: str = "lv_circuit_id"
                  ) -> list[VoltageStats]:
    """Five-number summaries of load voltages per LV circuit or MV feeder."""
    if group_by not in ("lv_circuit_id", "mv_feeder_id"):
        raise ValueError("group_by must be lv_circuit_id or mv_feeder_id")
    model = solution.model
    groups = defaultdict(list)
    for lid, v in solution.load_v_pu().items():
        key = getattr(model.bus(model.load_index[lid].bus), group_by)
        if key is not None:
            groups[key].append(v)
    return [VoltageStats(g, len(vals), *five_number(vals)) for g, vals in sorted(groups.items())]


def statutory_check(solution: PowerFlowSolution,
                    limits: StatutoryLimits = StatutoryLimits()) -> list[Violation]:
    """Every bus-phase outside its zone's limits, ordered by bus then phase."""
    model = solution.model
    out = []
    vpu = solution.v_pu
    for i in range(len(solution.node_bus)):
        bus = model.bus(solution.node_bus[i])
        lo, hi = limits.mv if bus.zone == "MV" else limits.lv
        v = float(vpu[i])
        if v < lo:
            out.append(Violation(bus.id, int(solution.node_phase[i]), v, lo, bus.zone or ""))
        elif v > hi:
            out.append(Violation(bus.id, int(solution.node_phase[i]), v, hi, bus.zone or ""))
    out.sort(key=lambda x: (x.bus, x.phase))
    return out


def emergency_check(solution: PowerFlowSolution,
                    limits: StatutoryLimits = StatutoryLimits()) -> list[Violation]:
    """Bus-phases below the emergency floor (snapshot only, no time fraction)."""
    model = solution.model
    vpu = solution.v_pu
    out = [Violation(solution.node_bus[i], int(solution.node_phase[i]), float(vpu[i]),
                     limits.emergency_floor, model.bus(solution.node_bus[i]).zone or "")
           for i in np.flatnonzero(vpu < limits.emergency_floor)]
    out.sort(key=lambda x: (x.bus, x.phase))
    return out


def qq(model_sample, measured_sample, probs) -> list[tuple[float, float]]:
    """Paired linear-interpolation quantiles at each probability."""
    a = np.asarray(model_sample, dtype=float)
    b = np.asarray(measured_sample, dtype=float)
    if a.size == 0 or b.size == 0:
        raise EmptySampleError("qq needs two non-empty samples")
    p = np.asarray(probs, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("probabilities must lie in (0, 1)")
    qa = np.quantile(a, p, method="linear")
    qb = np.quantile(b, p, method="linear")
    return [(float(x), float(y)) for x, y in zip(qa, qb)]


@dataclass(frozen=True)
class MeasurementSample:
    values: np.ndarray
    rejected: int


MEASUREMENT_COLUMNS = ("timestamp_iso8601", "device_id", "v_avg_volts")


def read_measurements(csv_path, nominal_volts: float = NOMINAL_LV_VOLTS) -> MeasurementSample:
    """Voltage samples in pu of ``nominal_volts``; bad rows are counted and dropped."""
    values, rejected = [], 0
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MEASUREMENT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise EmptySampleError(f"{csv_path}: missing columns {sorted(missing)}")
        for row in reader:
            try:
                v = float(row["v_avg_volts"])
            except (TypeError, ValueError):
                rejected += 1
                continue
            if not math.isfinite(v) or v <= 0:
                rejected += 1
                continue
            values.append(v / nominal_volts)
    if not values:
        raise EmptySampleError(f"{csv_path}: no valid voltage rows ({rejected} rejected)")
    arr = np.array(values)
    arr.setflags(write=False)
    return MeasurementSample(arr, rejected)


STATS_COLUMNS = ("group_id", "n", "v_min", "v_q1", "v_med", "v_q3", "v_max")
VIOLATION_COLUMNS = ("bus_id", "phase", "v_pu", "zone", "bound_violated")
QQ_COLUMNS = ("p", "model_q", "measured_q")


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_stats_csv(stats: Sequence[VoltageStats], path) -> None:
    _write(path, STATS_COLUMNS,
           ((s.group_id, s.n, fmt(s.v_min), fmt(s.v_q1), fmt(s.v_med), fmt(s.v_q3),
             fmt(s.v_max)) for s in stats))


def write_violations_csv(violations: Sequence[Violation], path) -> None:
    _write(path, VIOLATION_COLUMNS,
           ((v.bus, PHASE_NAMES[v.phase], fmt(v.v_pu), v.zone, fmt(v.bound))
            for v in violations))


def write_qq_csv(probs, pairs, path) -> None:
    _write(path, QQ_COLUMNS, ((fmt(p), fmt(a), fmt(b)) for p, (a, b) in zip(probs, pairs)))
