"""Immutable multi-phase network model, per-unit bases and topology queries.

Phases are stored as integers 1, 2, 3 (A, B, C).  Line impedances are total
series impedance matrices in ohms; transformer impedances are per-unit on the
transformer's own rating.  Every transformation returns a new model.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Optional

import numpy as np

from .errors import BaseConflictError, LinkError, TopologyError

PHASE_NAMES = {1: "A", 2: "B", 3: "C"}
MV_THRESHOLD_KV = 1.0
CONNECTIONS = ("delta", "wye")


def _frozen_array(a) -> np.ndarray:
    arr = np.array(a, dtype=complex)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple[int, ...]
    base_kv: Optional[float] = None
    zone: Optional[str] = None
    lv_circuit_id: Optional[str] = None
    mv_feeder_id: Optional[str] = None

    def __post_init__(self):
        if not self.phases:
            raise TopologyError(f"bus {self.id!r} has no phases")
        if self.base_kv is not None and not self.base_kv > 0:
            raise TopologyError(f"bus {self.id!r} base_kv must be positive")


@dataclass(frozen=True, eq=False)
class LineBranch:
    """Series-impedance line; ``z`` is the total n x n impedance in ohms."""

    id: str
    from_bus: str
    to_bus: str
    phases: tuple[int, ...]
    z: np.ndarray
    length: float = 1.0
    linecode: Optional[str] = None

    def __post_init__(self):
        z = _frozen_array(self.z)
        n = len(self.phases)
        if z.shape != (n, n):
            raise TopologyError(f"line {self.id!r}: impedance shape {z.shape} does not "
                                f"match {n} phases")
        if not np.allclose(z, z.T, rtol=1e-12, atol=0.0):
            raise TopologyError(f"line {self.id!r}: impedance matrix not symmetric")
        if np.any(z.diagonal().real <= 0):
            raise TopologyError(f"line {self.id!r}: diagonal resistance must be positive")
        if len(set(self.phases)) != n:
            raise TopologyError(f"line {self.id!r}: repeated phase")
        object.__setattr__(self, "z", z)

    def __eq__(self, other):
        if not isinstance(other, LineBranch):
            return NotImplemented
        return (self.id == other.id and self.from_bus == other.from_bus
                and self.to_bus == other.to_bus and self.phases == other.phases
                and self.length == other.length and self.linecode == other.linecode
                and np.array_equal(self.z, other.z))

    __hash__ = None


@dataclass(frozen=True)
class TransformerBranch:
    """Three-phase two-winding transformer with an optional tap regulator.

    ``tap`` scales the LV winding turns, so raising it raises the LV voltage.
    ``band_pu`` is the half-width of the regulation band.
    """

    id: str
    hv_bus: str
    lv_bus: str
    conn_hv: str
    conn_lv: str
    kv_hv: float
    kv_lv: float
    rating_kva: float
    z_pu: complex
    tap: float = 1.0
    tap_min: float = 0.9
    tap_max: float = 1.1
    tap_steps: int = 32
    regulated: bool = False
    target_bus: Optional[str] = None
    setpoint_pu: float = 1.0
    band_pu: float = 0.0125

    phases = (1, 2, 3)

    def __post_init__(self):
        if self.conn_hv not in CONNECTIONS or self.conn_lv not in CONNECTIONS:
            raise TopologyError(f"transformer {self.id!r}: connections must be delta/wye")
        if not self.rating_kva > 0:
            raise TopologyError(f"transformer {self.id!r}: rating must be positive")
        if not 0 < abs(self.z_pu) < 0.5:
            raise TopologyError(f"transformer {self.id!r}: |z_pu| must lie in (0, 0.5)")
        if not (self.kv_hv > 0 and self.kv_lv > 0):
            raise TopologyError(f"transformer {self.id!r}: winding kV must be positive")
        if not self.tap_min <= self.tap <= self.tap_max:
            raise TopologyError(f"transformer {self.id!r}: tap {self.tap} outside "
                                f"[{self.tap_min}, {self.tap_max}]")
        if self.tap_steps < 1:
            raise TopologyError(f"transformer {self.id!r}: tap_steps must be >= 1")

    @property
    def tap_step(self) -> float:
        return (self.tap_max - self.tap_min) / self.tap_steps

    def z_ohm_lv(self) -> complex:
        """Per-phase series impedance in ohms referred to the LV side."""
        return self.z_pu * self.kv_lv ** 2 / (self.rating_kva / 1000.0)

    def regulated_bus(self) -> str:
        return self.target_bus or self.lv_bus


@dataclass(frozen=True)
class LoadPoint:
    id: str
    bus: str
    phases: tuple[int, ...]
    kw: float
    pf: float = 1.0
    kv: Optional[float] = None

    def __post_init__(self):
        if len(self.phases) not in (1, 3) or len(set(self.phases)) != len(self.phases):
            raise TopologyError(f"load {self.id!r}: must be single-phase or three-phase")
        if self.kw < 0:
            raise TopologyError(f"load {self.id!r}: kW must be non-negative")
        if not 0 < self.pf <= 1:
            raise TopologyError(f"load {self.id!r}: pf must be in (0, 1]")


@dataclass(frozen=True)
class Source:
    """Slack bus: fixed voltage behind an optional sequence impedance (ohms)."""

    bus: str
    base_kv: float
    pu: float = 1.0
    angle_deg: float = 0.0
    phases: tuple[int, ...] = (1, 2, 3)
    r1: float = 0.0
    x1: float = 0.0
    r0: float = 0.0
    x0: float = 0.0

    def __post_init__(self):
        # zero-sequence impedance defaults to the positive-sequence one
        if self.r0 == 0 and self.x0 == 0:
            object.__setattr__(self, "r0", self.r1)
            object.__setattr__(self, "x0", self.x1)
        if self.has_impedance and (complex(self.r1, self.x1) == 0 or self.r1 < 0 or self.r0 < 0):
            raise TopologyError("source impedance needs nonzero z1 and non-negative resistance")

    @property
    def has_impedance(self) -> bool:
        return any((self.r1, self.x1, self.r0, self.x0))

    def z_matrix(self) -> np.ndarray:
        z1 = complex(self.r1, self.x1)
        z0 = complex(self.r0, self.x0)
        n = len(self.phases)
        zs, zm = (2 * z1 + z0) / 3, (z0 - z1) / 3
        return np.full((n, n), zm, dtype=complex) + np.eye(n) * (zs - zm)


@dataclass(frozen=True, eq=False)
class NetworkModel:
    name: str
    buses: tuple[Bus, ...]
    lines: tuple[LineBranch, ...]
    transformers: tuple[TransformerBranch, ...]
    loads: tuple[LoadPoint, ...]
    source: Source
    base_frequency: float = 50.0

    def __post_init__(self):
        for attr in ("buses", "lines", "transformers", "loads"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))
        index = {}
        for b in self.buses:
            if b.id in index:
                raise TopologyError(f"duplicate bus {b.id!r}")
            index[b.id] = b
        if self.source.bus not in index:
            raise LinkError(f"source bus {self.source.bus!r} not defined")
        _require_phases(index, self.source.bus, self.source.phases, "source")
        seen = set()
        for ln in self.lines:
            if ("line", ln.id) in seen:
                raise TopologyError(f"duplicate line {ln.id!r}")
            seen.add(("line", ln.id))
            _require_phases(index, ln.from_bus, ln.phases, f"line {ln.id}")
            _require_phases(index, ln.to_bus, ln.phases, f"line {ln.id}")
            if ln.from_bus == ln.to_bus:
                raise TopologyError(f"line {ln.id!r} connects bus {ln.from_bus!r} to itself")
        for tr in self.transformers:
            if ("tr", tr.id) in seen:
                raise TopologyError(f"duplicate transformer {tr.id!r}")
            seen.add(("tr", tr.id))
            _require_phases(index, tr.hv_bus, tr.phases, f"transformer {tr.id}")
            _require_phases(index, tr.lv_bus, tr.phases, f"transformer {tr.id}")
            if tr.target_bus is not None and tr.target_bus not in index:
                raise LinkError(f"transformer {tr.id!r}: target bus {tr.target_bus!r} undefined")
        for ld in self.loads:
            if ("load", ld.id) in seen:
                raise TopologyError(f"duplicate load {ld.id!r}")
            seen.add(("load", ld.id))
            _require_phases(index, ld.bus, ld.phases, f"load {ld.id}")

    def __eq__(self, other):
        if not isinstance(other, NetworkModel):
            return NotImplemented
        return (self.name == other.name and self.buses == other.buses
                and self.lines == other.lines and self.transformers == other.transformers
                and self.loads == other.loads and self.source == other.source
                and self.base_frequency == other.base_frequency)

    __hash__ = object.__hash__

    @cached_property
    def bus_index(self) -> dict[str, Bus]:
        return {b.id: b for b in self.buses}

    @cached_property
    def load_index(self) -> dict[str, LoadPoint]:
        return {ld.id: ld for ld in self.loads}

    def bus(self, bus_id: str) -> Bus:
        return self.bus_index[bus_id]

    @property
    def node_count(self) -> int:
        return sum(len(b.phases) for b in self.buses)

    @property
    def has_bases(self) -> bool:
        return all(b.base_kv is not None for b in self.buses)

    def edges(self) -> Iterable[tuple[str, str, str]]:
        """(from, to, element id) for every branch; transformer ids are prefixed."""
        for ln in self.lines:
            yield ln.from_bus, ln.to_bus, ln.id
        for tr in self.transformers:
            yield tr.hv_bus, tr.lv_bus, "transformer:" + tr.id

    def adjacency(self) -> dict[str, list[tuple[str, str]]]:
        adj: dict[str, list[tuple[str, str]]] = {b.id: [] for b in self.buses}
        for a, b, eid in self.edges():
            adj[a].append((b, eid))
            adj[b].append((a, eid))
        return adj

    def replace(self, **changes) -> "NetworkModel":
        return replace(self, **changes)


def _require_phases(index, bus_id, phases, what):
    bus = index.get(bus_id)
    if bus is None:
        raise LinkError(f"{what}: bus {bus_id!r} not defined")
    missing = set(phases) - set(bus.phases)
    if missing:
        raise LinkError(f"{what}: bus {bus_id!r} lacks phases "
                        f"{''.join(PHASE_NAMES[p] for p in sorted(missing))}")


def build_buses(model_buses: dict[str, set[int]]) -> tuple[Bus, ...]:
    return tuple(Bus(bid, tuple(sorted(ph))) for bid, ph in model_buses.items())


def assign_bases(model: NetworkModel, source_kv: Optional[float] = None) -> NetworkModel:
    """Propagate base voltages from the source across transformers.

    Also labels zones (MV at or above 1 kV), the LV circuit each LV bus belongs
    to (the id of the transformer feeding its LV island) and the MV feeder
    (the first line leaving the MV busbar on the path from the source).
    """
    src_kv = source_kv if source_kv is not None else model.source.base_kv
    adj = defaultdict(list)
    for ln in model.lines:
        adj[ln.from_bus].append((ln.to_bus, 1.0))
        adj[ln.to_bus].append((ln.from_bus, 1.0))
    for tr in model.transformers:
        adj[tr.hv_bus].append((tr.lv_bus, tr.kv_lv / tr.kv_hv))
        adj[tr.lv_bus].append((tr.hv_bus, tr.kv_hv / tr.kv_lv))

    base = {model.source.bus: float(src_kv)}
    queue = deque([model.source.bus])
    while queue:
        u = queue.popleft()
        for v, ratio in adj[u]:
            kv = base[u] * ratio
            if v in base:
                if not math.isclose(base[v], kv, rel_tol=1e-9):
                    raise BaseConflictError(
                        f"bus {v!r}: base {base[v]:.6g} kV conflicts with {kv:.6g} kV "
                        f"reached via {u!r}")
                continue
            base[v] = kv
            queue.append(v)

    zone = {b: ("MV" if kv >= MV_THRESHOLD_KV else "LV") for b, kv in base.items()}
    lv_circuit, mv_feeder = _label_regions(model, zone)
    buses = tuple(
        replace(b, base_kv=base.get(b.id), zone=zone.get(b.id),
                lv_circuit_id=lv_circuit.get(b.id), mv_feeder_id=mv_feeder.get(b.id))
        for b in model.buses)
    return replace(model, buses=buses)


def _label_regions(model: NetworkModel, zone: dict[str, str]):
    line_adj = defaultdict(list)
    for ln in model.lines:
        line_adj[ln.from_bus].append((ln.to_bus, ln.id))
        line_adj[ln.to_bus].append((ln.from_bus, ln.id))

    # MV busbar: LV side of MV/MV transformers at the source, else the source bus.
    busbars = [tr.lv_bus for tr in model.transformers
               if model.source.bus in (tr.hv_bus,) and zone.get(tr.lv_bus) == "MV"]
    if not busbars and zone.get(model.source.bus) == "MV":
        busbars = [model.source.bus]
    mv_feeder: dict[str, str] = {}
    for bb in sorted(set(busbars)):
        for nb, lid in sorted(line_adj[bb], key=lambda t: t[1]):
            if nb in mv_feeder or nb in busbars or zone.get(nb) != "MV":
                continue
            mv_feeder[nb] = lid
            queue = deque([nb])
            while queue:
                u = queue.popleft()
                for v, _ in line_adj[u]:
                    if v not in mv_feeder and v not in busbars and zone.get(v) == "MV":
                        mv_feeder[v] = lid
                        queue.append(v)

    lv_circuit: dict[str, str] = {}
    for tr in sorted(model.transformers, key=lambda t: t.id):
        if zone.get(tr.lv_bus) != "LV" or zone.get(tr.hv_bus) != "MV":
            continue
        if tr.lv_bus in lv_circuit:
            continue
        feeder = mv_feeder.get(tr.hv_bus)
        lv_circuit[tr.lv_bus] = tr.id
        queue = deque([tr.lv_bus])
        while queue:
            u = queue.popleft()
            if feeder is not None:
                mv_feeder.setdefault(u, feeder)
            for v, _ in line_adj[u]:
                if v not in lv_circuit and zone.get(v) == "LV":
                    lv_circuit[v] = tr.id
                    queue.append(v)
    return lv_circuit, mv_feeder


def connected_components(model: NetworkModel) -> list[list[str]]:
    adj = model.adjacency()
    seen: set[str] = set()
    comps = []
    for b in model.buses:
        if b.id in seen:
            continue
        comp = []
        seen.add(b.id)
        queue = deque([b.id])
        while queue:
            u = queue.popleft()
            comp.append(u)
            for v, _ in adj[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        comps.append(sorted(comp))
    return comps


def topology_report(model: NetworkModel) -> dict:
    """Radiality, islands, degree histogram and bus-phase node count.

    Parallel elements between the same pair of buses count as one graph edge.
    ``islands`` lists the components not connected to the source.
    """
    pairs = {frozenset((a, b)) for a, b, _ in model.edges()}
    degree = Counter()
    for pair in pairs:
        for b in pair:
            degree[b] += 1
    comps = connected_components(model)
    islands = [c for c in comps if model.source.bus not in c]
    hist = Counter(degree.get(b.id, 0) for b in model.buses)
    return {
        "is_radial": not islands and len(pairs) == len(model.buses) - 1,
        "islands": islands,
        "degree_histogram": {str(k): hist[k] for k in sorted(hist)},
        "node_count": model.node_count,
    }
