"""Hybrid MV-LV model synthesis.

LV circuits are sized with an after-diversity maximum demand (ADMD) rule,
matched to MV loads by a seeded randomized nearest-rating rule, and grafted
onto the MV circuit behind their own secondary transformers.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .dss_io import parse_circuit
from .errors import CapacityError, LinkError, ScenarioError, TopologyError
from .netmodel import (Bus, LineBranch, LoadPoint, NetworkModel, Source,
                       TransformerBranch, topology_report)
from .reduce import splice

log = logging.getLogger(__name__)

SECONDARY_Z_PU = complex(0.01, 0.05)
PRIMARY_Z_PU = complex(0.0088, 0.1997)
DEFAULT_SIGMA = 0.175
KVA_PER_CUSTOMER = 1.3


@dataclass(frozen=True)
class AdmdParams:
    s1: float = 5.325
    alpha: float = 0.262
    s_inf: float = 1.5

    def __post_init__(self):
        if not self.s1 > self.s_inf > 0:
            raise ValueError("need s1 > s_inf > 0")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")

    @property
    def crossover(self) -> float:
        """Customer count where the per-load floor takes over."""
        return (self.s1 / self.s_inf) ** (1.0 / self.alpha)


DEFAULT_ADMD = AdmdParams()
DEFAULT_CATALOG = (25.0, 50.0, 100.0, 200.0, 315.0, 500.0, 800.0, 1000.0, 1500.0)


def admd(n_loads: int, params: AdmdParams = DEFAULT_ADMD) -> float:
    """Group ADMD in kVA: n * max(S1 * n**-alpha, S_inf)."""
    if n_loads < 1:
        raise ValueError("n_loads must be >= 1")
    return n_loads * max(params.s1 * n_loads ** (-params.alpha), params.s_inf)


def select_transformer(admd_kva: float, catalog: Sequence[float] = DEFAULT_CATALOG) -> float:
    """Smallest catalog rating at or above the demand."""
    ratings = list(catalog)
    if not ratings:
        raise ValueError("empty transformer catalog")
    if any(b <= a for a, b in zip(ratings, ratings[1:])) or ratings[0] <= 0:
        raise ValueError("catalog must be positive and strictly increasing")
    for r in ratings:
        if r >= admd_kva:
            return r
    raise CapacityError(f"{admd_kva:.1f} kVA exceeds the largest rating {ratings[-1]:g} kVA")


def make_secondary_transformer(rating_kva: float, id: str = "secondary",
                               hv_bus: str = "hv", lv_bus: str = "lv", kv_hv: float = 11.0,
                               kv_lv: float = 0.4) -> TransformerBranch:
    return TransformerBranch(id, hv_bus, lv_bus, "delta", "wye", kv_hv, kv_lv, rating_kva,
                             SECONDARY_Z_PU)


def make_primary_transformer(rating_kva: float, id: str = "primary", hv_bus: str = "hv",
                             lv_bus: str = "lv", kv_hv: float = 33.0, kv_lv: float = 11.0,
                             setpoint_pu: float = 1.0, band_pu: float = 0.0125
                             ) -> TransformerBranch:
    return TransformerBranch(id, hv_bus, lv_bus, "delta", "wye", kv_hv, kv_lv, rating_kva,
                             PRIMARY_Z_PU, regulated=True, target_bus=lv_bus,
                             setpoint_pu=setpoint_pu, band_pu=band_pu)


@dataclass(frozen=True)
class LvCatalogEntry:
    circuit_id: str
    model: NetworkModel
    n_loads: int
    rating_kva: float
    is_single_feeder: bool = False

    @property
    def root(self) -> str:
        return self.model.source.bus


def _reachable(model: NetworkModel, start: str, blocked: set[str] = frozenset()) -> set[str]:
    adj = {b.id: [] for b in model.buses}
    for ln in model.lines:
        adj[ln.from_bus].append(ln.to_bus)
        adj[ln.to_bus].append(ln.from_bus)
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen and v not in blocked:
                seen.add(v)
                queue.append(v)
    return seen


def _submodel(model: NetworkModel, keep: set[str], root: str, base_kv: float,
              name: Optional[str] = None) -> NetworkModel:
    buses = tuple(b for b in model.buses if b.id in keep)
    buses = tuple(Bus(b.id, b.phases) for b in buses)
    lines = tuple(ln for ln in model.lines if ln.from_bus in keep and ln.to_bus in keep)
    loads = tuple(ld for ld in model.loads if ld.bus in keep)
    root_bus = next(b for b in buses if b.id == root)
    return NetworkModel(name or model.name, buses, lines, (), loads,
                        Source(root, base_kv, phases=root_bus.phases),
                        base_frequency=model.base_frequency)


def lv_circuit(model: NetworkModel, circuit_id: Optional[str] = None) -> NetworkModel:
    """The LV part of a circuit file, rooted at its LV busbar.

    With one transformer, everything on its HV side is dropped (the original
    transformer is replaced during assembly); without one, the source bus is
    the busbar.
    """
    if len(model.transformers) > 1:
        raise TopologyError(f"LV circuit {model.name!r} has {len(model.transformers)} "
                            f"transformers; expected at most one")
    if model.transformers:
        tr = model.transformers[0]
        root, base = tr.lv_bus, tr.kv_lv
    else:
        root, base = model.source.bus, model.source.base_kv
    keep = _reachable(model, root)
    return _submodel(model, keep, root, base, circuit_id)


def feeders(model: NetworkModel) -> list[tuple[str, set[str]]]:
    """(head line id, downstream buses) for each line leaving the source bus."""
    root = model.source.bus
    heads = sorted((ln for ln in model.lines if root in (ln.from_bus, ln.to_bus)),
                   key=lambda ln: ln.id)
    out = []
    for ln in heads:
        first = ln.to_bus if ln.from_bus == root else ln.from_bus
        out.append((ln.id, _reachable(model, first, {root})))
    return out


def _without(model: NetworkModel, drop: set[str]) -> NetworkModel:
    keep = {b.id for b in model.buses} - drop
    return _submodel(model, keep, model.source.bus, model.source.base_kv)


def build_lv_catalog(circuits: Mapping[str, NetworkModel], *,
                     unbalance_threshold: float = 0.05, max_loads: int = 500,
                     include_single_feeders: bool = True, do_splice: bool = True,
                     params: AdmdParams = DEFAULT_ADMD) -> list[LvCatalogEntry]:
    """Preprocess raw LV circuits into allocation entries.

    Feeders whose head zero/positive sequence current ratio exceeds the
    threshold at 1.3 kW per load are removed; circuits with ``max_loads`` or
    more loads lose their last feeder until they fit.  The first feeder of
    each multi-feeder circuit is also offered on its own.
    """
    from .pflow import sequence_unbalance, solve
    from .report import uniform_scenario

    entries = []
    for cid in sorted(circuits):
        m = lv_circuit(circuits[cid], cid)
        if do_splice:
            m, _ = splice(m)
        if m.loads and unbalance_threshold is not None:
            sol = solve(m, uniform_scenario(m, KVA_PER_CUSTOMER))
            drop = set()
            for head, buses in feeders(m):
                ln = next(x for x in m.lines if x.id == head)
                if tuple(ln.phases) != (1, 2, 3):
                    continue
                try:
                    ratio = sequence_unbalance(sol, head)
                except ValueError:
                    continue
                if ratio > unbalance_threshold:
                    log.info("%s: dropping feeder %s (zero-sequence ratio %.3f)", cid, head, ratio)
                    drop |= buses
            if drop:
                m = _without(m, drop)
        fl = feeders(m)
        while len(m.loads) >= max_loads and len(fl) > 1:
            head, buses = fl[-1]
            log.info("%s: dropping feeder %s to stay under %d loads", cid, head, max_loads)
            m = _without(m, buses)
            fl = feeders(m)
        if not m.loads:
            log.info("%s: no loads left, skipped", cid)
            continue
        entries.append(LvCatalogEntry(cid, m, len(m.loads), admd(len(m.loads), params)))
        if include_single_feeders and len(fl) > 1:
            head, buses = fl[0]
            sub = _submodel(m, buses | {m.source.bus}, m.source.bus, m.source.base_kv,
                            f"{cid}_f1")
            if sub.loads:
                entries.append(LvCatalogEntry(f"{cid}_f1", sub, len(sub.loads),
                                              admd(len(sub.loads), params), True))
    return entries


def load_lv_catalog(directory, **kwargs) -> list[LvCatalogEntry]:
    """Read every ``*/master.dss`` (or top-level ``*.dss``) under a directory."""
    root = Path(directory)
    masters = sorted(root.glob("*/master.dss")) or sorted(root.glob("*.dss"))
    if not masters:
        raise LinkError(f"no LV circuits found under {root}")
    circuits = {}
    for path in masters:
        cid = path.parent.name if path.name == "master.dss" else path.stem
        circuits[cid.lower()] = parse_circuit(path)
    return build_lv_catalog(circuits, **kwargs)


@dataclass(frozen=True)
class AllocationEntry:
    mv_load: str
    kw: float
    draw: float
    lv_circuit: str


@dataclass(frozen=True)
class AllocationPlan:
    seed: Optional[int]
    sigma: float
    entries: tuple[AllocationEntry, ...]
    rating_basis: str = "admd"

    def to_dict(self) -> dict:
        return {"seed": self.seed, "sigma": self.sigma, "rating_basis": self.rating_basis,
                "entries": [{"mv_load": e.mv_load, "kw": e.kw, "draw": e.draw,
                             "lv_circuit": e.lv_circuit} for e in self.entries]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "AllocationPlan":
        return cls(d["seed"], d["sigma"],
                   tuple(AllocationEntry(e["mv_load"], e["kw"], e["draw"], e["lv_circuit"])
                         for e in d["entries"]), d.get("rating_basis", "admd"))


def _entry_rating(entry: LvCatalogEntry, basis: str, kva_per_customer: float) -> float:
    if basis == "admd":
        return entry.rating_kva
    if basis == "customers":
        return entry.n_loads * kva_per_customer
    raise ValueError(f"unknown rating basis {basis!r}")


def choose_entry(target_kva: float, catalog: Sequence[LvCatalogEntry], basis: str = "admd",
                 kva_per_customer: float = KVA_PER_CUSTOMER) -> LvCatalogEntry:
    """Catalog entry whose rating is nearest the target; ties go to the smaller rating."""
    return min(catalog, key=lambda e: (abs(_entry_rating(e, basis, kva_per_customer) - target_kva),
                                       _entry_rating(e, basis, kva_per_customer), e.circuit_id))


def draw_factor(seed: int, ordinal: int, sigma: float) -> float:
    """Normal(1, sigma) draw from a stream keyed on (seed, ordinal)."""
    rng = np.random.default_rng([seed, ordinal])
    return float(rng.normal(1.0, sigma))


def allocate(mv_model: NetworkModel, lv_catalog: Sequence[LvCatalogEntry], seed: int,
             sigma: float = DEFAULT_SIGMA, kva_per_customer: float = KVA_PER_CUSTOMER,
             rating_basis: str = "admd", draws: Optional[Sequence[float]] = None
             ) -> AllocationPlan:
    """Assign an LV circuit to every MV load (sorted by load id).

    ``draws`` replaces the random factors, one per load in that order.
    """
    if not lv_catalog:
        raise ValueError("empty LV catalog")
    loads = sorted(mv_model.loads, key=lambda ld: ld.id)
    if draws is not None and len(draws) != len(loads):
        raise ValueError("need one draw per MV load")
    entries = []
    for i, ld in enumerate(loads):
        r = float(draws[i]) if draws is not None else draw_factor(seed, i, sigma)
        if r * ld.kw <= 0:
            r = 1.0
        chosen = choose_entry(r * ld.kw, lv_catalog, rating_basis, kva_per_customer)
        entries.append(AllocationEntry(ld.id, ld.kw, r, chosen.circuit_id))
    return AllocationPlan(seed, sigma, tuple(entries), rating_basis)


def _prefixed(model: NetworkModel, prefix: str):
    p = prefix + "__"
    buses = [Bus(p + b.id, b.phases) for b in model.buses]
    lines = [LineBranch(p + ln.id, p + ln.from_bus, p + ln.to_bus, ln.phases, ln.z,
                        ln.length, ln.linecode) for ln in model.lines]
    loads = [LoadPoint(p + ld.id, p + ld.bus, ld.phases, ld.kw, ld.pf, ld.kv)
             for ld in model.loads]
    return buses, lines, loads, p + model.source.bus


def assemble(mv_model: NetworkModel, plan: AllocationPlan,
             lv_catalog: Sequence[LvCatalogEntry], *, n_primary: int = 2,
             primary_kv: float = 33.0, primary_rating_kva: Optional[float] = None,
             source_pu: float = 1.0, setpoint_pu: float = 1.0, band_pu: float = 0.0125,
             transformer_catalog: Sequence[float] = DEFAULT_CATALOG,
             params: AdmdParams = DEFAULT_ADMD, name: Optional[str] = None) -> NetworkModel:
    """Replace allocated MV loads with secondary transformers and LV circuits.

    ``n_primary`` identical regulated transformers are inserted in parallel
    between a new upstream source bus and the MV busbar; each defaults to a
    rating covering the whole MV demand.
    """
    by_id = {e.circuit_id: e for e in lv_catalog}
    mv_loads = mv_model.load_index
    planned = {}
    for e in plan.entries:
        if e.mv_load not in mv_loads:
            raise LinkError(f"plan refers to unknown MV load {e.mv_load!r}")
        if e.lv_circuit not in by_id:
            raise LinkError(f"plan refers to unknown LV circuit {e.lv_circuit!r}")
        planned[e.mv_load] = e
    missing = sorted(set(mv_loads) - set(planned))
    if missing and plan.entries:
        raise LinkError(f"plan does not cover MV loads {missing[:5]}")

    buses = list(mv_model.buses)
    lines = list(mv_model.lines)
    transformers = list(mv_model.transformers)
    loads = []
    bus_ids = {b.id for b in buses}
    for ld in mv_model.loads:
        e = planned.get(ld.id)
        if e is None:
            loads.append(ld)
            continue
        entry = by_id[e.lv_circuit]
        if tuple(mv_model.bus(ld.bus).phases) != (1, 2, 3):
            raise TopologyError(f"MV load {ld.id!r} is not on a three-phase bus")
        instance = f"{ld.id}__{entry.circuit_id}"
        rating = select_transformer(admd(entry.n_loads, params), transformer_catalog)
        lv_buses, lv_lines, lv_loads, root = _prefixed(entry.model, instance)
        for b in lv_buses:
            if b.id in bus_ids:
                raise TopologyError(f"bus id collision {b.id!r}")
            bus_ids.add(b.id)
        buses += lv_buses
        lines += lv_lines
        loads += lv_loads
        transformers.append(make_secondary_transformer(
            rating, instance, ld.bus, root, mv_model.source.base_kv, entry.model.source.base_kv))

    source = mv_model.source
    if n_primary > 0:
        total_kva = sum(ld.kw for ld in mv_model.loads)
        rating = primary_rating_kva or max(1000.0, math.ceil(total_kva / 1000.0) * 1000.0)
        hv = "primary_hv"
        while hv in bus_ids:
            hv += "_"
        buses.insert(0, Bus(hv, (1, 2, 3)))
        for k in range(1, n_primary + 1):
            transformers.insert(k - 1, make_primary_transformer(
                rating, f"primary_{k}", hv, mv_model.source.bus, primary_kv,
                mv_model.source.base_kv, setpoint_pu, band_pu))
        source = Source(hv, primary_kv, pu=source_pu)
    model = NetworkModel(name or mv_model.name, tuple(buses), tuple(lines),
                         tuple(transformers), tuple(loads), source,
                         base_frequency=mv_model.base_frequency)
    topo = topology_report(model)
    if not topo["is_radial"]:
        raise TopologyError("assembled model is not radial")
    return model
