"""Exact series splicing of pass-through buses, with dual-solve certification."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import LoadSetMismatch
from .netmodel import LineBranch, NetworkModel
from .pflow import SolveOptions, solve

CERTIFY_OPTIONS = SolveOptions(tolerance=1e-12, max_iterations=500)


@dataclass(frozen=True)
class SpliceLog:
    entries: tuple = ()  # (removed_bus, (merged ids), resulting id)
    nodes_before: int = 0
    nodes_after: int = 0


@dataclass(frozen=True)
class ReductionReport:
    eps_v: float
    eps_loss: float
    nodes_before: int
    nodes_after: int

    @property
    def reduction_factor(self) -> float:
        return self.nodes_before / self.nodes_after if self.nodes_after else float("inf")

    def to_dict(self) -> dict:
        return {"nodes_before": self.nodes_before, "nodes_after": self.nodes_after,
                "eps_v": self.eps_v, "eps_loss": self.eps_loss,
                "reduction_factor": self.reduction_factor}


def _protected_buses(model: NetworkModel) -> set[str]:
    keep = {model.source.bus}
    keep.update(ld.bus for ld in model.loads)
    for tr in model.transformers:
        keep.update((tr.hv_bus, tr.lv_bus))
        if tr.target_bus:
            keep.add(tr.target_bus)
    return keep


def splice(model: NetworkModel) -> tuple[NetworkModel, SpliceLog]:
    """Merge every load-free bus joining exactly two same-phase lines.

    The two series impedance matrices are summed; the merged line keeps the
    lower of the two ids.  Buses at phase changes, junctions, loads, the source
    and transformer terminals are left alone.
    """
    keep = _protected_buses(model)
    lines = {ln.id: ln for ln in model.lines}
    incident: dict[str, set[str]] = {b.id: set() for b in model.buses}
    for ln in model.lines:
        incident[ln.from_bus].add(ln.id)
        incident[ln.to_bus].add(ln.id)
    entries = []
    removed = set()
    for bus in model.buses:
        b = bus.id
        if b in keep or len(incident[b]) != 2:
            continue
        id1, id2 = sorted(incident[b])
        l1, l2 = lines[id1], lines[id2]
        if l1.phases != l2.phases:
            continue
        x = l1.to_bus if l1.from_bus == b else l1.from_bus
        y = l2.to_bus if l2.from_bus == b else l2.from_bus
        if x == y:
            continue
        merged = LineBranch(id1, x, y, l1.phases, l1.z + l2.z, l1.length + l2.length)
        del lines[id2]
        lines[id1] = merged
        incident[x].discard(id1)
        incident[y].discard(id2)
        incident[x].add(id1)
        incident[y].add(id1)
        incident[b].clear()
        removed.add(b)
        entries.append((b, (id1, id2), id1))
    if not removed:
        return model, SpliceLog((), model.node_count, model.node_count)
    buses = tuple(bb for bb in model.buses if bb.id not in removed)
    new_lines = tuple(lines[ln.id] for ln in model.lines if ln.id in lines)
    out = model.replace(buses=buses, lines=new_lines)
    return out, SpliceLog(tuple(entries), model.node_count, out.node_count)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MVLV_THREADS", "2")))
    except ValueError:
        return 1


def certify(original: NetworkModel, spliced: NetworkModel, demand=None,
            opts: SolveOptions = CERTIFY_OPTIONS) -> ReductionReport:
    """Relative load-voltage and loss errors between two solved models.

    Voltages are compared as one complex vector ordered by load id then phase;
    the norm is Euclidean.  ``demand`` defaults to 1.3 kW at unity pf per load.
    """
    ids_a = {ld.id: (ld.bus, ld.phases) for ld in original.loads}
    ids_b = {ld.id: (ld.bus, ld.phases) for ld in spliced.loads}
    if set(ids_a) != set(ids_b) or any(ids_a[k][1] != ids_b[k][1] for k in ids_a):
        raise LoadSetMismatch("original and spliced models have different load sets")
    if demand is None:
        from .report import uniform_scenario
        demand = uniform_scenario(original, 1.3, label="High")

    with ThreadPoolExecutor(max_workers=min(2, _threads())) as pool:
        fa = pool.submit(solve, original, demand, opts)
        fb = pool.submit(solve, spliced, demand, opts)
        sa, sb = fa.result(), fb.result()
    keys_a, va = sa.load_voltages()
    keys_b, vb = sb.load_voltages()
    assert keys_a == keys_b
    denom = np.linalg.norm(va)
    eps_v = float(np.linalg.norm(va - vb) / denom) if denom > 0 else 0.0
    pa, pb = sa.loss_kw, sb.loss_kw
    if pa == 0.0:
        eps_loss = 0.0 if pb == 0.0 else float("inf")
    else:
        eps_loss = abs(pa - pb) / abs(pa)
    return ReductionReport(eps_v, eps_loss, original.node_count, spliced.node_count)
