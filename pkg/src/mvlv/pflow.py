"""Unbalanced three-phase power flow with on-load tap-changer control.

The solver is a fixed-point current-injection method: the constant nodal
admittance matrix is factorized once and constant-power load currents are
re-injected until the largest per-node voltage change falls below tolerance.
"""

from __future__ import annotations

import csv
import logging
import math
import weakref
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import _accel
from .errors import (ControlOscillation, LinkError, NonConvergence, ScenarioError,
                     SingularSystem, TopologyError)
from .netmodel import (PHASE_NAMES, NetworkModel, TransformerBranch, assign_bases,
                       connected_components)

log = logging.getLogger(__name__)

SYSTEM_BASE_MVA = 1.0
A_OP = np.exp(2j * np.pi / 3)


@dataclass(frozen=True)
class SolveOptions:
    tolerance: float = 1e-8
    max_iterations: int = 100
    max_control_iterations: int = 30
    flat_start: bool = True

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1 or self.max_control_iterations < 1:
            raise ValueError("iteration caps must be >= 1")


ANTIFLOAT_PPM = 1.0


def _delta_incidence():
    c = np.eye(3)
    c[0, 1] = c[1, 2] = c[2, 0] = -1.0
    return c


_INCIDENCE = {"wye": np.eye(3), "delta": _delta_incidence()}


def transformer_primitive(tr: TransformerBranch, tap: Optional[float] = None) -> np.ndarray:
    """6 x 6 nodal admittance (siemens) over [HV a,b,c, LV a,b,c].

    Three single-phase leakage impedances referred to the LV winding, ideal
    turns ratio scaled by the tap, windings mapped to nodes by connection.
    Delta terminals get a 1 ppm capacitive path to ground so a delta winding
    with nothing else earthed still has a defined zero sequence.
    """
    tap = tr.tap if tap is None else tap
    sqrt3 = math.sqrt(3.0)
    vw_h = tr.kv_hv if tr.conn_hv == "delta" else tr.kv_hv / sqrt3
    vw_l = tr.kv_lv if tr.conn_lv == "delta" else tr.kv_lv / sqrt3
    z_w = tr.z_pu * vw_l ** 2 / (tr.rating_kva / 3000.0)
    y = 1.0 / z_w
    t = tap * vw_l / vw_h
    y2 = y * np.array([[t * t, -t], [-t, 1.0]])
    c = np.zeros((6, 6))
    c[:3, :3] = _INCIDENCE[tr.conn_hv]
    c[3:, 3:] = _INCIDENCE[tr.conn_lv]
    yp = (c.T @ np.kron(y2, np.eye(3)) @ c).astype(complex)
    for k, (conn, kv) in enumerate(((tr.conn_hv, tr.kv_hv), (tr.conn_lv, tr.kv_lv))):
        if conn == "delta":
            y_float = ANTIFLOAT_PPM * 1e-6 * (tr.rating_kva * 1000.0) / (kv * 1000.0) ** 2
            yp[3 * k:3 * k + 3, 3 * k:3 * k + 3] += 1j * y_float * np.eye(3)
    return yp


class _Compiled:
    """Node indexing and the tap-independent part of the admittance matrix."""

    def __init__(self, model: NetworkModel):
        self.model = model
        src = model.source
        node_bus, node_phase, v_base = [], [], []
        node_of: dict[tuple[str, int], int] = {}
        for b in model.buses:
            for p in b.phases:
                node_of[(b.id, p)] = len(node_bus)
                node_bus.append(b.id)
                node_phase.append(p)
                v_base.append(b.base_kv * 1000.0 / math.sqrt(3.0))
        self.n_bus_nodes = len(node_bus)
        self.node_of = node_of
        self.node_bus = tuple(node_bus)
        self.node_phase = np.array(node_phase, dtype=np.int64)

        rows, cols, vals = [], [], []
        self.src_nodes = np.array([node_of[(src.bus, p)] for p in src.phases], dtype=np.int64)
        if src.has_impedance:
            # internal slack nodes behind the source impedance
            internal = np.arange(len(src.phases)) + len(node_bus)
            for p in src.phases:
                node_bus.append(src.bus + "#thevenin")
                v_base.append(v_base[node_of[(src.bus, p)]])
            self.y_thevenin = np.linalg.inv(src.z_matrix())
            self._stamp_series(rows, cols, vals, internal[None, :], self.src_nodes[None, :],
                               self.y_thevenin[None, :, :])
            self.slack = internal
        else:
            self.y_thevenin = None
            self.slack = self.src_nodes
        self.n = len(node_bus)
        self.v_base = np.array(v_base)
        self.inv_base = 1.0 / self.v_base

        # lines grouped by phase count for batched inversion
        self.line_groups = []
        by_n: dict[int, list] = {}
        for ln in model.lines:
            by_n.setdefault(len(ln.phases), []).append(ln)
        for n, group in sorted(by_n.items()):
            f = np.array([[node_of[(ln.from_bus, p)] for p in ln.phases] for ln in group],
                         dtype=np.int64)
            t = np.array([[node_of[(ln.to_bus, p)] for p in ln.phases] for ln in group],
                         dtype=np.int64)
            yp = np.linalg.inv(np.stack([ln.z for ln in group]))
            self._stamp_series(rows, cols, vals, f, t, yp)
            self.line_groups.append(([ln.id for ln in group], f, t, yp))

        self.transformers = list(model.transformers)
        self.tr_nodes = {
            tr.id: np.array([node_of[(tr.hv_bus, p)] for p in (1, 2, 3)]
                            + [node_of[(tr.lv_bus, p)] for p in (1, 2, 3)], dtype=np.int64)
            for tr in self.transformers}
        for tr in self.transformers:
            if not tr.regulated:
                self._stamp_dense(rows, cols, vals, self.tr_nodes[tr.id], transformer_primitive(tr))
        self.regulated = [tr for tr in self.transformers if tr.regulated]

        self.const_coo = (np.concatenate(rows) if rows else np.zeros(0, np.int64),
                          np.concatenate(cols) if cols else np.zeros(0, np.int64),
                          np.concatenate(vals) if vals else np.zeros(0, complex))
        is_slack = np.zeros(self.n, dtype=bool)
        is_slack[self.slack] = True
        self.free = np.flatnonzero(~is_slack)
        self._factor_cache: dict = {}

    @staticmethod
    def _stamp_series(rows, cols, vals, f, t, yp):
        n = f.shape[1]
        fr = np.repeat(f, n, axis=1).ravel()
        fc = np.tile(f, (1, n)).ravel()
        tr_ = np.repeat(t, n, axis=1).ravel()
        tc = np.tile(t, (1, n)).ravel()
        y = yp.reshape(len(f), n * n).ravel()
        rows += [fr, tr_, fr, tr_]
        cols += [fc, tc, tc, fc]
        vals += [y, y, -y, -y]

    @staticmethod
    def _stamp_dense(rows, cols, vals, idx, y):
        rows.append(np.repeat(idx, len(idx)))
        cols.append(np.tile(idx, len(idx)))
        vals.append(y.ravel().astype(complex))

    def ybus(self, taps: Mapping[str, float]) -> sp.csr_matrix:
        r, c, v = self.const_coo
        rs, cs, vs = [r], [c], [v]
        for tr in self.regulated:
            idx = self.tr_nodes[tr.id]
            y = transformer_primitive(tr, taps.get(tr.id, tr.tap))
            rs.append(np.repeat(idx, 6))
            cs.append(np.tile(idx, 6))
            vs.append(y.ravel().astype(complex))
        return sp.csr_matrix((np.concatenate(vs), (np.concatenate(rs), np.concatenate(cs))),
                             shape=(self.n, self.n))

    def factorized(self, taps: Mapping[str, float]):
        key = tuple(sorted((tr.id, float(taps.get(tr.id, tr.tap))) for tr in self.regulated))
        hit = self._factor_cache.get(key)
        if hit is not None:
            return hit
        y = self.ybus(taps)
        y_ff = y[self.free][:, self.free].tocsc()
        y_fs = y[self.free][:, self.slack].tocsc()
        try:
            lu = splu(y_ff)
        except RuntimeError as exc:
            raise SingularSystem(f"nodal admittance matrix is singular: {exc}") from exc
        if len(self._factor_cache) > 4:
            self._factor_cache.clear()
        self._factor_cache[key] = (y, lu, y_fs)
        return y, lu, y_fs

    def slack_voltage(self) -> np.ndarray:
        src = self.model.source
        ang = np.deg2rad(src.angle_deg - 120.0 * (np.array(src.phases) - 1))
        return src.pu * self.v_base[self.slack] * np.exp(1j * ang)

    def load_arrays(self, demand):
        """Node index and conj(S) in VA for every phase of every load."""
        known = self.model.load_index
        if demand is not None:
            unknown = sorted(set(demand.loads) - set(known))
            if unknown:
                raise ScenarioError(f"demand refers to unknown loads: {unknown[:5]}")
        nodes, s = [], []
        if demand is not None:
            for ld in self.model.loads:
                if ld.id not in demand.loads:
                    continue
                s_va = demand.complex_power_kva(ld.id) * 1000.0 / len(ld.phases)
                for p in ld.phases:
                    nodes.append(self.node_of[(ld.bus, p)])
                    s.append(s_va)
        return (np.array(nodes, dtype=np.int64),
                np.conj(np.array(s, dtype=complex)))


_COMPILED: "weakref.WeakKeyDictionary[NetworkModel, _Compiled]" = weakref.WeakKeyDictionary()


def compile_model(model: NetworkModel) -> _Compiled:
    hit = _COMPILED.get(model)
    if hit is None:
        hit = _Compiled(model)
        _COMPILED[model] = hit
    return hit


@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    model: NetworkModel
    node_bus: tuple
    node_phase: np.ndarray
    v: np.ndarray
    v_base: np.ndarray
    branch_currents: Mapping[str, np.ndarray]
    loss_kw: float
    loss_kva: complex
    source_power_kva: complex
    load_kva: complex
    taps: Mapping[str, float]
    iterations: int
    converged: bool
    residual: float
    band_unmet: tuple = ()
    tap_moves: int = 0
    label: str = ""
    _compiled: object = field(default=None, repr=False)
    _load_nodes: object = field(default=None, repr=False)

    @property
    def v_pu(self) -> np.ndarray:
        return np.abs(self.v) / self.v_base

    def node(self, bus: str, phase: int) -> int:
        return self._compiled.node_of[(bus, phase)]

    def bus_voltages(self, bus: str) -> np.ndarray:
        b = self.model.bus(bus)
        return np.array([self.v[self.node(bus, p)] for p in b.phases])

    def bus_v_pu(self, bus: str) -> np.ndarray:
        b = self.model.bus(bus)
        return np.array([self.v_pu[self.node(bus, p)] for p in b.phases])

    def load_voltages(self) -> tuple[list[tuple[str, int]], np.ndarray]:
        """Complex load-phase voltages ordered by load id then phase."""
        keys, vals = [], []
        for ld in sorted(self.model.loads, key=lambda x: x.id):
            for p in sorted(ld.phases):
                keys.append((ld.id, p))
                vals.append(self.v[self.node(ld.bus, p)])
        return keys, np.array(vals)

    def load_v_pu(self) -> dict[str, float]:
        """One voltage per load point (mean over phases for three-phase loads)."""
        out = {}
        for ld in self.model.loads:
            out[ld.id] = float(np.mean([self.v_pu[self.node(ld.bus, p)] for p in ld.phases]))
        return out


def _check_grounding(model: NetworkModel) -> None:
    """Loads need an earth reference in their galvanic zone (source or a wye winding)."""
    if not any(tr.conn_hv == "delta" or tr.conn_lv == "delta" for tr in model.transformers):
        return
    parent = {b.id: b.id for b in model.buses}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for ln in model.lines:
        parent[find(ln.from_bus)] = find(ln.to_bus)
    grounded = {find(model.source.bus)}
    for tr in model.transformers:
        if tr.conn_hv == "wye":
            grounded.add(find(tr.hv_bus))
        if tr.conn_lv == "wye":
            grounded.add(find(tr.lv_bus))
    for ld in model.loads:
        if find(ld.bus) not in grounded:
            raise TopologyError(f"load {ld.id!r} is fed only through delta windings; "
                                f"its zone has no earth reference")


def _prepare(model: NetworkModel) -> NetworkModel:
    if not model.has_bases:
        model = assign_bases(model)
    comps = connected_components(model)
    if len(comps) > 1:
        island = next(c for c in comps if model.source.bus not in c)
        raise SingularSystem(f"{len(comps) - 1} island(s) without a source, e.g. "
                             f"containing bus {island[0]!r}")
    _check_grounding(model)
    return model


def _error_bound(step: float, previous: float) -> float:
    """Distance to the fixed point implied by a linearly contracting step sequence."""
    if step == 0.0:
        return 0.0
    if not math.isfinite(previous):
        return math.inf
    c = step / previous
    return step * c / (1.0 - c) if c < 1.0 else math.inf


def solve(model: NetworkModel, demand=None, opts: SolveOptions = SolveOptions(),
          taps: Optional[Mapping[str, float]] = None,
          initial: Optional[np.ndarray] = None) -> PowerFlowSolution:
    """Solve the power flow for one demand scenario.

    ``taps`` overrides regulated transformer taps without rebuilding the model;
    ``initial`` warm-starts from a previous voltage vector when ``flat_start``
    is false.
    """
    model = _prepare(model)
    comp = compile_model(model)
    taps = {**{tr.id: tr.tap for tr in model.transformers if tr.regulated}, **(taps or {})}
    y, lu, y_fs = comp.factorized(taps)
    v_s = comp.slack_voltage()
    rhs0 = -(y_fs @ v_s)
    load_node, s_conj = comp.load_arrays(demand)

    v = np.empty(comp.n, dtype=complex)
    v[comp.slack] = v_s
    if initial is not None and not opts.flat_start:
        v[comp.free] = initial[comp.free]
    else:
        v[comp.free] = lu.solve(rhs0)

    pos_in_free = np.full(comp.n, -1, dtype=np.int64)
    pos_in_free[comp.free] = np.arange(len(comp.free))
    inv_base_free = comp.inv_base[comp.free]
    converged = False
    residual = math.inf
    it = 0
    for it in range(1, opts.max_iterations + 1):
        i_load = _accel.load_currents(v, load_node, s_conj, comp.n)
        v_new = lu.solve(rhs0 - i_load[comp.free])
        previous = residual
        residual = _accel.max_abs_change(v_new, v[comp.free], inv_base_free)
        v[comp.free] = v_new
        if not np.isfinite(residual):
            break
        if residual <= opts.tolerance and _error_bound(residual, previous) <= opts.tolerance:
            converged = True
            break
    if not converged:
        raise NonConvergence(it, residual)

    return _finish(model, comp, y, v, taps, demand, it, residual, load_node, s_conj)


def _finish(model, comp, y, v, taps, demand, iterations, residual, load_node, s_conj):
    currents: dict[str, np.ndarray] = {}
    loss = 0j
    for ids, f, t, yp in comp.line_groups:
        dv = v[f] - v[t]
        i_f = np.einsum("kij,kj->ki", yp, dv)
        loss += complex(np.sum(dv * np.conj(i_f)))
        for lid, cur in zip(ids, i_f):
            currents[lid] = cur
    all_taps = {}
    for tr in comp.transformers:
        tap = float(taps.get(tr.id, tr.tap))
        if tr.regulated:
            all_taps[tr.id] = tap
        idx = comp.tr_nodes[tr.id]
        cur = transformer_primitive(tr, tap) @ v[idx]
        loss += complex(np.sum(v[idx] * np.conj(cur)))
        currents[tr.id] = cur

    if comp.y_thevenin is not None:
        internal = comp.slack
        i_src = comp.y_thevenin @ (v[internal] - v[comp.src_nodes])
        s_src = np.sum(v[comp.src_nodes] * np.conj(i_src))
    else:
        s_src = np.sum(v[comp.slack] * np.conj(y[comp.slack] @ v))

    s_load = np.sum(np.conj(s_conj)) if len(s_conj) else 0j
    final_model = model
    if taps:
        trs = tuple(replace(tr, tap=float(taps[tr.id])) if tr.id in taps else tr
                    for tr in model.transformers)
        final_model = model.replace(transformers=trs)
        _COMPILED[final_model] = comp
    return PowerFlowSolution(
        model=final_model, node_bus=comp.node_bus[:comp.n_bus_nodes],
        node_phase=comp.node_phase, v=v[:comp.n_bus_nodes].copy(),
        v_base=comp.v_base[:comp.n_bus_nodes], branch_currents=currents,
        loss_kw=loss.real / 1000.0, loss_kva=loss / 1000.0, source_power_kva=complex(s_src) / 1000.0,
        load_kva=complex(s_load) / 1000.0, taps=all_taps, iterations=iterations,
        converged=True, residual=residual, label=getattr(demand, "label", ""),
        _compiled=comp, _load_nodes=(load_node, s_conj, v.copy(), y))


def _regulated_voltage(sol_v, comp, tr) -> float:
    bus = tr.regulated_bus()
    b = comp.model.bus(bus)
    idx = [comp.node_of[(bus, p)] for p in b.phases]
    return float(np.mean(np.abs(sol_v[idx]) * comp.inv_base[idx]))


def solve_with_controls(model: NetworkModel, demand=None,
                        opts: SolveOptions = SolveOptions()) -> PowerFlowSolution:
    """Solve with discrete tap control on every regulated transformer.

    One tap step per outer iteration, applied to the transformer with the
    largest band violation.  Ties go to the unit whose tap has moved least in
    the required direction, then to the lowest id, so parallel units share
    the regulation.
    """
    model = _prepare(model)
    comp = compile_model(model)
    regulated = sorted(comp.regulated, key=lambda t: t.id)
    taps = {tr.id: tr.tap for tr in regulated}
    seen = {tuple(taps[t.id] for t in regulated)}
    sol = None
    moves = 0
    for _ in range(opts.max_control_iterations + 1):
        warm = sol._load_nodes[2] if sol is not None else None
        sol = solve(model, demand, replace(opts, flat_start=warm is None), taps=taps,
                    initial=warm)
        candidates, unmet = [], []
        full_v = sol._load_nodes[2]
        for tr in regulated:
            vreg = _regulated_voltage(full_v, comp, tr)
            dev = vreg - tr.setpoint_pu
            if abs(dev) <= tr.band_pu:
                continue
            direction = -1 if dev > 0 else 1
            limit = tr.tap_max if direction > 0 else tr.tap_min
            if abs(taps[tr.id] - limit) < 1e-9:
                unmet.append(tr.id)
                continue
            candidates.append((-round(abs(dev), 12), direction * taps[tr.id], tr.id,
                               direction, tr))
        if not candidates:
            return replace(sol, band_unmet=tuple(unmet), tap_moves=moves)
        _, _, tid, direction, tr = min(candidates)
        new = taps[tid] + direction * tr.tap_step
        k = round((new - tr.tap_min) / tr.tap_step)
        taps[tid] = min(max(tr.tap_min + k * tr.tap_step, tr.tap_min), tr.tap_max)
        moves += 1
        state = tuple(taps[t.id] for t in regulated)
        if state in seen:
            raise ControlOscillation(f"tap state {dict(taps)} revisited")
        seen.add(state)
        log.debug("tap %s -> %.5f", tid, taps[tid])
    raise NonConvergence(opts.max_control_iterations, math.nan,
                         "tap control did not settle within the outer iteration cap")


def losses(solution: PowerFlowSolution) -> float:
    """Total series losses in kW."""
    return solution.loss_kw


def substation_power(solution: PowerFlowSolution) -> complex:
    """Complex power delivered at the slack bus, in MVA."""
    return solution.source_power_kva / 1000.0


def power_balance_pu(solution: PowerFlowSolution) -> float:
    """|S_source - S_loads - S_loss| on the system base."""
    mismatch = solution.source_power_kva - solution.load_kva - solution.loss_kva
    return abs(mismatch) / (SYSTEM_BASE_MVA * 1000.0)


def kcl_residual_pu(solution: PowerFlowSolution) -> float:
    """Largest nodal current mismatch at non-source nodes, per unit.

    The current base at each node is the per-phase system base over its
    line-to-neutral base voltage.
    """
    comp = solution._compiled
    load_node, s_conj, v, y = solution._load_nodes
    i_load = _accel.load_currents_numpy(v, load_node, s_conj, comp.n)
    mismatch = (y @ v + i_load)[comp.free]
    i_base = SYSTEM_BASE_MVA * 1e6 / 3.0 * comp.inv_base[comp.free]
    if mismatch.size == 0:
        return 0.0
    return float(np.max(np.abs(mismatch) / i_base))


def sequence_unbalance(solution: PowerFlowSolution, feeder_head_branch: str) -> float:
    """Zero- to positive-sequence current ratio at a three-phase branch."""
    model = solution.model
    line = next((ln for ln in model.lines if ln.id == feeder_head_branch), None)
    if line is not None:
        if tuple(line.phases) != (1, 2, 3):
            raise LinkError(f"feeder head {feeder_head_branch!r} is not three-phase ABC")
        i_abc = solution.branch_currents[feeder_head_branch]
    elif feeder_head_branch in solution.branch_currents:
        i_abc = -solution.branch_currents[feeder_head_branch][3:]
    else:
        raise LinkError(f"unknown branch {feeder_head_branch!r}")
    return zero_sequence_ratio(i_abc)


def zero_sequence_ratio(i_abc) -> float:
    ia, ib, ic = i_abc
    i0 = (ia + ib + ic) / 3
    i1 = (ia + A_OP * ib + A_OP ** 2 * ic) / 3
    if abs(i1) <= 1e-12 * max(abs(ia), abs(ib), abs(ic), 1e-300):
        raise ValueError("positive-sequence current is zero; ratio undefined")
    return float(abs(i0) / abs(i1))


VOLTAGE_COLUMNS = ("bus_id", "phase", "v_pu", "v_volts_mag", "v_deg", "zone",
                   "lv_circuit_id", "mv_feeder_id")


def fmt(x: float) -> str:
    return format(float(x), ".12g")


def voltage_rows(solution: PowerFlowSolution):
    model = solution.model
    order = sorted(range(len(solution.node_bus)),
                   key=lambda i: (solution.node_bus[i], int(solution.node_phase[i])))
    for i in order:
        bus = model.bus(solution.node_bus[i])
        v = solution.v[i]
        yield (bus.id, PHASE_NAMES[int(solution.node_phase[i])],
               fmt(abs(v) / solution.v_base[i]), fmt(abs(v)),
               fmt(np.degrees(np.angle(v))), bus.zone or "",
               bus.lv_circuit_id or "", bus.mv_feeder_id or "")


LOAD_VOLTAGE_COLUMNS = ("load_id", "bus_id", "v_pu", "zone", "lv_circuit_id", "mv_feeder_id")


def write_load_voltage_csv(solution: PowerFlowSolution, path) -> None:
    """One row per load point, the sample used for QQ comparison."""
    model = solution.model
    per_load = solution.load_v_pu()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOAD_VOLTAGE_COLUMNS)
        for ld in sorted(model.loads, key=lambda x: x.id):
            bus = model.bus(ld.bus)
            w.writerow((ld.id, bus.id, fmt(per_load[ld.id]), bus.zone or "",
                        bus.lv_circuit_id or "", bus.mv_feeder_id or ""))


def write_voltage_csv(solution: PowerFlowSolution, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VOLTAGE_COLUMNS)
        w.writerows(voltage_rows(solution))
