import dataclasses

import numpy as np
import pytest

from conftest import Z3, chain
from mvlv.errors import BaseConflictError, LinkError, TopologyError
from mvlv.netmodel import (Bus, LineBranch, LoadPoint, NetworkModel, Source, TransformerBranch,
                           assign_bases, connected_components, topology_report)


def _tx(id_, hv, lv, kv_hv=11.0, kv_lv=0.4):
    return TransformerBranch(id_, hv, lv, "delta", "wye", kv_hv, kv_lv, 500.0, 0.01 + 0.05j)


def test_single_transformer_bases():
    m = NetworkModel("t", [Bus("mv", (1, 2, 3)), Bus("lv", (1, 2, 3))], [], [_tx("t", "mv", "lv")],
                     [], Source("mv", 11.0))
    m = assign_bases(m)
    assert m.bus("lv").base_kv == pytest.approx(0.4)
    assert m.bus("lv").zone == "LV"
    assert m.bus("mv").zone == "MV"
    assert m.bus("lv").lv_circuit_id == "t"


def test_all_mv_bases():
    m = assign_bases(chain(5, kv=11.0))
    assert all(b.base_kv == 11.0 and b.zone == "MV" for b in m.buses)
    assert m.bus("b3").mv_feeder_id == "l0"


def test_mismatched_loop_conflicts():
    buses = [Bus(b, (1, 2, 3)) for b in ("mv", "a", "b")]
    m = NetworkModel("loop", buses, [LineBranch("ab", "a", "b", (1, 2, 3), Z3)],
                     [_tx("t1", "mv", "a"), _tx("t2", "mv", "b", kv_lv=0.415)], [],
                     Source("mv", 11.0))
    with pytest.raises(BaseConflictError):
        assign_bases(m)


def test_source_kv_override():
    m = assign_bases(chain(3, kv=11.0), source_kv=33.0)
    assert {b.base_kv for b in m.buses} == {33.0}


def test_chain_topology():
    rep = topology_report(chain(4))
    assert rep["node_count"] == 12
    assert rep["is_radial"] is True
    assert rep["islands"] == []
    assert rep["degree_histogram"] == {"1": 2, "2": 2}


def test_loop_not_radial():
    m = chain(4)
    extra = LineBranch("loop", "b0", "b3", (1, 2, 3), Z3)
    rep = topology_report(m.replace(lines=m.lines + (extra,)))
    assert rep["is_radial"] is False


def test_parallel_branches_count_once():
    m = chain(3)
    twin = LineBranch("l0b", "b0", "b1", (1, 2, 3), Z3)
    assert topology_report(m.replace(lines=m.lines + (twin,)))["is_radial"] is True


def test_islands_reported():
    m = chain(4)
    m = m.replace(buses=m.buses + (Bus("x", (1,)), Bus("y", (1,))),
                  lines=m.lines + (LineBranch("xy", "x", "y", (1,), Z3[:1, :1]),))
    rep = topology_report(m)
    assert rep["islands"] == [["x", "y"]]
    assert rep["is_radial"] is False
    assert len(connected_components(m)) == 2


def test_node_count_invariant_under_reordering_and_renaming():
    m = chain(5, load_at=(2, 4))
    shuffled = m.replace(buses=m.buses[::-1], lines=m.lines[::-1])
    assert topology_report(shuffled)["node_count"] == m.node_count
    ren = {b.id: "n" + b.id for b in m.buses}
    renamed = NetworkModel("r", [Bus(ren[b.id], b.phases) for b in m.buses],
                           [LineBranch(l.id, ren[l.from_bus], ren[l.to_bus], l.phases, l.z)
                            for l in m.lines], (),
                           [LoadPoint(ld.id, ren[ld.bus], ld.phases, ld.kw) for ld in m.loads],
                           Source(ren["b0"], 0.4))
    assert renamed.node_count == m.node_count


def test_model_is_immutable():
    m = chain(3)
    with pytest.raises(dataclasses.FrozenInstanceError):
        m.name = "other"
    with pytest.raises(ValueError):
        m.lines[0].z[0, 0] = 1.0
    assert assign_bases(m) is not m
    assert m.buses[0].base_kv is None


@pytest.mark.parametrize("z", [
    np.array([[0.1, 0.02], [0.03, 0.1]], dtype=complex),
    np.array([[-0.1, 0], [0, 0.1]], dtype=complex),
])
def test_line_impedance_validated(z):
    with pytest.raises(TopologyError):
        LineBranch("l", "a", "b", (1, 2), z)


def test_load_phase_must_exist():
    with pytest.raises(LinkError):
        NetworkModel("bad", [Bus("a", (1, 2, 3)), Bus("b", (1,))],
                     [LineBranch("l", "a", "b", (1,), Z3[:1, :1])], (),
                     [LoadPoint("ld", "b", (2,), 1.0)], Source("a", 0.4))


def test_duplicate_ids_rejected():
    with pytest.raises(TopologyError):
        NetworkModel("dup", [Bus("a", (1, 2, 3)), Bus("a", (1, 2, 3))], [], (), [],
                     Source("a", 0.4))


@pytest.mark.parametrize("kwargs", [dict(rating_kva=0), dict(z_pu=0.6j), dict(tap=1.2)])
def test_transformer_invariants(kwargs):
    base = dict(id="t", hv_bus="a", lv_bus="b", conn_hv="delta", conn_lv="wye", kv_hv=11.0,
                kv_lv=0.4, rating_kva=500.0, z_pu=0.01 + 0.05j)
    with pytest.raises(TopologyError):
        TransformerBranch(**{**base, **kwargs})


@pytest.mark.parametrize("kwargs", [dict(kw=-1.0), dict(pf=0.0), dict(pf=1.2),
                                    dict(phases=(1, 2))])
def test_load_invariants(kwargs):
    with pytest.raises(TopologyError):
        LoadPoint(**{**dict(id="l", bus="b", phases=(1,), kw=1.0, pf=1.0), **kwargs})
