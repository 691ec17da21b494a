import json

import numpy as np
import pytest

from conftest import chain
from mvlv import cases
from mvlv.errors import ScenarioError
from mvlv.netmodel import Bus, LineBranch, LoadPoint, NetworkModel, Source, TransformerBranch
from mvlv.pflow import solve_with_controls
from mvlv.report import uniform_scenario
from mvlv.scenario import Scenario, flex_uptake, peer2peer, run, write_results
from mvlv.synth import allocate, assemble, build_lv_catalog


@pytest.fixture(scope="module")
def hybrid():
    cat = build_lv_catalog(cases.catalog_circuits())
    mv = cases.toy_mv()
    return assemble(mv, allocate(mv, cat, seed=1), cat)


def hundred_loads():
    m = cases.synthetic_lv_circuit("h", 100, n_feeders=2, backbone_spacing=2, lateral_len=2)
    assert len(m.loads) == 100
    return m


def test_flex_uptake_arithmetic():
    m = hundred_loads()
    sc = flex_uptake(m, 0.13, 3.0, seed=4)
    assert len(sc.overrides) == 13
    assert sc.added_kw() == pytest.approx(39.0)
    assert sc.base.total_kw() == pytest.approx(130.0)
    assert sc.added_kw() / sc.base.total_kw() == pytest.approx(0.30)
    assert sc.demand.total_kw() == pytest.approx(169.0)


def test_flex_uptake_determinism_and_zero():
    m = hundred_loads()
    assert flex_uptake(m, seed=1).overrides == flex_uptake(m, seed=1).overrides
    assert flex_uptake(m, seed=1).overrides != flex_uptake(m, seed=2).overrides
    assert flex_uptake(m, 0.0, seed=1).overrides == {}
    with pytest.raises(ScenarioError):
        flex_uptake(m, 1.5, seed=1)


def test_flex_count_is_ceiling():
    m = hundred_loads()
    assert len(flex_uptake(m, 0.131, seed=0).overrides) == 14
    assert len(flex_uptake(m, 0.01, seed=0).overrides) == 1


def test_peer2peer_bookkeeping(hybrid):
    circuits = sorted({hybrid_bus.lv_circuit_id for hybrid_bus in _bases(hybrid).buses
                       if hybrid_bus.lv_circuit_id})
    sc = peer2peer(hybrid, circuits[0], circuits[1], 15, 3.0)
    vals = list(sc.overrides.values())
    assert sum(v < 0 for v in vals) == 15 and sum(v > 0 for v in vals) == 15
    assert all(abs(v) == 3.0 for v in vals)
    assert sc.added_kw() == 0.0
    assert sc.base.label == "Low"
    assert sc.to_dict()["params"]["selection"] == "sorted-id-prefix"
    first = sorted(ld.id for ld in hybrid.loads if ld.id.startswith(circuits[0] + "__"))[:15]
    assert sorted(k for k, v in sc.overrides.items() if v < 0) == first
    seeded = peer2peer(hybrid, circuits[0], circuits[1], seed=3)
    assert seeded.to_dict()["seed"] == 3 and seeded.added_kw() == 0.0


def test_peer2peer_zero_pairs_is_base(hybrid):
    circuits = sorted({b.lv_circuit_id for b in _bases(hybrid).buses if b.lv_circuit_id})
    sc = peer2peer(hybrid, circuits[0], circuits[1], n_pairs=0)
    assert sc.overrides == {}
    assert sc.demand.loads == sc.base.loads


def test_peer2peer_errors(hybrid):
    circuits = sorted({b.lv_circuit_id for b in _bases(hybrid).buses if b.lv_circuit_id})
    with pytest.raises(ScenarioError):
        peer2peer(hybrid, "nope", circuits[0])
    with pytest.raises(ScenarioError):
        peer2peer(hybrid, circuits[0], circuits[1], n_pairs=500)


def _bases(m):
    from mvlv.netmodel import assign_bases
    return assign_bases(m)


def test_run_base_only_matches_solver(hybrid):
    base = uniform_scenario(hybrid, 1.3, label="High")
    res = run(Scenario(base, {}, {"type": "none"}), hybrid)
    ref = solve_with_controls(hybrid, base)
    assert np.array_equal(res.solution.v, ref.v)
    assert res.summary["time_basis"] == "snapshot only"
    assert res.summary["added_kw"] == 0.0


def test_flex_lowers_voltages(hybrid):
    sc = flex_uptake(hybrid, 0.13, 3.0, seed=2)
    base = run(Scenario(sc.base, {}, {}), hybrid).solution
    flex = run(sc, hybrid).solution
    assert flex.taps == base.taps
    # extra load on one phase may lift the other phases through neutral shift,
    # but every host's own phase and the system minimum must fall
    vb, vf = base.load_v_pu(), flex.load_v_pu()
    assert all(vf[lid] < vb[lid] for lid in sc.overrides)
    assert min(vf.values()) < min(vb.values())


def test_run_rejects_unknown_override(hybrid):
    sc = Scenario(uniform_scenario(hybrid, 1.3), {"ghost": 3.0}, {})
    with pytest.raises(ScenarioError):
        run(sc, hybrid)


def weak_feeder():
    """Long thin single-phase LV feeder: exporting PV must push it above 1.10 pu."""
    n = 20
    buses = [Bus("src", (1, 2, 3))] + [Bus(f"b{i}", (1,)) for i in range(1, n + 1)]
    z = np.array([[0.02 + 0.005j]])
    lines = [LineBranch(f"l{i}", "src" if i == 1 else f"b{i - 1}", f"b{i}", (1,), z)
             for i in range(1, n + 1)]
    loads = [LoadPoint(f"h{i:02d}", f"b{i}", (1,), 1.0) for i in range(1, n + 1)]
    return NetworkModel("weak", buses, lines, (), loads, Source("src", 0.4))


def test_peer2peer_overvoltage_on_weak_feeder():
    m = weak_feeder()
    # two identical weak feeders behind their own transformers
    buses, lines, loads = [Bus("mv", (1, 2, 3))], [], []
    trs = []
    for tag in ("exp", "imp"):
        p = tag + "__"
        buses += [Bus(p + b.id, b.phases) for b in m.buses]
        lines += [LineBranch(p + l.id, p + l.from_bus, p + l.to_bus, l.phases, l.z)
                  for l in m.lines]
        loads += [LoadPoint(p + ld.id, p + ld.bus, ld.phases, ld.kw) for ld in m.loads]
        trs.append(TransformerBranch(tag, "mv", p + "src", "delta", "wye", 11.0, 0.4, 200.0,
                                     0.01 + 0.05j, tap=1.04))
    model = NetworkModel("pair", buses, lines, trs, loads, Source("mv", 11.0))
    sc = peer2peer(model, "exp", "imp", 15, 3.0)
    res = run(sc, model)
    over = [v for v in res.violations if v.bound == 1.10]
    assert over and all(v.bus.startswith("exp__") for v in over)
    assert res.summary["worst_violation_pu"] > 0


def test_scenario_json_and_results(tmp_path):
    m = hundred_loads()
    sc = flex_uptake(m, seed=9)
    d = json.loads(sc.to_json())
    assert set(d) == {"type", "params", "seed", "overrides"}
    assert d["type"] == "flex_uptake" and d["seed"] == 9
    paths = write_results(run(sc, m), tmp_path)
    assert [p.name for p in paths] == ["voltages.csv", "violations.csv", "stats.csv"]
    assert all(p.exists() for p in paths)
