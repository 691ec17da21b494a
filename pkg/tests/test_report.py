import numpy as np
import pytest

from conftest import chain
from mvlv import cases
from mvlv.demand import DemandScenario
from mvlv.errors import EmptySampleError
from mvlv.netmodel import Bus, LineBranch, LoadPoint, NetworkModel, Source
from mvlv.pflow import solve
from mvlv.report import (QQ_COLUMNS, STATS_COLUMNS, VIOLATION_COLUMNS, StatutoryLimits,
                         emergency_check, five_number, qq, read_measurements, statutory_check,
                         uniform_scenario, voltage_stats, write_qq_csv, write_stats_csv,
                         write_violations_csv)


def test_uniform_scenario_levels(lv_feeder):
    hi = uniform_scenario(lv_feeder, 1.3)
    lo = uniform_scenario(lv_feeder, 0.16)
    assert set(hi.loads.values()) == {(1.3, 1.0)}
    assert set(lo.loads.values()) == {(0.16, 1.0)}
    assert uniform_scenario(lv_feeder, 0.0).total_kw() == 0.0
    with pytest.raises(Exception):
        uniform_scenario(lv_feeder, -1.0)


def test_uniform_scenario_scales_mv_loads():
    mv = cases.toy_mv()
    d = uniform_scenario(mv, 0.65)
    assert d.loads["mvload_m5"][0] == pytest.approx(130.0 * 0.5)


def test_five_number_cases():
    assert five_number([0.97] * 4) == (0.97,) * 5
    assert five_number([0.95, 0.97, 0.99]) == (0.95, 0.95, 0.97, 0.99, 0.99)
    # median of halves, median excluded when the count is odd
    assert five_number([1, 2, 3, 4, 5, 6, 7]) == (1, 2, 4, 6, 7)
    assert five_number([1, 2, 3, 4, 5, 6]) == (1, 2, 3.5, 5, 6)
    with pytest.raises(EmptySampleError):
        five_number([])


def test_voltage_stats_groups():
    hybrid = _hybrid()
    sol = solve(hybrid, uniform_scenario(hybrid, 1.3))
    stats = voltage_stats(sol)
    assert [s.group_id for s in stats] == sorted(s.group_id for s in stats)
    assert sum(s.n for s in stats) == len(hybrid.loads)
    for s in stats:
        assert s.v_min <= s.v_q1 <= s.v_med <= s.v_q3 <= s.v_max
    by_feeder = voltage_stats(sol, "mv_feeder_id")
    assert {s.group_id for s in by_feeder} == {"mvl_m1", "mvl_m6"}
    with pytest.raises(ValueError):
        voltage_stats(sol, "colour")


def _hybrid():
    from mvlv.synth import allocate, assemble, build_lv_catalog
    cat = build_lv_catalog(cases.catalog_circuits())
    mv = cases.toy_mv()
    return assemble(mv, allocate(mv, cat, seed=1), cat)


def _fake_solution(v_pu_by_zone):
    """A solved two-zone model with chosen node voltages patched in."""
    buses = [Bus("mv", (1, 2, 3)), Bus("lv", (1, 2, 3))]
    from mvlv.netmodel import TransformerBranch
    tr = TransformerBranch("t", "mv", "lv", "delta", "wye", 11.0, 0.4, 500.0, 0.01 + 0.05j)
    m = NetworkModel("z", buses, [], [tr], [], Source("mv", 11.0))
    sol = solve(m)
    v = sol.v.copy()
    for i, b in enumerate(sol.node_bus):
        if b in v_pu_by_zone:
            v[i] = v[i] / abs(v[i]) * v_pu_by_zone[b] * sol.v_base[i]
    import dataclasses
    return dataclasses.replace(sol, v=v)


def test_statutory_zone_bounds():
    assert statutory_check(_fake_solution({})) == []
    assert statutory_check(_fake_solution({"lv": 1.08})) == []
    viol = statutory_check(_fake_solution({"mv": 1.08}))
    assert {(v.bus, v.bound, v.zone) for v in viol} == {("mv", 1.06, "MV")}
    assert len(viol) == 3
    low = statutory_check(_fake_solution({"lv": 0.93}))
    assert [v.phase for v in low] == [1, 2, 3]
    assert all(v.bound == 0.94 and v.zone == "LV" for v in low)


def test_statutory_monotone():
    base = statutory_check(_fake_solution({"lv": 0.95}))
    raised = statutory_check(_fake_solution({"lv": 0.99}))
    assert not any(v.bound == 0.94 for v in raised) and base == []


def test_emergency_floor():
    sol = _fake_solution({"lv": 0.84})
    assert len(emergency_check(sol)) == 3
    assert emergency_check(_fake_solution({"lv": 0.86})) == []


def test_limits_validated():
    with pytest.raises(ValueError):
        StatutoryLimits(mv=(1.06, 0.94))


def test_qq_identity_and_shift():
    rng = np.random.default_rng(0)
    a = rng.normal(1.0, 0.02, 500)
    probs = np.linspace(0.01, 0.99, 99)
    for x, y in qq(a, a, probs):
        assert abs(x - y) <= 1e-12
    for x, y in qq(a, a + 0.01, probs):
        assert y - x == pytest.approx(0.01, abs=1e-12)


def test_qq_monotone_and_errors():
    hybrid = _hybrid()
    sol = solve(hybrid, uniform_scenario(hybrid, 1.3))
    model_v = list(sol.load_v_pu().values())
    meas = np.random.default_rng(1).normal(1.0, 0.01, 300)
    pairs = qq(model_v, meas, np.linspace(0.05, 0.95, 19))
    xs, ys = zip(*pairs)
    assert all(np.diff(xs) >= 0) and all(np.diff(ys) >= 0)
    with pytest.raises(EmptySampleError):
        qq([], [1.0], [0.5])
    with pytest.raises(ValueError):
        qq([1.0], [1.0], [0.0])


def test_qq_uses_type7_quantiles():
    pairs = qq([1, 2, 3, 4], [10, 20, 30, 40], [0.5, 0.25])
    assert pairs == [(2.5, 25.0), (1.75, 17.5)]


MEAS_HEADER = "timestamp_iso8601,device_id,v_avg_volts\n"


def test_read_measurements(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text(MEAS_HEADER + "2020-01-01T17:00:00Z,d1,230\n"
                 "2020-01-01T17:10:00Z,d1,235.0\n2020-01-01T17:20:00Z,d2,228\n")
    s = read_measurements(p)
    assert len(s.values) == 3 and s.rejected == 0
    assert s.values[1] == pytest.approx(235 / 230)
    assert round(s.values[1], 5) == 1.02174


def test_read_measurements_rejects_rows(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text(MEAS_HEADER + "t,d,abc\nt,d,-5\nt,d,\nt,d,231\n")
    s = read_measurements(p)
    assert len(s.values) == 1 and s.rejected == 3


def test_header_only_is_empty(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text(MEAS_HEADER)
    with pytest.raises(EmptySampleError):
        read_measurements(p)


def test_csv_headers(tmp_path):
    hybrid = _hybrid()
    sol = solve(hybrid, uniform_scenario(hybrid, 1.3))
    write_stats_csv(voltage_stats(sol), tmp_path / "s.csv")
    write_violations_csv(statutory_check(_fake_solution({"mv": 1.08})), tmp_path / "v.csv")
    write_qq_csv([0.5], [(1.0, 1.01)], tmp_path / "q.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == ",".join(STATS_COLUMNS)
    v = (tmp_path / "v.csv").read_text().splitlines()
    assert v[0] == ",".join(VIOLATION_COLUMNS)
    assert v[1] == "mv,A,1.08,MV,1.06"
    assert (tmp_path / "q.csv").read_text() == ",".join(QQ_COLUMNS) + "\n0.5,1,1.01\n"
