import numpy as np
import pytest

from mvlv import cases, pflow
from mvlv.netmodel import Bus, LineBranch, LoadPoint, NetworkModel, Source, TransformerBranch

Z3 = np.array([[0.30 + 0.25j, 0.06 + 0.18j, 0.06 + 0.18j],
               [0.06 + 0.18j, 0.30 + 0.25j, 0.06 + 0.18j],
               [0.06 + 0.18j, 0.06 + 0.18j, 0.30 + 0.25j]]) * 0.05


def chain(n_buses=4, kv=0.4, load_at=(), z=Z3, kw=5.0):
    """Three-phase chain b0..b{n-1}, source at b0, three-phase loads at ``load_at``."""
    buses = [Bus(f"b{i}", (1, 2, 3)) for i in range(n_buses)]
    lines = [LineBranch(f"l{i}", f"b{i}", f"b{i + 1}", (1, 2, 3), z) for i in range(n_buses - 1)]
    loads = [LoadPoint(f"ld{i}", f"b{i}", (1, 2, 3), kw, 1.0) for i in load_at]
    return NetworkModel("chain", buses, lines, (), loads, Source("b0", kv))


def two_bus(z_pu=complex(0.01, 0.01), p_pu=0.5, kv=11.0, mva=1.0):
    """Balanced two-bus system whose per-phase equivalent is the textbook example."""
    z_base = kv ** 2 / mva
    z = np.eye(3) * z_pu * z_base
    model = NetworkModel("two_bus", [Bus("s", (1, 2, 3)), Bus("r", (1, 2, 3))],
                         [LineBranch("l", "s", "r", (1, 2, 3), z)], (),
                         [LoadPoint("p", "r", (1, 2, 3), p_pu * mva * 1000.0, 1.0)],
                         Source("s", kv))
    return model


def regulated(source_pu=1.05, setpoint=1.0, band=0.0125, tap=1.0, kw=300.0, n_units=1,
              tap_min=0.9, tap_max=1.1):
    """33 kV source, regulated 33/11 kV unit(s), short 11 kV line to a balanced load."""
    trs = [TransformerBranch(f"t{k}", "hv", "mv", "delta", "wye", 33.0, 11.0, 1000.0,
                             complex(0.0088, 0.1997), tap=tap, tap_min=tap_min,
                             tap_max=tap_max, regulated=True, target_bus="mv",
                             setpoint_pu=setpoint, band_pu=band)
           for k in range(1, n_units + 1)]
    return NetworkModel(
        "reg", [Bus("hv", (1, 2, 3)), Bus("mv", (1, 2, 3)), Bus("far", (1, 2, 3))],
        [LineBranch("l1", "mv", "far", (1, 2, 3), Z3 * 4)], trs,
        [LoadPoint("ld", "far", (1, 2, 3), kw, 0.95)], Source("hv", 33.0, pu=source_pu))


@pytest.fixture
def lv_feeder():
    return cases.synthetic_lv_circuit("lvfeeder", 60)


@pytest.fixture
def data_dir():
    return cases.DATA_DIR


# Every solution that reaches the solver's finishing step is checked against
# the power-balance and KCL bounds; a breach anywhere fails the session.
BALANCE_TOL = 1e-6
KCL_TOL = 1e-8
INVARIANTS: list[tuple[str, int, float, float]] = []
ACCEPTANCE: list[str] = []
_original_finish = pflow._finish


def _recording_finish(*args, **kwargs):
    sol = _original_finish(*args, **kwargs)
    INVARIANTS.append((sol.model.name, len(sol.node_bus), pflow.power_balance_pu(sol),
                       pflow.kcl_residual_pu(sol)))
    return sol


def invariant_breaches():
    return [r for r in INVARIANTS if not (r[2] <= BALANCE_TOL and r[3] <= KCL_TOL)]


def pytest_configure(config):
    pflow._finish = _recording_finish


def pytest_terminal_summary(terminalreporter):
    for line in ACCEPTANCE:
        terminalreporter.write_line(line)
    if not INVARIANTS:
        return
    bad = invariant_breaches()
    worst_b = max(r[2] for r in INVARIANTS)
    worst_k = max(r[3] for r in INVARIANTS)
    terminalreporter.write_line(
        f"solution invariants: {len(INVARIANTS)} converged solutions, worst power balance "
        f"{worst_b:.3g} pu, worst KCL {worst_k:.3g} pu, {len(bad)} breaches")
    for r in bad[:10]:
        terminalreporter.write_line(f"  breach: {r}")


def pytest_sessionfinish(session, exitstatus):
    if invariant_breaches() and exitstatus == 0:
        session.exitstatus = 1
