import builtins
import math

import numpy as np
import pytest

from mvlv import cases
from mvlv.dss_io import models_equivalent, parse_circuit, parse_matrix, parse_raw, write_circuit
from mvlv.errors import LinkError, ParseError, TopologyError
from mvlv.netmodel import Bus, NetworkModel, Source, TransformerBranch

MINIMAL = """\
! smallest well-formed circuit
New Circuit.mini bus1=src basekv=0.4 pu=1.0
New Linecode.cable nphases=3 units=km
~ rmatrix=[0.1 | 0.02 0.1 | 0.02 0.02 0.1]
~ xmatrix=[0.08 | 0.03 0.08 | 0.03 0.03 0.08]
New Line.l1 bus1=src.1.2.3 bus2=ld.1.2.3 linecode=cable length=250 units=m  // inline comment
New Load.house bus1=ld.1 phases=1 kw=2.5 pf=0.95
"""


def write(tmp_path, text, name="master.dss"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_circuit(tmp_path):
    m = parse_circuit(write(tmp_path, MINIMAL))
    assert [b.id for b in m.buses] == ["src", "ld"]
    assert len(m.lines) == 1 and len(m.loads) == 1
    ln = m.lines[0]
    assert ln.length == 250.0
    assert ln.z[0, 0] == pytest.approx(complex(0.1, 0.08) * 0.25)
    assert m.loads[0].phases == (1,)
    assert m.source.base_kv == 0.4


def test_lower_triangular_completed():
    z = parse_matrix("[0.1 | 0.02 0.1 | 0.02 0.02 0.1]", 3)
    assert np.array_equal(z, z.T)
    assert z[0, 1] == z[2, 0] == z[1, 2] == 0.02
    assert np.allclose(np.diag(z), 0.1)


def test_full_matrix_must_be_symmetric():
    with pytest.raises(ParseError):
        parse_matrix("[0.1 0.02 | 0.03 0.1]", 2)


def test_unsupported_kind_reports_line(tmp_path):
    p = write(tmp_path, MINIMAL + "New Capacitor.c1 bus1=ld kvar=50\n")
    with pytest.raises(ParseError) as err:
        parse_circuit(p)
    assert err.value.line == 8
    assert "capacitor" in err.value.message.lower()
    assert err.value.file == str(p)


def test_unknown_key_is_an_error(tmp_path):
    with pytest.raises(ParseError) as err:
        parse_circuit(write(tmp_path, MINIMAL.replace("pf=0.95", "pf=0.95 colour=red")))
    assert err.value.line == 7


def test_nonzero_capacitance_rejected(tmp_path):
    text = MINIMAL.replace("units=km\n", "units=km cmatrix=[3 | 0 3 | 0 0 3]\n")
    with pytest.raises(ParseError):
        parse_circuit(write(tmp_path, text))
    zero = MINIMAL.replace("units=km\n", "units=km cmatrix=[0 | 0 0 | 0 0 0]\n")
    assert len(parse_circuit(write(tmp_path, zero)).lines) == 1


def test_dangling_linecode(tmp_path):
    with pytest.raises(LinkError):
        parse_circuit(write(tmp_path, MINIMAL.replace("linecode=cable", "linecode=nope")))


def test_second_source_rejected(tmp_path):
    with pytest.raises((TopologyError, ParseError)):
        parse_circuit(write(tmp_path, MINIMAL + "New Circuit.other bus1=x basekv=11\n"))


def test_duplicate_names_case_insensitive(tmp_path):
    with pytest.raises(ParseError):
        parse_circuit(write(tmp_path, MINIMAL + "New Load.HOUSE bus1=ld.2 phases=1 kw=1\n"))


def test_redirect_and_order_insensitive_linecodes(tmp_path):
    header, rest = MINIMAL.split("New Linecode")
    codes, net = rest.split("New Line.l1")
    write(tmp_path, "New Line.l1" + net, "net.dss")
    codes = "New Linecode" + codes
    write(tmp_path, codes, "codes.dss")
    master = write(tmp_path, header + "Redirect net.dss\nRedirect codes.dss\n")
    m = parse_circuit(master)
    ref = parse_circuit(write(tmp_path, MINIMAL, "ref.dss"))
    assert models_equivalent(m, ref)
    raw = parse_raw(master)
    assert [p.name for p in raw.include_chain] == ["master.dss", "net.dss", "codes.dss"]


def test_abbreviated_keys_and_case(tmp_path):
    text = ("NEW circuit.Mini BUS1=src BASEKV=0.4\n"
            "new line.L1 bus1=src bus2=b len=0.1 units=km\n"
            "~ rmat=[0.2 | 0 0.2 | 0 0 0.2] xmat=[0.1 | 0 0.1 | 0 0 0.1]\n")
    m = parse_circuit(write(tmp_path, text))
    assert m.name == "mini" and m.lines[0].id == "l1"
    assert m.lines[0].z[0, 0] == pytest.approx(0.02 + 0.01j)


def test_round_trip_minimal(tmp_path):
    m = parse_circuit(write(tmp_path, MINIMAL))
    files = write_circuit(m, tmp_path / "out")
    assert files[0].name == "master.dss"
    back = parse_circuit(tmp_path / "out" / "master.dss")
    assert models_equivalent(m, back)
    np.testing.assert_allclose(back.lines[0].z, m.lines[0].z, rtol=1e-12)


def test_round_trip_transformer(tmp_path):
    tr = TransformerBranch("t1", "mv", "lv", "delta", "wye", 11.0, 0.4, 500.0,
                           complex(0.01, 0.05), tap=1.025, regulated=True, target_bus="lv",
                           setpoint_pu=1.01, band_pu=0.01)
    m = NetworkModel("tx", [Bus("mv", (1, 2, 3)), Bus("lv", (1, 2, 3))], [], [tr], [],
                     Source("mv", 11.0, pu=1.02, r1=0.1, x1=0.5))
    write_circuit(m, tmp_path)
    back = parse_circuit(tmp_path / "master.dss")
    t2 = back.transformers[0]
    assert t2.z_pu == pytest.approx(tr.z_pu, rel=1e-12)
    assert t2.tap == pytest.approx(1.025, rel=1e-12)
    assert (t2.conn_hv, t2.conn_lv, t2.regulated) == ("delta", "wye", True)
    assert t2.setpoint_pu == pytest.approx(1.01) and t2.band_pu == pytest.approx(0.01)
    assert models_equivalent(m, back)


def test_transformer_per_winding_form(tmp_path):
    text = ("New Circuit.t bus1=mv basekv=11\n"
            "New Transformer.t1 phases=3 windings=2 xhl=4\n"
            "~ wdg=1 bus=mv conn=delta kv=11 kva=800 %r=0.5\n"
            "~ wdg=2 bus=lv conn=wye kv=0.4 kva=800 %r=0.5 tap=0.975\n")
    tr = parse_circuit(write(tmp_path, text)).transformers[0]
    assert tr.z_pu == pytest.approx(0.01 + 0.04j)
    assert tr.tap == pytest.approx(0.975)
    assert (tr.kv_hv, tr.kv_lv, tr.rating_kva) == (11.0, 0.4, 800.0)


def test_bundled_files_round_trip(tmp_path):
    m = parse_circuit(cases.data_path("lv_catalog", "lvc", "master.dss"))
    assert models_equivalent(m, cases.catalog_circuits()["lvc"])
    write_circuit(m, tmp_path)
    assert models_equivalent(parse_circuit(tmp_path / "master.dss"), m)


def test_failed_write_leaves_no_files(tmp_path, monkeypatch):
    m = cases.synthetic_lv_circuit("x", 6, n_feeders=1, backbone_spacing=2, lateral_len=2)
    real_open = builtins.open
    calls = {"n": 0}

    def flaky(path, mode="r", *a, **k):
        if "w" in mode:
            calls["n"] += 1
            if calls["n"] == 3:
                raise OSError("disk full")
        return real_open(path, mode, *a, **k)

    monkeypatch.setattr(builtins, "open", flaky)
    with pytest.raises(OSError):
        write_circuit(m, tmp_path / "out")
    monkeypatch.undo()
    assert list((tmp_path / "out").iterdir()) == []


def test_write_into_a_file_path_fails(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        write_circuit(cases.toy_mv(), blocker / "sub")
