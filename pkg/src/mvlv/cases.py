"""Deterministic synthetic circuits used by the examples, tests and benchmarks.

``python -m mvlv.cases DIR`` regenerates the bundled files under ``DIR``.
"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .netmodel import Bus, LineBranch, LoadPoint, NetworkModel, Source, TransformerBranch

DATA_DIR = Path(__file__).parent / "data"

# ohm/km, Kron-reduced four-core LV cable and a single-phase service cable
LV_Z3 = np.array([[0.25 + 0.22j, 0.05 + 0.17j, 0.05 + 0.17j],
                  [0.05 + 0.17j, 0.25 + 0.22j, 0.05 + 0.17j],
                  [0.05 + 0.17j, 0.05 + 0.17j, 0.25 + 0.22j]])
LV_Z1 = np.array([[0.60 + 0.10j]])
MV_Z3 = np.array([[0.16 + 0.30j, 0.05 + 0.12j, 0.05 + 0.12j],
                  [0.05 + 0.12j, 0.16 + 0.30j, 0.05 + 0.12j],
                  [0.05 + 0.12j, 0.05 + 0.12j, 0.16 + 0.30j]])


def data_path(*parts) -> Path:
    return DATA_DIR.joinpath(*parts)


def synthetic_lv_circuit(name: str = "lvfeeder", n_loads: int = 60, n_feeders: int = 2,
                         backbone_spacing: int = 10, lateral_len: int = 10,
                         seg_m: tuple[float, float] = (3.0, 6.0), seed: int = 1,
                         with_transformer: bool = False) -> NetworkModel:
    """Radial LV network with three-phase backbones and mixed laterals.

    Customers are shared evenly between feeders.  On each feeder laterals
    alternate between three-phase (three single-phase customers at the end,
    one per phase) and single-phase (two customers, mid and end, phase
    rotating A/B/C).  Every bus that is not a junction or load point is a
    pure pass-through.
    """
    if lateral_len < 2 or backbone_spacing < 1:
        raise ValueError("need lateral_len >= 2 and backbone_spacing >= 1")
    rng = np.random.default_rng(seed)
    root = "lvbb"
    buses: dict[str, tuple] = {root: (1, 2, 3)}
    lines, loads = [], []

    def seg():
        return float(np.round(rng.uniform(*seg_m), 3))

    def add_line(a, b, phases, zkm):
        length = seg()
        lines.append(LineBranch(f"l{len(lines) + 1:04d}", a, b, phases, zkm * length / 1000.0,
                                length))

    def lateral_plan(n):
        out, k = [], 0
        while n > 0:
            cnt = min(3, n) if k % 2 == 0 else min(2, n)
            out.append(("3ph" if k % 2 == 0 else "1ph", cnt))
            n -= cnt
            k += 1
        return out

    share = [n_loads // n_feeders + (1 if i < n_loads % n_feeders else 0)
             for i in range(n_feeders)]
    for f, n_f in enumerate(share, start=1):
        prev = root
        single_phase = 0
        for j, (kind, cnt) in enumerate(lateral_plan(n_f), start=1):
            for s in range(backbone_spacing):
                bid = f"f{f}_b{j:02d}_{s:02d}"
                buses[bid] = (1, 2, 3)
                add_line(prev, bid, (1, 2, 3), LV_Z3)
                prev = bid
            junction = prev
            if kind == "3ph":
                lprev = junction
                for s in range(lateral_len):
                    bid = f"f{f}_l{j:02d}_{s:02d}"
                    buses[bid] = (1, 2, 3)
                    add_line(lprev, bid, (1, 2, 3), LV_Z3)
                    lprev = bid
                for p in range(1, cnt + 1):
                    loads.append(LoadPoint(f"f{f}_ld{j:02d}_{p}", lprev, (p,), 1.0, 0.95, 0.23))
            else:
                ph = (single_phase % 3) + 1
                single_phase += 1
                lprev = junction
                stops = {lateral_len // 2 - 1, lateral_len - 1} if cnt == 2 else {lateral_len - 1}
                for s in range(lateral_len):
                    bid = f"f{f}_l{j:02d}_{s:02d}"
                    buses[bid] = (ph,)
                    add_line(lprev, bid, (ph,), LV_Z1)
                    lprev = bid
                    if s in stops:
                        loads.append(LoadPoint(f"f{f}_ld{j:02d}_{s:02d}", bid, (ph,), 1.0,
                                               0.95, 0.23))
    transformers = []
    if with_transformer:
        buses = {"mvsrc": (1, 2, 3), **buses}
        transformers.append(TransformerBranch("tx", "mvsrc", root, "delta", "wye", 11.0, 0.4,
                                              800.0, complex(0.01, 0.04)))
        source = Source("mvsrc", 11.0)
    else:
        source = Source(root, 0.4)
    return NetworkModel(name, tuple(Bus(b, ph) for b, ph in buses.items()), tuple(lines),
                        tuple(transformers), tuple(loads), source)


def toy_mv(name: str = "mvtoy", load_kw=(50.0, 85.0, 130.0, 60.0, 100.0)) -> NetworkModel:
    """Ten-bus 11 kV circuit: busbar plus two radial feeders, five loads."""
    layout = {"m1": "mvbb", "m2": "m1", "m3": "m2", "m4": "m3", "m5": "m4",
              "m6": "mvbb", "m7": "m6", "m8": "m7", "m9": "m8"}
    lengths = {"m1": 0.8, "m2": 0.6, "m3": 0.9, "m4": 0.5, "m5": 0.7, "m6": 1.2, "m7": 0.4,
               "m8": 0.8, "m9": 0.6}
    buses = [Bus("mvbb", (1, 2, 3))] + [Bus(b, (1, 2, 3)) for b in layout]
    lines = [LineBranch(f"mvl_{b}", a, b, (1, 2, 3), MV_Z3 * lengths[b], lengths[b] * 1000.0)
             for b, a in layout.items()]
    sites = ("m2", "m4", "m5", "m7", "m9")
    loads = [LoadPoint(f"mvload_{s}", s, (1, 2, 3), kw, 1.0, 11.0)
             for s, kw in zip(sites, load_kw)]
    return NetworkModel(name, tuple(buses), tuple(lines), (), tuple(loads), Source("mvbb", 11.0))


def catalog_circuits() -> dict[str, NetworkModel]:
    """Three LV circuits of 15, 30 and 90 customers (the last behind a transformer)."""
    return {
        "lva": synthetic_lv_circuit("lva", 15, n_feeders=1, backbone_spacing=4,
                                    lateral_len=4, seed=11),
        "lvb": synthetic_lv_circuit("lvb", 30, n_feeders=2, backbone_spacing=4,
                                    lateral_len=4, seed=12),
        "lvc": synthetic_lv_circuit("lvc", 90, n_feeders=3, backbone_spacing=3,
                                    lateral_len=4, seed=13, with_transformer=True),
    }


def scale_mv(n_feeders: int = 6, loads_per_feeder: int = 15, load_kw: float = 110.0,
             seg_km: float = 0.25) -> NetworkModel:
    """Long MV circuit for scale tests: every feeder bus carries one load."""
    buses = [Bus("mvbb", (1, 2, 3))]
    lines, loads = [], []
    for f in range(1, n_feeders + 1):
        prev = "mvbb"
        for k in range(1, loads_per_feeder + 1):
            bid = f"s{f}_{k:02d}"
            buses.append(Bus(bid, (1, 2, 3)))
            lines.append(LineBranch(f"sl{f}_{k:02d}", prev, bid, (1, 2, 3), MV_Z3 * seg_km,
                                    seg_km * 1000.0))
            loads.append(LoadPoint(f"sload{f}_{k:02d}", bid, (1, 2, 3), load_kw, 1.0, 11.0))
            prev = bid
    return NetworkModel("mvscale", tuple(buses), tuple(lines), (), tuple(loads),
                        Source("mvbb", 11.0))


def scale_model(target_nodes: int = 100_000, seed: int = 7) -> NetworkModel:
    """Hybrid model of roughly ``target_nodes`` bus-phase nodes.

    Unspliced copies of a 60-customer LV circuit are allocated to every MV
    load of :func:`scale_mv`, with enough MV loads to reach the target.
    """
    from .synth import LvCatalogEntry, admd, allocate, assemble

    lv = synthetic_lv_circuit("lvscale", 60, seed=seed)
    per_lv = lv.node_count
    n_lv = max(1, round(target_nodes / per_lv))
    n_feeders = 6
    per_feeder = -(-n_lv // n_feeders)
    mv = scale_mv(n_feeders, per_feeder)
    entry = LvCatalogEntry("lvscale", lv, len(lv.loads), admd(len(lv.loads)))
    plan = allocate(mv, [entry], seed=seed)
    return assemble(mv, plan, [entry], name="scale")


def write_bundled(directory: Optional[Path] = None) -> list[Path]:
    from .dss_io import write_circuit

    root = Path(directory) if directory is not None else DATA_DIR
    written = []
    written += write_circuit(synthetic_lv_circuit("lvfeeder", 60), root / "lv_feeder_500")
    written += write_circuit(toy_mv(), root / "mv_toy")
    for cid, model in catalog_circuits().items():
        written += write_circuit(model, root / "lv_catalog" / cid)
    return written


if __name__ == "__main__":
    for p in write_bundled(Path(sys.argv[1]) if len(sys.argv) > 1 else None):
        print(p)
