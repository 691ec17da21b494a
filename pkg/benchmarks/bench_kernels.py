"""Compare the numba and numpy kernel paths, alone and inside a full solve.

    python3 benchmarks/bench_kernels.py [--nodes 100000] [--repeat 20]

The full-solve timing is taken in two subprocesses, one with
MVLV_DISABLE_NUMBA=1, so each uses the path selected at import.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from mvlv import _accel


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernels(n_nodes, repeat):
    rng = np.random.default_rng(0)
    v = 230 * np.exp(1j * rng.uniform(-0.1, 0.1, n_nodes)) * rng.uniform(0.95, 1.05, n_nodes)
    v_old = v * (1 + 1e-4 * rng.standard_normal(n_nodes))
    inv_base = np.full(n_nodes, 1 / 230.0)
    n_loads = n_nodes // 5
    node = rng.integers(0, n_nodes, n_loads)
    s_conj = np.conj(rng.uniform(500, 1500, n_loads) * (1 + 0.3j))

    rows = {}
    paths = [("numpy", _accel.load_currents_numpy, _accel.max_abs_change_numpy)]
    if _accel.HAVE_NUMBA:
        _accel.load_currents_numba(v, node, s_conj, n_nodes)  # compile
        _accel.max_abs_change_numba(v, v_old, inv_base)
        paths.append(("numba", _accel.load_currents_numba, _accel.max_abs_change_numba))
    ref = _accel.load_currents_numpy(v, node, s_conj, n_nodes)
    for name, lc, mac in paths:
        err = float(np.max(np.abs(lc(v, node, s_conj, n_nodes) - ref)))
        rows[name] = {
            "load_currents_s": best_of(lambda: lc(v, node, s_conj, n_nodes), repeat),
            "max_abs_change_s": best_of(lambda: mac(v, v_old, inv_base), repeat),
            "max_diff_vs_numpy": err,
        }
    return rows


SOLVE_SNIPPET = """
import json, time
from mvlv import _accel, cases
from mvlv.pflow import solve
from mvlv.report import uniform_scenario
m = cases.scale_model({nodes})
d = uniform_scenario(m, 1.3)
solve(m, d)
t0 = time.perf_counter()
s = solve(m, d)
print(json.dumps({{"numba": _accel.USING_NUMBA, "solve_s": time.perf_counter() - t0,
                  "iterations": s.iterations, "nodes": m.node_count}}))
"""


def full_solve(nodes):
    out = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, MVLV_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", SOLVE_SNIPPET.format(nodes=nodes)],
                             env=env, capture_output=True, text=True, check=True)
        out[label] = json.loads(res.stdout.strip().splitlines()[-1])
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--nodes", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-solve", action="store_true")
    a = ap.parse_args()
    print("kernels, %d nodes (best of %d)" % (a.nodes, a.repeat))
    for name, r in kernels(a.nodes, a.repeat).items():
        print(f"  {name:6s} load_currents {r['load_currents_s'] * 1e3:8.3f} ms   "
              f"max_abs_change {r['max_abs_change_s'] * 1e3:8.3f} ms   "
              f"diff {r['max_diff_vs_numpy']:.1e}")
    if not a.skip_solve:
        print("full solve of the scale model (second call, compile excluded)")
        for name, r in full_solve(a.nodes).items():
            print(f"  {name:6s} {r['solve_s']:.3f} s  iterations={r['iterations']}  "
                  f"nodes={r['nodes']}")


if __name__ == "__main__":
    main()
