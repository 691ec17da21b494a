"""Independent reference computations used to freeze expected values.

Nothing here imports the solver; the dense oracle builds its own node order
and admittance matrix straight from the model's lines.
"""

import math

import numpy as np

from mvlv.netmodel import Bus, LineBranch, LoadPoint, NetworkModel, Source


def dense_fixed_point(model, demand, tol=1e-12, max_iter=10_000):
    """Dense current-injection iteration for line-only models with an ideal source.

    Returns {(bus, phase): complex volts}.
    """
    nodes = [(b.id, p) for b in model.buses for p in b.phases]
    idx = {k: i for i, k in enumerate(nodes)}
    n = len(nodes)
    y = np.zeros((n, n), dtype=complex)
    for ln in model.lines:
        yp = np.linalg.inv(ln.z)
        a = [idx[(ln.from_bus, p)] for p in ln.phases]
        b = [idx[(ln.to_bus, p)] for p in ln.phases]
        y[np.ix_(a, a)] += yp
        y[np.ix_(b, b)] += yp
        y[np.ix_(a, b)] -= yp
        y[np.ix_(b, a)] -= yp
    src = model.source
    v_ln = src.pu * src.base_kv * 1000.0 / math.sqrt(3.0)
    slack = [idx[(src.bus, p)] for p in src.phases]
    free = [i for i in range(n) if i not in set(slack)]
    vs = np.array([v_ln * np.exp(1j * math.radians(src.angle_deg - 120.0 * (p - 1)))
                   for p in src.phases])
    s = np.zeros(n, dtype=complex)
    for ld in model.loads:
        if ld.id not in demand.loads:
            continue
        kw, pf = demand.loads[ld.id]
        q = kw * math.tan(math.acos(pf)) if kw else 0.0
        for p in ld.phases:
            s[idx[(ld.bus, p)]] += complex(kw, q) * 1000.0 / len(ld.phases)
    yff = y[np.ix_(free, free)]
    rhs0 = -y[np.ix_(free, slack)] @ vs
    v = np.zeros(n, dtype=complex)
    v[slack] = vs
    v[free] = np.linalg.solve(yff, rhs0)
    for _ in range(max_iter):
        i_load = np.conj(s / v)
        v_new = np.linalg.solve(yff, rhs0 - i_load[free])
        step = np.max(np.abs(v_new - v[free])) / v_ln if free else 0.0
        v[free] = v_new
        if step <= tol:
            return {k: v[i] for k, i in idx.items()}
    raise RuntimeError("oracle did not converge")


def random_circuit(rng, max_nodes=20, kv=0.4):
    """Random radial line-only circuit with unbalanced loads, at most ``max_nodes`` bus-phases."""
    buses = {"s": (1, 2, 3)}
    order = ["s"]
    lines = []
    total = 3
    while True:
        parent = order[rng.integers(len(order))]
        pp = buses[parent]
        k = int(rng.integers(1, len(pp) + 1))
        phases = tuple(sorted(rng.choice(pp, size=k, replace=False).tolist()))
        if total + len(phases) > max_nodes:
            break
        name = f"n{len(order)}"
        r = rng.uniform(0.02, 0.2, len(phases))
        x = rng.uniform(0.01, 0.15, len(phases))
        z = np.diag(r + 1j * x)
        for i in range(len(phases)):
            for j in range(i):
                zm = complex(rng.uniform(0, 0.3), rng.uniform(0, 0.5)) * min(r[i], r[j])
                z[i, j] = z[j, i] = zm
        lines.append(LineBranch(f"l{len(order)}", parent, name, phases, z))
        buses[name] = phases
        order.append(name)
        total += len(phases)
    loads = []
    for b in order[1:]:
        if rng.random() < 0.8:
            ph = buses[b]
            if len(ph) == 3 and rng.random() < 0.4:
                loads.append(LoadPoint(f"d{b}", b, ph, float(rng.uniform(1, 12)),
                                       float(rng.uniform(0.8, 1.0))))
            else:
                p = int(rng.choice(ph))
                loads.append(LoadPoint(f"d{b}_{p}", b, (p,), float(rng.uniform(0.5, 6)),
                                       float(rng.uniform(0.8, 1.0))))
    model = NetworkModel("rand", [Bus(b, buses[b]) for b in order], lines, (), loads,
                         Source("s", kv, pu=float(rng.uniform(0.98, 1.05)),
                                angle_deg=float(rng.uniform(-10, 10))))
    return model


def scalar_two_bus(z_pu, s_pu, iterations=500):
    v = 1.0 + 0j
    for _ in range(iterations):
        v = 1.0 - z_pu * np.conj(s_pu / v)
    return v
