"""Hot inner-loop kernels for the power-flow iteration.

Each kernel has a numba version and a pure-numpy version with identical
semantics.  Set ``MVLV_DISABLE_NUMBA=1`` to force the numpy path; it is also
used automatically when numba is not importable.
"""

from __future__ import annotations

import os

import numpy as np


def load_currents_numpy(v, node, s_conj, n_nodes):
    """Sum of conj(S / V) per node for constant-power loads (amps, drawn out)."""
    contrib = s_conj / np.conj(v[node])
    return (np.bincount(node, weights=contrib.real, minlength=n_nodes)
            + 1j * np.bincount(node, weights=contrib.imag, minlength=n_nodes))


def max_abs_change_numpy(v_new, v_old, inv_base):
    if v_new.size == 0:
        return 0.0
    return float(np.max(np.abs(v_new - v_old) * inv_base))


try:
    from numba import njit

    @njit(cache=True)
    def _load_currents_nb(v, node, s_conj, n_nodes):
        out = np.zeros(n_nodes, dtype=np.complex128)
        for k in range(node.shape[0]):
            i = node[k]
            vi = v[i]
            out[i] += s_conj[k] / (vi.real - 1j * vi.imag)
        return out

    @njit(cache=True)
    def _max_abs_change_nb(v_new, v_old, inv_base):
        worst = 0.0
        for i in range(v_new.shape[0]):
            d = v_new[i] - v_old[i]
            m = np.sqrt(d.real * d.real + d.imag * d.imag) * inv_base[i]
            if m > worst:
                worst = m
        return worst

    def load_currents_numba(v, node, s_conj, n_nodes):
        return _load_currents_nb(v, node, s_conj, n_nodes)

    def max_abs_change_numba(v_new, v_old, inv_base):
        return float(_max_abs_change_nb(v_new, v_old, inv_base))

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False
    load_currents_numba = None
    max_abs_change_numba = None

DISABLED = os.environ.get("MVLV_DISABLE_NUMBA", "").strip() not in ("", "0")
USING_NUMBA = HAVE_NUMBA and not DISABLED

if USING_NUMBA:
    load_currents = load_currents_numba
    max_abs_change = max_abs_change_numba
else:
    load_currents = load_currents_numpy
    max_abs_change = max_abs_change_numpy
