"""Reader and writer for a strict subset of the OpenDSS circuit text format.

Supported: ``New``/``Edit`` of Circuit (and the Vsource it defines), Linecode,
Line, two-winding three-phase Transformer, constant-power Load and
RegControl, plus ``Redirect``/``Compile`` includes.  ``Clear``, ``Set``,
``Calcvoltagebases`` and ``Solve`` are accepted and ignored.  Anything else is
a :class:`ParseError` carrying the file and line number.
"""

from __future__ import annotations

import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import LinkError, ParseError, TopologyError
from .netmodel import (Bus, LineBranch, LoadPoint, NetworkModel, Source,
                       TransformerBranch)

log = logging.getLogger(__name__)

UNIT_TO_M = {"mi": 1609.344, "kft": 304.8, "km": 1000.0, "m": 1.0, "ft": 0.3048,
             "in": 0.0254, "cm": 0.01, "mm": 0.001, "none": 1.0}

PROPERTIES = {
    "circuit": ("bus1", "basekv", "pu", "angle", "phases", "frequency", "basefreq",
                "r1", "x1", "r0", "x0"),
    "linecode": ("nphases", "rmatrix", "xmatrix", "cmatrix", "units", "r1", "x1",
                 "r0", "x0", "c1", "c0", "basefreq", "normamps", "emergamps"),
    "line": ("bus1", "bus2", "linecode", "length", "phases", "units", "rmatrix",
             "xmatrix", "cmatrix", "r1", "x1", "r0", "x0", "c1", "c0", "normamps",
             "emergamps"),
    "transformer": ("phases", "windings", "buses", "conns", "kvs", "kvas", "%rs", "xhl",
                    "taps", "wdg", "bus", "conn", "kv", "kva", "%r", "tap", "%loadloss",
                    "%noloadloss", "%imag", "maxtap", "mintap", "numtaps"),
    "load": ("bus1", "phases", "kv", "kw", "pf", "model", "conn"),
    "regcontrol": ("transformer", "winding", "vreg", "band", "ptratio", "bus", "delay"),
}
KIND_ALIASES = {"vsource": "circuit"}
KEY_ALIASES = {"rs": "%rs", "r": "%r", "loadloss": "%loadloss"}
IGNORED_COMMANDS = {"clear", "set", "calcvoltagebases", "solve"}


@dataclass
class Element:
    kind: str
    name: str
    props: list = field(default_factory=list)  # (key, value, file, line)
    file: str = ""
    line: int = 0

    def get(self, key, default=None):
        for k, v, *_ in reversed(self.props):
            if k == key:
                return v
        return default

    def where(self, key=None):
        if key is not None:
            for k, _, f, ln in reversed(self.props):
                if k == key:
                    return f, ln
        return self.file, self.line


@dataclass
class RawCircuit:
    elements: list
    source_file: Path
    include_chain: list

    def of_kind(self, kind):
        return [e for e in self.elements if e.kind == kind]


def _strip_comment(text: str) -> str:
    for marker in ("!", "//"):
        pos = text.find(marker)
        if pos >= 0:
            text = text[:pos]
    return text


_TOKEN = re.compile(r'''\s*(?:([^\s=]+)\s*=\s*)?("[^"]*"|'[^']*'|\[[^\]]*\]|\([^)]*\)|\{[^}]*\}|[^\s\[\]"'(){}]+)''')


def _tokenize(text: str, file, line):
    out, pos = [], 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ParseError(file, line, f"cannot tokenize near {text[pos:pos + 20]!r}")
        out.append((m.group(1), m.group(2)))
        pos = m.end()
        while pos < len(text) and text[pos].isspace():
            pos += 1
    return out


def _unquote(value: str) -> str:
    if value and value[0] in "[({\"'" and value[-1] in "])}\"'":
        return value[1:-1].strip()
    return value


def _logical_lines(path: Path):
    """Yield (line_number, text) joining ``~`` continuations."""
    with open(path, encoding="utf-8") as fh:
        pending = None
        for lineno, raw in enumerate(fh, start=1):
            text = _strip_comment(raw).strip()
            if not text:
                continue
            low = text.lower()
            if text.startswith("~") or low.startswith("more ") or low == "more":
                if pending is None:
                    raise ParseError(path, lineno, "continuation without a preceding command")
                body = text[1:] if text.startswith("~") else text[4:]
                pending = (pending[0], pending[1] + " " + body)
                continue
            if pending is not None:
                yield pending
            pending = (lineno, text)
        if pending is not None:
            yield pending


def _canonical_key(kind: str, key: str, file, line) -> str:
    key = key.lower()
    key = KEY_ALIASES.get(key, key) if kind == "transformer" else key
    names = PROPERTIES[kind]
    if key in names:
        return key
    matches = [n for n in names if n.startswith(key)]
    if len(matches) == 1:
        return matches[0]
    if matches:
        raise ParseError(file, line, f"ambiguous {kind} property {key!r}: {matches}")
    raise ParseError(file, line, f"unknown {kind} property {key!r}")


def parse_raw(master_path) -> RawCircuit:
    master = Path(master_path)
    if not master.exists():
        raise ParseError(master, 0, "file not found")
    elements: list[Element] = []
    index: dict[tuple[str, str], Element] = {}
    chain: list[Path] = []

    def visit(path: Path, stack: tuple):
        path = path.resolve()
        if path in stack:
            raise ParseError(path, 0, "circular Redirect")
        chain.append(path)
        for lineno, text in _logical_lines(path):
            tokens = _tokenize(text, path, lineno)
            key, cmd = tokens[0]
            if key is not None:
                raise ParseError(path, lineno, f"expected a command, got {key}=")
            cmd = cmd.lower()
            if cmd in ("redirect", "compile"):
                if len(tokens) != 2:
                    raise ParseError(path, lineno, f"{cmd} expects one file name")
                target = (path.parent / _unquote(tokens[1][1])).resolve()
                if not target.exists():
                    raise ParseError(path, lineno, f"included file not found: {target}")
                visit(target, stack + (path,))
                continue
            if cmd in IGNORED_COMMANDS:
                continue
            if cmd not in ("new", "edit"):
                raise ParseError(path, lineno, f"unsupported command {cmd!r}")
            rest = tokens[1:]
            if not rest:
                raise ParseError(path, lineno, f"{cmd} without an object")
            k0, v0 = rest[0]
            if k0 is not None and k0.lower() == "object":
                rest = rest[1:]
            elif k0 is not None:
                raise ParseError(path, lineno, f"expected Kind.name after {cmd}")
            else:
                rest = rest[1:]
            if "." not in v0:
                raise ParseError(path, lineno, f"expected Kind.name, got {v0!r}")
            kind, name = v0.split(".", 1)
            kind = KIND_ALIASES.get(kind.lower(), kind.lower())
            name = name.lower()
            if kind not in PROPERTIES:
                raise ParseError(path, lineno, f"unsupported element kind {v0.split('.')[0]!r}")
            if cmd == "new":
                if kind == "circuit" and any(e.kind == "circuit" for e in elements):
                    if v0.split(".")[0].lower() == "vsource":
                        raise TopologyError(f"{path}:{lineno}: a second source is not supported")
                    raise TopologyError(f"{path}:{lineno}: duplicate circuit declaration")
                if (kind, name) in index:
                    raise ParseError(path, lineno, f"duplicate {kind} name {name!r}")
                el = Element(kind, name, file=str(path), line=lineno)
                elements.append(el)
                index[(kind, name)] = el
            else:
                if kind == "circuit":
                    el = next((e for e in elements if e.kind == "circuit"), None)
                else:
                    el = index.get((kind, name))
                if el is None:
                    raise ParseError(path, lineno, f"Edit of undefined {kind} {name!r}")
            for k, v in rest:
                if k is None:
                    raise ParseError(path, lineno, f"positional value {v!r} not supported; "
                                                   f"use key=value")
                el.props.append((_canonical_key(kind, k, path, lineno), _unquote(v),
                                 str(path), lineno))

    visit(master, ())
    circuits = [e for e in elements if e.kind == "circuit"]
    if len(circuits) != 1:
        raise TopologyError(f"{master}: expected exactly one circuit declaration, "
                            f"found {len(circuits)}")
    return RawCircuit(elements, master, chain)


def _float(el: Element, key, default=None):
    raw = el.get(key)
    if raw is None:
        if default is None:
            f, ln = el.where()
            raise ParseError(f, ln, f"{el.kind}.{el.name}: missing required {key}")
        return default
    try:
        return float(raw)
    except ValueError:
        f, ln = el.where(key)
        raise ParseError(f, ln, f"{el.kind}.{el.name}: {key}={raw!r} is not a number") from None


def _list(el: Element, key):
    raw = el.get(key)
    if raw is None:
        return None
    return [t for t in re.split(r"[\s,]+", raw.strip()) if t]


def parse_matrix(text: str, n: int, file="<matrix>", line=0) -> np.ndarray:
    """Symmetric n x n matrix from full, lower-triangular or flat input."""
    text = _unquote(text.strip())
    try:
        if "|" in text:
            rows = [[float(x) for x in re.split(r"[\s,]+", r.strip()) if x]
                    for r in text.split("|")]
        else:
            flat = [float(x) for x in re.split(r"[\s,]+", text) if x]
            if len(flat) == n * n:
                rows = [flat[i * n:(i + 1) * n] for i in range(n)]
            elif len(flat) == n * (n + 1) // 2:
                rows, k = [], 0
                for i in range(n):
                    rows.append(flat[k:k + i + 1])
                    k += i + 1
            else:
                raise ParseError(file, line, f"matrix has {len(flat)} entries, "
                                             f"expected {n * n} or {n * (n + 1) // 2}")
    except ValueError:
        raise ParseError(file, line, f"non-numeric matrix entry in {text!r}") from None
    if len(rows) != n:
        raise ParseError(file, line, f"matrix has {len(rows)} rows, expected {n}")
    m = np.zeros((n, n))
    lower = all(len(r) == i + 1 for i, r in enumerate(rows))
    full = all(len(r) == n for r in rows)
    if not (lower or full):
        raise ParseError(file, line, "matrix rows must be full or lower-triangular")
    for i, r in enumerate(rows):
        for j, x in enumerate(r):
            m[i, j] = x
            if lower:
                m[j, i] = x
    if full and not np.allclose(m, m.T, rtol=1e-12, atol=1e-15):
        raise ParseError(file, line, "matrix is not symmetric")
    return m


def _sequence_matrix(z1: complex, z0: complex, n: int) -> np.ndarray:
    if n == 1:
        return np.array([[z1]])
    zs, zm = (2 * z1 + z0) / 3, (z0 - z1) / 3
    return np.full((n, n), zm) + np.eye(n) * (zs - zm)


def _split_bus(spec: str, file, line):
    parts = spec.lower().split(".")
    name, nodes = parts[0], parts[1:]
    if not name:
        raise ParseError(file, line, f"empty bus name in {spec!r}")
    try:
        phases = [int(p) for p in nodes]
    except ValueError:
        raise ParseError(file, line, f"bad phase suffix in {spec!r}") from None
    if any(p > 3 or p < 0 for p in phases):
        raise ParseError(file, line, f"explicit neutral or unknown node in {spec!r}")
    phases = [p for p in phases if p != 0]
    return name, tuple(phases) if phases else None


def _impedance_per_m(el: Element, n: int, unit_key="units"):
    """Series impedance per metre for an element carrying its own matrices."""
    unit = (el.get(unit_key) or "m").lower()
    if unit not in UNIT_TO_M:
        f, ln = el.where(unit_key)
        raise ParseError(f, ln, f"unknown length unit {unit!r}")
    for key in ("c1", "c0"):
        if _float(el, key, 0.0) != 0.0:
            f, ln = el.where(key)
            raise ParseError(f, ln, f"{el.kind}.{el.name}: shunt capacitance not supported")
    if el.get("cmatrix") is not None:
        f, ln = el.where("cmatrix")
        if np.any(parse_matrix(el.get("cmatrix"), n, f, ln) != 0):
            raise ParseError(f, ln, f"{el.kind}.{el.name}: nonzero cmatrix not supported")
    if el.get("rmatrix") is not None or el.get("xmatrix") is not None:
        fr, lr = el.where("rmatrix")
        fx, lx = el.where("xmatrix")
        r = parse_matrix(el.get("rmatrix", "0"), n, fr, lr) if el.get("rmatrix") else np.zeros((n, n))
        x = parse_matrix(el.get("xmatrix", "0"), n, fx, lx) if el.get("xmatrix") else np.zeros((n, n))
        z = r + 1j * x
    elif el.get("r1") is not None or el.get("x1") is not None:
        z1 = complex(_float(el, "r1", 0.0), _float(el, "x1", 0.0))
        z0 = complex(_float(el, "r0", z1.real), _float(el, "x0", z1.imag))
        z = _sequence_matrix(z1, z0, n)
    else:
        return None
    return z / UNIT_TO_M[unit]


def parse_circuit(master_path) -> NetworkModel:
    """Parse a master file (and its includes) into a linked :class:`NetworkModel`."""
    raw = parse_raw(master_path)
    circ = raw.of_kind("circuit")[0]
    phases: dict[str, set] = {}
    order: list[str] = []

    def touch(bus, ph):
        if bus not in phases:
            phases[bus] = set()
            order.append(bus)
        phases[bus].update(ph)

    # circuit / source
    n_src = int(_float(circ, "phases", 3))
    src_spec = circ.get("bus1", "sourcebus")
    src_bus, src_ph = _split_bus(src_spec, *circ.where("bus1"))
    src_ph = src_ph or tuple(range(1, n_src + 1))
    if len(src_ph) != n_src:
        raise ParseError(*circ.where("bus1"), f"source bus phases {src_ph} vs phases={n_src}")
    touch(src_bus, src_ph)
    freq = _float(circ, "basefreq", _float(circ, "frequency", 50.0))
    source = Source(src_bus, _float(circ, "basekv", 11.0), pu=_float(circ, "pu", 1.0),
                    angle_deg=_float(circ, "angle", 0.0), phases=src_ph,
                    r1=_float(circ, "r1", 0.0), x1=_float(circ, "x1", 0.0),
                    r0=_float(circ, "r0", _float(circ, "r1", 0.0)),
                    x0=_float(circ, "x0", _float(circ, "x1", 0.0)))

    linecodes = {}
    for lc in raw.of_kind("linecode"):
        n = int(_float(lc, "nphases", 3))
        zpm = _impedance_per_m(lc, n)
        if zpm is None:
            raise ParseError(lc.file, lc.line, f"linecode {lc.name!r} defines no impedance")
        linecodes[lc.name] = (n, zpm)

    lines = []
    for el in raw.of_kind("line"):
        f, ln = el.file, el.line
        if el.get("bus1") is None or el.get("bus2") is None:
            raise ParseError(f, ln, f"line {el.name!r} needs bus1 and bus2")
        b1, p1 = _split_bus(el.get("bus1"), *el.where("bus1"))
        b2, p2 = _split_bus(el.get("bus2"), *el.where("bus2"))
        code = el.get("linecode")
        if code is not None:
            code = code.lower()
            if code not in linecodes:
                raise LinkError(f"{f}:{ln}: line {el.name!r} references undefined "
                                f"linecode {code!r}")
            n_default = linecodes[code][0]
        else:
            n_default = 3
        n = int(_float(el, "phases", len(p1) if p1 else n_default))
        p1 = p1 or tuple(range(1, n + 1))
        p2 = p2 or tuple(range(1, n + 1))
        if p1 != p2:
            raise ParseError(f, ln, f"line {el.name!r}: bus1/bus2 phase lists differ "
                                    f"({p1} vs {p2})")
        if len(p1) != n:
            raise ParseError(f, ln, f"line {el.name!r}: {len(p1)} phases on bus but phases={n}")
        unit = (el.get("units") or "m").lower()
        if unit not in UNIT_TO_M:
            raise ParseError(*el.where("units"), f"unknown length unit {unit!r}")
        length_m = _float(el, "length", 1.0) * UNIT_TO_M[unit]
        zpm = _impedance_per_m(el, n)
        if zpm is None:
            if code is None:
                raise LinkError(f"{f}:{ln}: line {el.name!r} has no linecode or matrices")
            lc_n, zpm = linecodes[code]
            if lc_n != n:
                raise LinkError(f"{f}:{ln}: line {el.name!r} has {n} phases but linecode "
                                f"{code!r} has {lc_n}")
        touch(b1, p1)
        touch(b2, p2)
        lines.append(LineBranch(el.name, b1, b2, p1, zpm * length_m, length_m, code))

    regs = {}
    for rc in raw.of_kind("regcontrol"):
        tr_name = (rc.get("transformer") or "").lower()
        if not tr_name:
            raise ParseError(rc.file, rc.line, f"regcontrol {rc.name!r} names no transformer")
        if int(_float(rc, "winding", 2)) != 2:
            raise ParseError(*rc.where("winding"), "only winding 2 regulation is supported")
        if tr_name in regs:
            raise ParseError(rc.file, rc.line, f"transformer {tr_name!r} regulated twice")
        regs[tr_name] = rc

    transformers = []
    tr_names = set()
    for el in raw.of_kind("transformer"):
        tr = _build_transformer(el, regs.get(el.name))
        tr_names.add(el.name)
        touch(tr.hv_bus, (1, 2, 3))
        touch(tr.lv_bus, (1, 2, 3))
        transformers.append(tr)
    for name, rc in regs.items():
        if name not in tr_names:
            raise LinkError(f"{rc.file}:{rc.line}: regcontrol {rc.name!r} references "
                            f"undefined transformer {name!r}")

    loads = []
    for el in raw.of_kind("load"):
        f, ln = el.file, el.line
        if el.get("bus1") is None:
            raise ParseError(f, ln, f"load {el.name!r} needs bus1")
        conn = (el.get("conn") or "wye").lower()
        if conn not in ("wye", "y", "ln"):
            raise ParseError(*el.where("conn"), f"load {el.name!r}: only wye loads supported")
        if int(_float(el, "model", 1)) != 1:
            raise ParseError(*el.where("model"), f"load {el.name!r}: only model=1 "
                                                 f"(constant power) supported")
        bus, ph = _split_bus(el.get("bus1"), *el.where("bus1"))
        n = int(_float(el, "phases", len(ph) if ph else 3))
        ph = ph or tuple(range(1, n + 1))
        if len(ph) != n or n not in (1, 3):
            raise ParseError(f, ln, f"load {el.name!r}: must be 1- or 3-phase")
        pf = _float(el, "pf", 1.0)
        if not 0 < pf <= 1:
            raise ParseError(*el.where("pf"), f"load {el.name!r}: pf must be in (0, 1]")
        kw = _float(el, "kw", 0.0)
        if kw < 0:
            raise ParseError(*el.where("kw"), f"load {el.name!r}: negative kW")
        if bus not in phases:
            raise LinkError(f"{f}:{ln}: load {el.name!r} on unconnected bus {bus!r}")
        missing = set(ph) - phases[bus]
        if missing:
            raise LinkError(f"{f}:{ln}: load {el.name!r} uses phases {sorted(missing)} "
                            f"absent at bus {bus!r}")
        loads.append(LoadPoint(el.name, bus, ph, kw, pf, el.get("kv") and _float(el, "kv")))

    buses = tuple(Bus(b, tuple(sorted(phases[b]))) for b in order)
    return NetworkModel(circ.name, buses, tuple(lines), tuple(transformers), tuple(loads),
                        source, base_frequency=freq)


def _build_transformer(el: Element, reg: Optional[Element]) -> TransformerBranch:
    f, ln = el.file, el.line
    if int(_float(el, "phases", 3)) != 3:
        raise ParseError(f, ln, f"transformer {el.name!r}: only three-phase units supported")
    if int(_float(el, "windings", 2)) != 2:
        raise ParseError(f, ln, f"transformer {el.name!r}: only two windings supported")
    wd = {k: [None, None] for k in ("bus", "conn", "kv", "kva", "%r", "tap")}
    arrays = {"buses": "bus", "conns": "conn", "kvs": "kv", "kvas": "kva", "%rs": "%r",
              "taps": "tap"}
    active = 0
    for key, value, pf, pl in el.props:
        if key == "wdg":
            active = int(float(value)) - 1
            if active not in (0, 1):
                raise ParseError(pf, pl, f"transformer {el.name!r}: winding {value} invalid")
        elif key in arrays:
            vals = [t for t in re.split(r"[\s,]+", value.strip()) if t]
            if len(vals) != 2:
                raise ParseError(pf, pl, f"transformer {el.name!r}: {key} needs 2 values")
            wd[arrays[key]] = vals
        elif key in wd:
            wd[key][active] = value
    for key in ("%noloadloss", "%imag"):
        if _float(el, key, 0.0) != 0.0:
            raise ParseError(*el.where(key), f"transformer {el.name!r}: {key} must be 0 "
                                             f"(lossless core)")
    if None in wd["bus"]:
        raise ParseError(f, ln, f"transformer {el.name!r}: both winding buses required")
    hv, p_hv = _split_bus(wd["bus"][0], f, ln)
    lv, p_lv = _split_bus(wd["bus"][1], f, ln)
    for p in (p_hv, p_lv):
        if p is not None and p != (1, 2, 3):
            raise ParseError(f, ln, f"transformer {el.name!r}: windings must use phases 1.2.3")
    conns = []
    for c in wd["conn"]:
        c = (c or "wye").lower()
        if c in ("wye", "y", "ln"):
            conns.append("wye")
        elif c in ("delta", "d", "ll"):
            conns.append("delta")
        else:
            raise ParseError(f, ln, f"transformer {el.name!r}: unknown connection {c!r}")
    try:
        kvs = [float(x) for x in wd["kv"]]
        kvas = [float(x) if x is not None else None for x in wd["kva"]]
        rs = [float(x) if x is not None else None for x in wd["%r"]]
        taps = [float(x) if x is not None else 1.0 for x in wd["tap"]]
    except (TypeError, ValueError):
        raise ParseError(f, ln, f"transformer {el.name!r}: bad winding data") from None
    rating = kvas[0] or kvas[1]
    if rating is None:
        raise ParseError(f, ln, f"transformer {el.name!r}: kva required")
    if rs[0] is None and rs[1] is None:
        r_total = _float(el, "%loadloss", 0.0)
    else:
        r_total = (rs[0] or 0.0) + (rs[1] or 0.0)
    xhl = _float(el, "xhl", 7.0)
    tap = taps[1] / taps[0]
    kwargs = dict(tap_min=_float(el, "mintap", 0.9), tap_max=_float(el, "maxtap", 1.1),
                  tap_steps=int(_float(el, "numtaps", 32)))
    if reg is not None:
        vw = kvs[1] * 1000.0 / (1.0 if conns[1] == "delta" else math.sqrt(3.0))
        pt = _float(reg, "ptratio", 60.0)
        target = reg.get("bus")
        kwargs.update(regulated=True, setpoint_pu=_float(reg, "vreg", 120.0) * pt / vw,
                      band_pu=_float(reg, "band", 3.0) / 2.0 * pt / vw,
                      target_bus=_split_bus(target, reg.file, reg.line)[0] if target else None)
    return TransformerBranch(el.name, hv, lv, conns[0], conns[1], kvs[0], kvs[1], rating,
                             complex(r_total / 100.0, xhl / 100.0), tap=tap, **kwargs)


def _num(x: float) -> str:
    return repr(float(x))


def _matrix_text(m: np.ndarray) -> str:
    n = m.shape[0]
    return "[" + " | ".join(" ".join(_num(m[i, j]) for j in range(i + 1)) for i in range(n)) + "]"


def _bus_ref(bus: str, phases) -> str:
    return bus + "".join(f".{p}" for p in phases)


def render_circuit(model: NetworkModel) -> dict[str, str]:
    """File name -> text for a model, master first."""
    src = model.source
    master = [f"Clear",
              f"New Circuit.{model.name} bus1={_bus_ref(src.bus, src.phases)} "
              f"basekv={_num(src.base_kv)} pu={_num(src.pu)} angle={_num(src.angle_deg)} "
              f"phases={len(src.phases)} basefreq={_num(model.base_frequency)}"]
    if src.has_impedance:
        master.append(f"~ r1={_num(src.r1)} x1={_num(src.x1)} r0={_num(src.r0)} "
                      f"x0={_num(src.x0)}")
    files = {"master.dss": None}
    lines = []
    for ln in model.lines:
        zpm = ln.z / ln.length
        lines.append(
            f"New Line.{ln.id} bus1={_bus_ref(ln.from_bus, ln.phases)} "
            f"bus2={_bus_ref(ln.to_bus, ln.phases)} phases={len(ln.phases)} "
            f"length={_num(ln.length)} units=m\n"
            f"~ rmatrix={_matrix_text(zpm.real)}\n~ xmatrix={_matrix_text(zpm.imag)}")
    trs, regs = [], []
    for tr in model.transformers:
        r_half = tr.z_pu.real * 50.0
        trs.append(
            f"New Transformer.{tr.id} phases=3 windings=2 buses=[{tr.hv_bus} {tr.lv_bus}] "
            f"conns=[{tr.conn_hv} {tr.conn_lv}]\n"
            f"~ kvs=[{_num(tr.kv_hv)} {_num(tr.kv_lv)}] "
            f"kvas=[{_num(tr.rating_kva)} {_num(tr.rating_kva)}] "
            f"%rs=[{_num(r_half)} {_num(r_half)}] xhl={_num(tr.z_pu.imag * 100.0)}\n"
            f"~ taps=[1.0 {_num(tr.tap)}] mintap={_num(tr.tap_min)} "
            f"maxtap={_num(tr.tap_max)} numtaps={tr.tap_steps}")
        if tr.regulated:
            vw = tr.kv_lv * 1000.0 / (1.0 if tr.conn_lv == "delta" else math.sqrt(3.0))
            pt = vw / 120.0
            bus = f" bus={tr.target_bus}" if tr.target_bus else ""
            regs.append(f"New RegControl.{tr.id} transformer={tr.id} winding=2 "
                        f"vreg={_num(tr.setpoint_pu * 120.0)} "
                        f"band={_num(2.0 * tr.band_pu * 120.0)} ptratio={_num(pt)}{bus}")
    loads = []
    for ld in model.loads:
        kv = f" kv={_num(ld.kv)}" if ld.kv is not None else ""
        loads.append(f"New Load.{ld.id} bus1={_bus_ref(ld.bus, ld.phases)} "
                     f"phases={len(ld.phases)} kw={_num(ld.kw)} pf={_num(ld.pf)} "
                     f"model=1{kv}")
    for fname, body in (("lines.dss", lines), ("transformers.dss", trs + regs),
                        ("loads.dss", loads)):
        if body:
            files[fname] = "\n".join(body) + "\n"
            master.append(f"Redirect {fname}")
    files["master.dss"] = "\n".join(master) + "\n"
    return files


def write_circuit(model: NetworkModel, out_dir) -> list[Path]:
    """Write ``model`` as master.dss plus included files; returns paths written.

    On any I/O failure the files already written are removed and the error
    is re-raised.
    """
    out = Path(out_dir)
    texts = render_circuit(model)
    written: list[Path] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, text in texts.items():
            path = out / name
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                written.append(path)
                fh.write(text)
    except OSError:
        for path in written:
            try:
                os.remove(path)
            except OSError:
                pass
        raise
    return written


def models_equivalent(a: NetworkModel, b: NetworkModel, rtol: float = 1e-12) -> bool:
    """Structural equality with relative tolerance on numeric fields."""
    def close(x, y):
        return np.allclose(x, y, rtol=rtol, atol=0.0)

    if ({(x.id, x.phases) for x in a.buses} != {(x.id, x.phases) for x in b.buses}
            or a.source.bus != b.source.bus or a.source.phases != b.source.phases
            or not close([a.source.base_kv, a.source.pu, a.source.angle_deg],
                         [b.source.base_kv, b.source.pu, b.source.angle_deg])):
        return False
    la, lb = {x.id: x for x in a.lines}, {x.id: x for x in b.lines}
    if la.keys() != lb.keys():
        return False
    for k, x in la.items():
        y = lb[k]
        if ((x.from_bus, x.to_bus, x.phases) != (y.from_bus, y.to_bus, y.phases)
                or not close(x.z, y.z) or not close(x.length, y.length)):
            return False
    ta, tb = {x.id: x for x in a.transformers}, {x.id: x for x in b.transformers}
    if ta.keys() != tb.keys():
        return False
    for k, x in ta.items():
        y = tb[k]
        if ((x.hv_bus, x.lv_bus, x.conn_hv, x.conn_lv, x.regulated, x.tap_steps,
             x.target_bus) != (y.hv_bus, y.lv_bus, y.conn_hv, y.conn_lv, y.regulated,
                               y.tap_steps, y.target_bus)):
            return False
        nums = lambda t: [t.kv_hv, t.kv_lv, t.rating_kva, t.z_pu.real, t.z_pu.imag, t.tap,
                          t.tap_min, t.tap_max, t.setpoint_pu, t.band_pu]
        if not close(nums(x), nums(y)):
            return False
    da, db = {x.id: x for x in a.loads}, {x.id: x for x in b.loads}
    if da.keys() != db.keys():
        return False
    return all((x.bus, x.phases) == (db[k].bus, db[k].phases)
               and close([x.kw, x.pf], [db[k].kw, db[k].pf]) for k, x in da.items())
