"""``mvlv`` command line.

Exit codes: 0 success, 1 domain error (JSON payload on stderr), 2 usage error.
Data goes to files or stdout, logs to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import dss_io, netmodel, pflow, reduce, report, scenario, synth
from .errors import MvlvError

log = logging.getLogger("mvlv")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=str)


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _opts(args) -> pflow.SolveOptions:
    return pflow.SolveOptions(tolerance=args.tolerance, max_iterations=args.max_iterations)


def _demand(args, model):
    if args.kw_per_load is not None:
        return report.uniform_scenario(model, args.kw_per_load)
    kw = {"high": report.HIGH_KW, "low": report.LOW_KW}[args.demand.lower()]
    return report.uniform_scenario(model, kw, label=args.demand.capitalize())


def _round(x: Optional[float]):
    return None if x is None else float(pflow.fmt(x))


def cmd_parse(args) -> int:
    model = dss_io.parse_circuit(args.circuit)
    topo = netmodel.topology_report(model)
    summary = {"name": model.name, "node_count": model.node_count, "buses": len(model.buses),
               "lines": len(model.lines), "transformers": len(model.transformers),
               "loads": len(model.loads), "is_radial": topo["is_radial"],
               "islands": topo["islands"]}
    if args.json:
        print(_dump(summary))
    else:
        for k, v in summary.items():
            print(f"{k}: {v}")
    return 0


def cmd_reduce(args) -> int:
    model = dss_io.parse_circuit(args.circuit)
    spliced, slog = reduce.splice(model)
    out = _out_dir(args.output)
    dss_io.write_circuit(spliced, out)
    result = {"nodes_before": slog.nodes_before, "nodes_after": slog.nodes_after,
              "buses_removed": len(slog.entries)}
    if args.certify:
        demand = report.uniform_scenario(model, args.kw_per_load)
        result.update(reduce.certify(model, spliced, demand).to_dict())
    text = _dump(result)
    (out / "reduction.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_synthesize(args) -> int:
    mv = dss_io.parse_circuit(args.mv)
    catalog = synth.load_lv_catalog(args.lv_catalog, do_splice=not args.no_splice)
    plan = synth.allocate(mv, catalog, seed=args.seed, sigma=args.sigma,
                          rating_basis=args.rating_basis)
    hybrid = synth.assemble(mv, plan, catalog, n_primary=args.n_primary,
                            primary_kv=args.primary_kv, source_pu=args.source_pu)
    out = _out_dir(args.output)
    dss_io.write_circuit(hybrid, out)
    (out / "allocation.json").write_text(plan.to_json() + "\n")
    topo = netmodel.topology_report(hybrid)
    print(_dump({"node_count": hybrid.node_count, "loads": len(hybrid.loads),
                 "lv_circuits": len(plan.entries), "is_radial": topo["is_radial"],
                 "output": str(out)}))
    return 0


def _solution_summary(sol: pflow.PowerFlowSolution) -> dict:
    s = pflow.substation_power(sol)
    return {"converged": sol.converged, "iterations": sol.iterations,
            "node_count": len(sol.node_bus), "label": sol.label,
            "v_min_pu": _round(float(sol.v_pu.min())), "v_max_pu": _round(float(sol.v_pu.max())),
            "loss_kw": _round(sol.loss_kw), "substation_mw": _round(s.real),
            "substation_mvar": _round(s.imag), "taps": {k: _round(v) for k, v in sol.taps.items()},
            "band_unmet": list(sol.band_unmet),
            "power_balance_pu": _round(pflow.power_balance_pu(sol))}


def _solve(args):
    model = dss_io.parse_circuit(args.circuit)
    model = netmodel.assign_bases(model)
    demand = _demand(args, model)
    if args.no_controls:
        return pflow.solve(model, demand, _opts(args))
    return pflow.solve_with_controls(model, demand, _opts(args))


def cmd_solve(args) -> int:
    sol = _solve(args)
    if args.report:
        path = Path(args.report)
        path.parent.mkdir(parents=True, exist_ok=True)
        pflow.write_voltage_csv(sol, path)
    if args.load_report:
        path = Path(args.load_report)
        path.parent.mkdir(parents=True, exist_ok=True)
        pflow.write_load_voltage_csv(sol, path)
    summary = _solution_summary(sol)
    summary["violations"] = len(report.statutory_check(sol))
    print(_dump(summary))
    return 0


def cmd_report(args) -> int:
    sol = _solve(args)
    out = _out_dir(args.output)
    stats = report.voltage_stats(sol, args.group_by)
    viol = report.statutory_check(sol)
    emer = report.emergency_check(sol)
    if args.format == "json":
        payload = {"summary": _solution_summary(sol),
                   "stats": [{k: (_round(v) if isinstance(v, float) else v)
                              for k, v in vars(s).items()} for s in stats],
                   "violations": [{"bus_id": v.bus, "phase": netmodel.PHASE_NAMES[v.phase],
                                   "v_pu": _round(v.v_pu), "zone": v.zone,
                                   "bound_violated": v.bound} for v in viol],
                   "emergency_violations": len(emer)}
        (out / "report.json").write_text(_dump(payload) + "\n")
    else:
        pflow.write_voltage_csv(sol, out / "voltages.csv")
        report.write_stats_csv(stats, out / "stats.csv")
        report.write_violations_csv(viol, out / "violations.csv")
    print(_dump({"violations": len(viol), "emergency_violations": len(emer),
                 "groups": len(stats), "output": str(out)}))
    return 0


def cmd_scenario(args) -> int:
    model = netmodel.assign_bases(dss_io.parse_circuit(args.circuit))
    if args.type == "peer2peer":
        if not (args.exporting and args.importing):
            raise _Usage("peer2peer needs --exporting and --importing")
        sc = scenario.peer2peer(model, args.exporting, args.importing, args.n_pairs, args.kw,
                                seed=args.seed)
    else:
        sc = scenario.flex_uptake(model, args.fraction, args.delta_kw, seed=args.seed)
    out = _out_dir(args.output)
    (out / "scenario.json").write_text(sc.to_json() + "\n")
    result = scenario.run(sc, model, _opts(args))
    scenario.write_results(result, out)
    summary = dict(result.summary)
    for k in ("worst_violation_pu", "worst_emergency_pu", "added_kw"):
        summary[k] = _round(summary[k])
    (out / "summary.json").write_text(_dump(summary) + "\n")
    print(_dump(summary))
    return 0


def _read_model_sample(path, zone: Optional[str]) -> list[float]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if "v_pu" not in (reader.fieldnames or ()):
            raise MvlvError(f"{path}: expected a voltage dump with a v_pu column")
        return [float(row["v_pu"]) for row in reader
                if not zone or row.get("zone") == zone]


def cmd_qq(args) -> int:
    model_sample = _read_model_sample(args.model, args.zone)
    measured = report.read_measurements(args.measured, args.nominal_volts)
    probs = [round((i + 1) / (args.points + 1), 12) for i in range(args.points)]
    pairs = report.qq(model_sample, measured.values, probs)
    if args.output:
        report.write_qq_csv(probs, pairs, args.output)
    else:
        w = sys.stdout
        w.write(",".join(report.QQ_COLUMNS) + "\n")
        for p, (a, b) in zip(probs, pairs):
            w.write(f"{pflow.fmt(p)},{pflow.fmt(a)},{pflow.fmt(b)}\n")
    if measured.rejected:
        log.warning("%d measurement rows rejected", measured.rejected)
    return 0


class _Usage(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _Usage(message)


def _solver_flags(p):
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("--max-iterations", type=int, default=100)


def _demand_flags(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--kw-per-load", type=float)
    g.add_argument("--demand", choices=("High", "Low", "high", "low"), default="High")
    p.add_argument("--no-controls", action="store_true", help="keep taps fixed")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mvlv", description="Integrated MV-LV distribution network toolkit")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("parse", help="parse a circuit and print a summary")
    p.add_argument("circuit")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("reduce", help="splice pass-through buses")
    p.add_argument("circuit")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--certify", action="store_true")
    p.add_argument("--kw-per-load", type=float, default=report.HIGH_KW)
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("synthesize", help="attach LV circuits to an MV model")
    p.add_argument("--mv", required=True)
    p.add_argument("--lv-catalog", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--sigma", type=float, default=synth.DEFAULT_SIGMA)
    p.add_argument("--rating-basis", choices=("admd", "customers"), default="admd")
    p.add_argument("--n-primary", type=int, default=2)
    p.add_argument("--primary-kv", type=float, default=33.0)
    p.add_argument("--source-pu", type=float, default=1.0)
    p.add_argument("--no-splice", action="store_true")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("solve", help="run a power flow")
    p.add_argument("circuit")
    _demand_flags(p)
    _solver_flags(p)
    p.add_argument("--report", help="write the per-node voltage CSV here")
    p.add_argument("--load-report", help="write one voltage per load point here (for qq)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("report", help="voltage statistics and statutory violations")
    p.add_argument("circuit")
    _demand_flags(p)
    _solver_flags(p)
    p.add_argument("--group-by", choices=("lv_circuit_id", "mv_feeder_id"),
                   default="lv_circuit_id")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("scenario", help="flexibility case studies")
    p.add_argument("circuit")
    p.add_argument("--type", choices=("peer2peer", "flex_uptake"), required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--exporting")
    p.add_argument("--importing")
    p.add_argument("--n-pairs", type=int, default=15)
    p.add_argument("--kw", type=float, default=3.0)
    p.add_argument("--fraction", type=float, default=0.13)
    p.add_argument("--delta-kw", type=float, default=3.0)
    _solver_flags(p)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("qq", help="quantile pairs of modelled vs measured voltages")
    p.add_argument("--model", required=True,
                   help="voltage CSV from solve --load-report (or --report, every node)")
    p.add_argument("--measured", required=True)
    p.add_argument("--zone", choices=("MV", "LV"), default="LV")
    p.add_argument("--nominal-volts", type=float, default=report.NOMINAL_LV_VOLTS)
    p.add_argument("--points", type=int, default=99)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_qq)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _Usage as exc:
        parser.print_usage(sys.stderr)
        print(f"mvlv: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _Usage as exc:
        print(f"mvlv: error: {exc}", file=sys.stderr)
        return 2
    except MvlvError as exc:
        print(json.dumps(exc.to_dict(), default=str), file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
