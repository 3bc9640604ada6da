"""Command-line entry point: scenario files in, CSV and JSON artifacts out.

Exit codes: 0 on success, 1 on numerical failure (collapse, infeasible load
flow, no equilibrium), 2 on configuration errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .analysis import check_condition, find_equilibrium, zi_equilibrium
from .controllers import CONTROLLERS, ControllerParams
from .errors import ConfigError, EquilibriumError, NetworkError, NumericalError
from .loadmodel import ZipLoadBank
from .lyapunov import LyapunovContext, decrease_audit
from .netmodel import MicrogridNetwork, build_laplacian, comm_laplacian
from .simulator import (
    IntegratorSettings,
    LoadEvent,
    LoadSchedule,
    Scenario,
    Trajectory,
    read_csv,
    sharing_residual,
    simulate,
    steady_state_check,
    write_csv,
)

log = logging.getLogger(__name__)

_NODE_ID = {"type": ["string", "integer"]}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONPOS = {"type": "number", "maximum": 0}
_NONNEG = {"type": "number", "minimum": 0}


def _arr(item, min_items=0):
    return {"type": "array", "items": item, "minItems": min_items}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


SCENARIO_SCHEMA = _obj(
    {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "t_end_s": _POS,
        "mode": {"enum": ["dae", "capacitive"]},
        "Cl_F": _arr(_POS),
        "network": _obj(
            {
                "nodes": _obj({"sources": _arr(_NODE_ID, 1), "loads": _arr(_NODE_ID)},
                              ["sources", "loads"]),
                "lines": _arr(_obj({"from": _NODE_ID, "to": _NODE_ID, "conductance_S": _POS},
                                   ["from", "to", "conductance_S"])),
                "comm_edges": _arr({"type": "array", "items": _NODE_ID, "minItems": 2, "maxItems": 2}),
            },
            ["nodes", "lines", "comm_edges"],
        ),
        "sources": _obj({"C": _arr(_POS, 1), "controller": {"enum": list(CONTROLLERS)},
                         "D": _arr(_POS, 1)}, ["C"]),
        "loads": _obj({"Istar_A": _arr(_NONPOS), "Ystar_S": _arr(_NONNEG), "Pstar_W": _arr(_NONPOS)},
                      ["Istar_A", "Ystar_S", "Pstar_W"]),
        "initial": _obj({"Vs": _arr(_POS, 1), "Vl": _arr(_POS), "p_A": _arr({"type": "number"})},
                        ["Vs", "Vl"]),
        "events": _arr(_obj(
            {"load": _NODE_ID, "t_start_s": _NONNEG, "t_end_s": _NONNEG,
             "Istar_A": _NONPOS, "Ystar_S": _NONNEG, "Pstar_W": _NONPOS},
            ["load", "t_start_s", "t_end_s"],
        )),
        "integrator": _obj({
            "method": {"enum": ["rk4_fixed", "rk45_adaptive"]},
            "dt_s": _POS, "rtol": _POS, "atol_V": _POS, "voltage_floor_V": _NONNEG,
            "newton_tol_A": _POS, "max_newton_iter": {"type": "integer", "minimum": 1},
            "first_step_s": _POS, "max_step_s": _POS,
        }),
        "outputs": _obj({"csv_path": {"type": "string"}, "sample_interval_s": _POS,
                         "summary_path": {"type": "string"}, "steady_window_s": _POS}),
    },
    ["t_end_s", "network", "sources", "loads", "initial"],
)


@dataclass
class ScenarioConfig:
    """A validated scenario plus the bookkeeping the CLI needs around it."""

    scenario: Scenario
    source_ids: list
    load_ids: list
    outputs: dict = field(default_factory=dict)
    path: Optional[Path] = None

    @property
    def name(self) -> str:
        return self.scenario.name


def _pointer(parts) -> str:
    return "/" + "/".join(str(p) for p in parts) if parts else "/"


def _schema_error(doc) -> Optional[ConfigError]:
    validator = jsonschema.Draft7Validator(SCENARIO_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if not errors:
        return None
    err = errors[0]
    path = list(err.absolute_path)
    if err.validator == "additionalProperties" and isinstance(err.instance, dict):
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        if extra:
            return ConfigError(f"unknown key {extra[0]!r}", _pointer(path + [extra[0]]))
    return ConfigError(err.message, _pointer(path))


def scenario_from_dict(doc: dict, controller_override: Optional[str] = None) -> ScenarioConfig:
    """Validate a parsed scenario document and build the :class:`Scenario`.

    Raises
    ------
    ConfigError
        Schema violations and inconsistent sizes or references; ``pointer``
        locates the offending key.
    """
    err = _schema_error(doc)
    if err is not None:
        raise err
    net_doc = doc["network"]
    src_ids = list(net_doc["nodes"]["sources"])
    load_ids = list(net_doc["nodes"]["loads"])
    index: dict = {}
    for k, nid in enumerate(src_ids + load_ids):
        if nid in index:
            raise ConfigError(f"duplicate node id {nid!r}", "/network/nodes")
        index[nid] = k
    ns, nl = len(src_ids), len(load_ids)

    def node(nid, ptr):
        if nid not in index:
            raise ConfigError(f"unknown node id {nid!r}", ptr)
        return index[nid]

    edges = [
        (node(ln["from"], f"/network/lines/{k}/from"), node(ln["to"], f"/network/lines/{k}/to"),
         float(ln["conductance_S"]))
        for k, ln in enumerate(net_doc["lines"])
    ]
    comm = []
    for k, (a, b) in enumerate(net_doc["comm_edges"]):
        ia, ib = node(a, f"/network/comm_edges/{k}/0"), node(b, f"/network/comm_edges/{k}/1")
        if ia >= ns or ib >= ns:
            raise ConfigError("communication edges must join two sources", f"/network/comm_edges/{k}")
        comm.append((ia, ib))
    try:
        network = MicrogridNetwork(ns, nl, tuple(edges), tuple(comm))
    except NetworkError as exc:
        raise ConfigError(str(exc), "/network") from exc

    def sized(ptr, values, n):
        if len(values) != n:
            raise ConfigError(f"expected {n} entries, got {len(values)}", ptr)
        return np.array(values, dtype=float)

    src = doc["sources"]
    C = sized("/sources/C", src["C"], ns)
    D = sized("/sources/D", src["D"], ns) if "D" in src else None
    controller = controller_override or src.get("controller", "consensus")
    if controller not in CONTROLLERS:
        raise ConfigError(f"unknown controller {controller!r}", "/sources/controller")
    if controller == "dapi" and D is None:
        raise ConfigError("the dapi controller needs integral weights D", "/sources/D")
    params = ControllerParams(C, comm_laplacian(network), D)

    ld = doc["loads"]
    bank = ZipLoadBank(*(sized(f"/loads/{key}", ld[key], nl) for key in ("Istar_A", "Ystar_S", "Pstar_W")))
    init = doc["initial"]
    Vs0 = sized("/initial/Vs", init["Vs"], ns)
    Vl0 = sized("/initial/Vl", init["Vl"], nl)
    p0 = sized("/initial/p_A", init["p_A"], ns) if "p_A" in init else None

    events = []
    for k, ev in enumerate(doc.get("events", [])):
        i = node(ev["load"], f"/events/{k}/load") - ns
        if i < 0:
            raise ConfigError("events must target a load", f"/events/{k}/load")
        try:
            events.append(LoadEvent(i, ev["t_start_s"], ev["t_end_s"], ev.get("Istar_A"),
                                    ev.get("Ystar_S"), ev.get("Pstar_W")))
        except ValueError as exc:
            raise ConfigError(str(exc), f"/events/{k}") from exc

    keys = {"method": "method", "dt_s": "dt", "rtol": "rtol", "atol_V": "atol",
            "voltage_floor_V": "voltage_floor", "newton_tol_A": "newton_tol",
            "max_newton_iter": "max_newton_iter", "first_step_s": "first_step", "max_step_s": "max_step"}
    integ = IntegratorSettings(**{keys[k]: v for k, v in doc.get("integrator", {}).items()})

    mode = doc.get("mode", "dae")
    Cl = sized("/Cl_F", doc["Cl_F"], nl) if "Cl_F" in doc else None
    outputs = dict(doc.get("outputs", {}))
    try:
        scenario = Scenario(
            network=network, loads=bank, params=params, initial_Vs=Vs0, initial_Vl=Vl0,
            t_end=float(doc["t_end_s"]), controller=controller, events=tuple(events),
            integrator=integ, mode=mode, Cl=Cl, initial_p=p0,
            sample_interval=outputs.get("sample_interval_s"), name=doc.get("name", "scenario"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc), "/") from exc
    return ScenarioConfig(scenario, src_ids, load_ids, outputs)


def load_scenario(path, controller_override: Optional[str] = None) -> ScenarioConfig:
    """Read and validate a scenario JSON file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    cfg = scenario_from_dict(doc, controller_override)
    cfg.path = path
    return cfg


def bundled_scenarios() -> dict:
    """Map of bundled scenario names to their file paths."""
    root = resources.files(__package__) / "scenarios"
    return {Path(str(p)).stem: Path(str(p)) for p in root.iterdir() if str(p).endswith(".json")}


def resolve_scenario_path(arg: str) -> Path:
    """Accept a file path or the bare name of a bundled scenario."""
    p = Path(arg)
    if p.exists():
        return p
    bundled = bundled_scenarios()
    if arg in bundled:
        return bundled[arg]
    raise ConfigError(f"no such file or bundled scenario: {arg}")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer, np.bool_)):
        return obj.item()
    return obj


def _emit(report: dict, path: Optional[Path] = None) -> None:
    text = json.dumps(_jsonable(report), indent=2)
    if path is not None:
        path.write_text(text + "\n")
    print(text)


def _out_dir(args) -> Path:
    d = Path(args.output_dir) if args.output_dir else Path.cwd()
    d.mkdir(parents=True, exist_ok=True)
    return d


def _last_event_end(sc: Scenario) -> float:
    return max((ev.t_end for ev in sc.events), default=0.0)


def _steady_window(cfg: ScenarioConfig) -> float:
    sc = cfg.scenario
    if "steady_window_s" in cfg.outputs:
        return float(cfg.outputs["steady_window_s"])
    return 0.1 * (sc.t_end - _last_event_end(sc))


def run_summary(cfg: ScenarioConfig, traj: Trajectory) -> dict:
    """Steady-state report and terminal values for one simulated trajectory."""
    report = steady_state_check(traj, _steady_window(cfg))
    ratios = traj.Ps[-1] / traj.C
    mean = float(np.mean(ratios))
    return {
        "name": cfg.name,
        "controller": traj.controller,
        "mode": traj.mode,
        "stats": traj.stats,
        "steady_state": report.as_dict(),
        "final": {
            "t": traj.t[-1],
            "Vs": dict(zip(map(str, cfg.source_ids), traj.Vs[-1])),
            "Vl": dict(zip(map(str, cfg.load_ids), traj.Vl[-1])),
            "Ps": dict(zip(map(str, cfg.source_ids), traj.Ps[-1])),
            "total_source_power_W": float(traj.Ps[-1].sum()),
            "sharing_residual_relative": sharing_residual(traj.Ps[-1], traj.C) / abs(mean) if mean else None,
        },
        "geomean_log_drift": float(np.max(np.abs(traj.geomean_log - traj.geomean_log[0]))),
    }


def cmd_simulate(args) -> int:
    cfg = load_scenario(resolve_scenario_path(args.scenario), args.controller_override)
    out = _out_dir(args)
    traj = simulate(cfg.scenario)
    csv_path = out / cfg.outputs.get("csv_path", f"{cfg.name}.csv")
    write_csv(traj, csv_path)
    summary = run_summary(cfg, traj)
    summary["csv_path"] = str(csv_path)
    _emit(summary, out / cfg.outputs.get("summary_path", f"{cfg.name}_summary.json"))
    return 0


def _equilibrium(cfg: ScenarioConfig, geomean: Optional[float]):
    sc = cfg.scenario
    blocks = build_laplacian(sc.network)
    bank = LoadSchedule(sc.loads, sc.events).final()
    C = sc.params.C
    target = float(C @ np.log(sc.initial_Vs)) if geomean is None else float(geomean)
    eq = find_equilibrium(blocks, bank, C, target, voltage_floor=sc.integrator.voltage_floor)
    return blocks, bank, target, eq


def cmd_equilibrium(args) -> int:
    cfg = load_scenario(resolve_scenario_path(args.scenario), args.controller_override)
    try:
        blocks, bank, target, eq = _equilibrium(cfg, args.geomean)
    except EquilibriumError as exc:
        _emit({"name": cfg.name, "error": str(exc), "residual_history": exc.history})
        return 1
    report = {"name": cfg.name, "geomean_log_target": target, **eq.as_dict()}
    if bank.is_zi:
        zi = zi_equilibrium(blocks, bank, cfg.scenario.params.C, target, eq.Vbar_s)
        report["zi_closed_form"] = {
            "Vbar_s": zi.Vbar_s, "Vbar_l": zi.Vbar_l,
            "max_abs_difference": float(max(np.max(np.abs(zi.Vbar_s - eq.Vbar_s)),
                                            np.max(np.abs(zi.Vbar_l - eq.Vbar_l), initial=0.0))),
        }
    _emit(report, _out_dir(args) / f"{cfg.name}_equilibrium.json" if args.output_dir else None)
    return 0


def cmd_check(args) -> int:
    cfg = load_scenario(resolve_scenario_path(args.scenario), args.controller_override)
    try:
        blocks, bank, target, eq = _equilibrium(cfg, args.geomean)
    except EquilibriumError as exc:
        _emit({"name": cfg.name, "error": str(exc), "residual_history": exc.history})
        return 1
    cond = check_condition(blocks, bank, cfg.scenario.params.C, eq.Vbar_s, eq.Vbar_l)
    report = {"name": cfg.name, "geomean_log_target": target, **cond.as_dict(),
              "Vbar_s": eq.Vbar_s, "Vbar_l": eq.Vbar_l}
    _emit(report, _out_dir(args) / f"{cfg.name}_check.json" if args.output_dir else None)
    return 0


def audit_trajectory(cfg: ScenarioConfig, traj: Trajectory, t_min: Optional[float] = None) -> dict:
    """Energy decrease audit from ``t_min`` (default: end of the last event) onward."""
    sc = cfg.scenario
    blocks = build_laplacian(sc.network)
    bank = LoadSchedule(sc.loads, sc.events).final()
    C = sc.params.C
    eq = find_equilibrium(blocks, bank, C, float(traj.geomean_log[-1]), (traj.Vs[-1], traj.Vl[-1]),
                          voltage_floor=sc.integrator.voltage_floor)
    ctx = LyapunovContext.from_equilibrium(blocks, bank, C, sc.params.Lc, eq.Vbar_s, eq.Vbar_l)
    t0 = _last_event_end(sc) if t_min is None else t_min
    audit = decrease_audit(ctx, traj, t_min=t0, atol=sc.integrator.atol)
    drift = float(np.max(np.abs(traj.geomean_log - traj.geomean_log[0])))
    return {
        "name": cfg.name,
        "t_min": t0,
        **audit.as_dict(),
        "passed": audit.monotone and audit.rate_nonpositive,
        "geomean_log_drift": drift,
        "reference": {"Vbar_s": eq.Vbar_s, "Vbar_l": eq.Vbar_l, "p_star": eq.p_star},
    }


def cmd_audit(args) -> int:
    cfg = load_scenario(resolve_scenario_path(args.scenario), args.controller_override)
    traj = read_csv(args.trajectory, cfg.scenario.params.C)
    if traj.n_sources != cfg.scenario.network.n_sources or traj.n_loads != cfg.scenario.network.n_loads:
        raise ConfigError("trajectory columns do not match the scenario network")
    report = audit_trajectory(cfg, traj, args.t_min)
    _emit(report, _out_dir(args) / f"{cfg.name}_audit.json" if args.output_dir else None)
    return 0


def overshoot(traj: Trajectory, t_min: float = 0.0) -> np.ndarray:
    """Per-source relative power overshoot ``(max P_i - final P_i) / |final P_i|`` after ``t_min``."""
    w = traj.window(t_min)
    final = w.Ps[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(final != 0, (w.Ps.max(axis=0) - final) / np.abs(final), 0.0)


def cmd_compare(args) -> int:
    path = resolve_scenario_path(args.scenario)
    out = _out_dir(args)
    results = {}
    for controller in ("consensus", "dapi"):
        cfg = load_scenario(path, controller)
        traj = simulate(cfg.scenario)
        csv_path = out / f"{cfg.name}_{controller}.csv"
        write_csv(traj, csv_path)
        summary = run_summary(cfg, traj)
        summary["csv_path"] = str(csv_path)
        t_ev = _last_event_end(cfg.scenario)
        summary["overshoot_after_events"] = dict(zip(map(str, cfg.source_ids), overshoot(traj, t_ev)))
        summary["overshoot_whole_run"] = dict(zip(map(str, cfg.source_ids), overshoot(traj)))
        results[controller] = summary
    name = results["consensus"]["name"]
    _emit({"name": name, "runs": results}, out / f"{name}_compare.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="powerconsensus",
        description="Simulate and analyse DC microgrids under power consensus control.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("scenario", help="scenario JSON file or bundled scenario name")
        p.add_argument("--output-dir", help="directory for CSV/JSON artifacts (default: cwd)")
        p.set_defaults(func=func)
        return p

    for name, func, help_ in (("simulate", cmd_simulate, "integrate a scenario and write its trajectory"),
                              ("audit", cmd_audit, "energy-decrease audit of a trajectory CSV")):
        p = add(name, func, help_)
        p.add_argument("--controller-override", choices=CONTROLLERS)
        if name == "audit":
            p.add_argument("--trajectory", required=True, help="CSV written by `simulate`")
            p.add_argument("--t-min", type=float, default=None,
                           help="start of the audited window (default: end of the last event)")
    for name, func, help_ in (("equilibrium", cmd_equilibrium, "solve for the equilibrium of the final loads"),
                              ("check", cmd_check, "stability certificate at that equilibrium")):
        p = add(name, func, help_)
        p.add_argument("--geomean", type=float, default=None,
                       help="target for sum_i C_i ln Vs_i (default: initial source voltages)")
        p.set_defaults(controller_override=None)
    p = add("compare", cmd_compare, "run the consensus and dapi controllers side by side")
    p.set_defaults(controller_override=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        where = f" (t={exc.t})" if getattr(exc, "t", None) is not None else ""
        print(f"numerical failure{where}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
