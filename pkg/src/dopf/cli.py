"""Command-line pipeline: scenarios, labels, information analysis, training, simulation, report.

Every stage reads its predecessors' files from the run directory (``--out``)
and writes its own.  Outputs depend only on the inputs and the seed, so a
stage can be re-run safely.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import info, opf, policy, scenarios, simulate
from .errors import ConfigValidation, DopfError, MissingStageInput
from .feeder import load_network, save_network

log = logging.getLogger("dopf")

CASES = ("1", "2", "3ph")

DEFAULT_CONFIG = {
    "feeder": "two_bus",
    "case": "1",
    "seed": 0,
    "scenarios": {"source": "synth", "count": 96, "profiles": None, "path": None},
    "split": list(scenarios.DEFAULT_FRACTIONS),
    "opf": {},
    "info": {"buckets": info.DEFAULT_BUCKETS, "method": "width", "select": 1, "greedy": True},
    "policy": {"base": None, "channels": None, "enter": policy.ENTER_THRESHOLD, "exit": policy.EXIT_THRESHOLD},
    "simulate": {"pf": 0.9, "ltc_y": simulate.LTC_SETPOINT},
}

# run-directory layout
CONFIG = "config.json"
NETWORK = "network"
PROFILES = "profiles.json"
SCENARIOS = "scenarios.csv"
SPLIT = "split.csv"
LABELS = "labels.csv"
LABEL_SUMMARY = "labels_summary.json"
MI_REPORT = "mi_report.json"
POLICIES = "policies.json"
EVALUATION = "evaluation.json"
SIM_DIR = "simulation"
REPORT = "report.json"
ERROR = "error.json"


# --------------------------------------------------------------------------
# configuration


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def validate(cfg: dict) -> dict:
    unknown = set(cfg) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigValidation(f"unknown config keys {sorted(unknown)}")
    cfg["case"] = str(cfg["case"])
    if cfg["case"] not in CASES:
        raise ConfigValidation(f"case must be one of {CASES}")
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigValidation("seed must be an integer")
    src = cfg["scenarios"]
    if src["source"] not in ("synth", "ingest"):
        raise ConfigValidation("scenarios.source must be 'synth' or 'ingest'")
    if src["source"] == "synth" and (not isinstance(src["count"], int) or src["count"] < 2):
        raise ConfigValidation("scenarios.count must be an integer >= 2")
    if src["source"] == "ingest" and not src.get("path"):
        raise ConfigValidation("ingesting needs scenarios.path")
    fr = cfg["split"]
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigValidation("split must be three nonnegative fractions summing to 1")
    if cfg["info"]["method"] not in ("width", "frequency"):
        raise ConfigValidation("info.method must be 'width' or 'frequency'")
    if int(cfg["info"]["buckets"]) < 2:
        raise ConfigValidation("info.buckets must be at least 2")
    if not 0.0 < float(cfg["simulate"]["pf"]) <= 1.0:
        raise ConfigValidation("simulate.pf must lie in (0, 1]")
    opf_config(cfg)
    return cfg


def opf_config(cfg: dict) -> opf.OpfConfig:
    base = opf.OpfConfig.case(cfg["case"]).to_dict()
    try:
        return opf.OpfConfig.from_dict({**base, **cfg["opf"]})
    except (TypeError, KeyError) as exc:
        raise ConfigValidation(f"bad opf settings: {exc}") from exc


def resolve_config(args) -> dict:
    """Defaults, then the run directory's config (or ``--config``), then flags."""
    out = Path(args.out)
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    path = Path(args.config) if args.config else out / CONFIG
    if args.config or path.exists():
        if not path.exists():
            raise MissingStageInput(f"config file {path} not found")
        try:
            cfg = _merge(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigValidation(f"{path}: {exc}") from exc
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.case is not None:
        cfg["case"] = args.case
    return validate(cfg)


def _bundled(name: str) -> Path | None:
    ref = resources.files("dopf") / "data" / name
    return Path(str(ref)) if ref.is_dir() else None


def _feeder_source(cfg: dict) -> tuple[Path, Path | None]:
    """(network directory, bundled profiles file or None)."""
    name = cfg["feeder"]
    path = Path(name)
    if path.is_dir():
        prof = path / PROFILES
        return path, prof if prof.exists() else None
    bundled = _bundled(name)
    if bundled is None:
        raise MissingStageInput(f"feeder {name!r} is neither a directory nor a bundled fixture")
    return bundled, bundled / PROFILES


# --------------------------------------------------------------------------
# run-directory access


def _need(out: Path, name: str) -> Path:
    p = out / name
    if not p.exists():
        raise MissingStageInput(f"{p} is missing; run the stage that produces it first")
    return p


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _t(t: float) -> str:
    return str(int(t)) if float(t).is_integer() else repr(float(t))


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def load_run(out: Path, labels: bool = False):
    """(network, scenarios with split, labels or None) from a run directory."""
    net = load_network(_need(out, NETWORK))
    sc = scenarios.ingest(_need(out, SCENARIOS).read_text(), net, provenance="run")
    split_rows = _need(out, SPLIT).read_text().splitlines()[1:]
    sc = sc.with_split([r.split(",")[1] for r in split_rows])
    lab = opf.labels_from_csv(_need(out, LABELS).read_text(), net, sc) if labels else None
    return net, sc, lab


def _save_scenarios(out: Path, net, sc, cfg: dict) -> None:
    sc = scenarios.split(sc, cfg["split"], seed=cfg["seed"])
    save_network(net, out / NETWORK)
    _write(out / SCENARIOS, sc.to_csv(net))
    _write(out / SPLIT, "t,split\n" + "".join(f"{_t(t)},{s}\n" for t, s in zip(sc.times, sc.split)))
    _write(out / CONFIG, _json(cfg))


# --------------------------------------------------------------------------
# stages


def cmd_gen_scenarios(args, cfg: dict) -> dict:
    out = Path(args.out)
    cfg["scenarios"]["source"] = "synth"
    if args.count is not None:
        cfg["scenarios"]["count"] = args.count
    if args.feeder is not None:
        cfg["feeder"] = args.feeder
    validate(cfg)
    net_dir, bundled_prof = _feeder_source(cfg)
    net = load_network(net_dir)
    prof_path = cfg["scenarios"]["profiles"] or bundled_prof
    if prof_path is None:
        raise MissingStageInput("no profiles file for this feeder; set scenarios.profiles")
    profiles = json.loads(Path(prof_path).read_text())
    sc = scenarios.synthesize(net, profiles, cfg["scenarios"]["count"], cfg["seed"])
    _write(out / PROFILES, _json(profiles))
    _save_scenarios(out, net, sc, cfg)
    return {"scenarios": len(sc)}


def cmd_ingest(args, cfg: dict) -> dict:
    out = Path(args.out)
    if args.input is not None:
        cfg["scenarios"].update(source="ingest", path=args.input)
    if args.feeder is not None:
        cfg["feeder"] = args.feeder
    cfg["scenarios"]["source"] = "ingest"
    validate(cfg)
    net = load_network(_feeder_source(cfg)[0])
    src = Path(cfg["scenarios"]["path"])
    if not src.exists():
        raise MissingStageInput(f"scenario file {src} not found")
    sc = scenarios.ingest(src.read_text(), net, provenance=str(src))
    _save_scenarios(out, net, sc, cfg)
    return {"scenarios": len(sc), "zero_filled": sc.zero_filled}


def cmd_label(args, cfg: dict) -> dict:
    out = Path(args.out)
    net, sc, _ = load_run(out)
    lab = opf.label_set(net, sc, opf_config(cfg), jobs=args.jobs)
    _write(out / LABELS, opf.labels_to_csv(lab, net))
    summary = lab.summary()
    _write(out / LABEL_SUMMARY, _json(summary))
    return summary


def cmd_analyze_info(args, cfg: dict) -> dict:
    out = Path(args.out)
    net, _, lab = load_run(out, labels=True)
    icfg = cfg["info"]
    select = icfg["select"] if args.select is None else args.select
    greedy = icfg["greedy"] if args.greedy is None else args.greedy
    rep = info.analyze(net, lab, k=int(icfg["buckets"]), method=icfg["method"], select=int(select),
                       greedy=bool(greedy))
    _write(out / MI_REPORT, rep.to_json())
    return {"ders": len(rep.gamma), "select": int(select), "greedy": bool(greedy)}


def _base(cfg: dict, net) -> dict:
    given = cfg["policy"]["base"]
    if given is None:
        return {d: policy.default_base(net, d, cfg["case"]) for d in net.der_ids}
    if isinstance(given, dict):
        return {d: tuple(given[d]) for d in net.der_ids}
    return {d: tuple(given) for d in net.der_ids}


def cmd_train(args, cfg: dict) -> dict:
    out = Path(args.out)
    net, _, lab = load_run(out, labels=True)
    channels = tuple(cfg["policy"]["channels"] or opf_config(cfg).channels)
    pols = policy.train(net, lab, _base(cfg, net), channels=channels,
                        enter=float(cfg["policy"]["enter"]), exit=float(cfg["policy"]["exit"]))
    _write(out / POLICIES, policy.policies_to_json(pols))
    if net.single_phase:
        ev = policy.evaluate(net, pols, lab)
        doc = {d: {k: v for k, v in vars(e).items() if k != "der"} for d, e in ev.items()}
        n = sum(e.n for e in ev.values())
        doc = {"ders": doc, "violation_rate": sum(e.violation_rate * e.n for e in ev.values()) / max(n, 1)}
    else:
        doc = {"ders": {d: {m: p.models[m].fit.r2 for m in p.models} for d, p in pols.items()}}
    _write(out / EVALUATION, _json(doc))
    return {"policies": len(pols)}


def cmd_simulate(args, cfg: dict) -> dict:
    out = Path(args.out)
    net, sc, lab = load_run(out, labels=True)
    pols = policy.policies_from_json(_need(out, POLICIES).read_text())
    conf = opf_config(cfg)
    val = sc.subset("validation")
    lab_val = lab.subset("validation")
    sim_dir = out / SIM_DIR
    if not net.single_phase:
        reports = {"central": simulate.run_3ph_balance(net, val, "central", conf),
                   "decentralized": simulate.run_3ph_balance(net, val, pols, conf)}
        lines = ["t,mode,gap_before,gap_after,status"]
        for name, r in reports.items():
            lines += [f"{_t(t)},{name},{b!r},{a!r},{s}"
                      for t, b, a, s in zip(r.times, r.gap_before, r.gap_after, r.status)]
        _write(sim_dir / "balance.csv", "\n".join(lines) + "\n")
        summary = {name: r.summary() for name, r in reports.items()}
        _write(sim_dir / "summary.json", _json(summary))
        return {name: s["reduction_mean"] for name, s in summary.items()}
    modes = [simulate.CentralizedOPF(labels=lab_val), simulate.Decentralized(pols),
             simulate.ConstantPF(float(cfg["simulate"]["pf"])), simulate.NoControl(),
             simulate.DecentralizedWithLTC(pols, float(cfg["simulate"]["ltc_y"]))]
    reports = {m.name: simulate.run(net, val, m, conf, jobs=args.jobs) for m in modes}
    summary = simulate.write_outputs(reports, sim_dir)
    dec = summary["modes"]["decentralized"]
    return {"gap_mean_percent": dec["gap_mean_percent"], "gap_max_percent": dec["gap_max_percent"]}


def cmd_report(args, cfg: dict) -> dict:
    out = Path(args.out)
    doc = {"config": cfg, "labels": json.loads(_need(out, LABEL_SUMMARY).read_text()),
           "simulation": json.loads(_need(out, f"{SIM_DIR}/summary.json").read_text())}
    for key, name in (("information", MI_REPORT), ("evaluation", EVALUATION)):
        if (out / name).exists():
            doc[key] = json.loads((out / name).read_text())
    _write(out / REPORT, _json(doc))
    return {"report": str(out / REPORT)}


STAGES = {
    "gen-scenarios": cmd_gen_scenarios,
    "ingest": cmd_ingest,
    "label": cmd_label,
    "analyze-info": cmd_analyze_info,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (default: the run directory's config.json)")
    common.add_argument("--out", default="run", help="run directory (default: %(default)s)")
    common.add_argument("--seed", type=int, help="seed for synthesis and the train/test/validation split")
    common.add_argument("--jobs", type=int, default=1, help="worker processes within a stage")
    common.add_argument("--case", choices=CASES, help="objective preset")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dopf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="stage", required=True)
    p = sub.add_parser("gen-scenarios", parents=[common], help="synthesize scenarios for a feeder")
    p.add_argument("--feeder", help="bundled fixture name or feeder directory")
    p.add_argument("--count", type=int, help="number of timesteps")
    p = sub.add_parser("ingest", parents=[common], help="load a scenario time series")
    p.add_argument("--feeder", help="bundled fixture name or feeder directory")
    p.add_argument("--input", help="long-format scenario CSV")
    sub.add_parser("label", parents=[common], help="solve the centralized OPF for every scenario")
    p = sub.add_parser("analyze-info", parents=[common], help="mutual-information analysis")
    p.add_argument("--select", type=int, help="communication set size per DER")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--greedy", dest="greedy", action="store_true", default=None)
    g.add_argument("--exhaustive", dest="greedy", action="store_false")
    sub.add_parser("train", parents=[common], help="fit local policies")
    sub.add_parser("simulate", parents=[common], help="replay control modes on the validation split")
    sub.add_parser("report", parents=[common], help="collect stage outputs into report.json")
    return parser


def _fail(out: Path, stage: str, exc: Exception, code: int) -> int:
    doc = {"stage": stage, "error": type(exc).__name__, "message": str(exc), "exit_code": code}
    text = json.dumps(doc, sort_keys=True)
    try:
        _write(out / ERROR, text + "\n")
    except OSError:
        pass
    print(text, file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = resolve_config(args)
        result = STAGES[args.stage](args, cfg)
    except ConfigValidation as exc:
        return _fail(out, args.stage, exc, 2)
    except MissingStageInput as exc:
        return _fail(out, args.stage, exc, 3)
    except (DopfError, OSError, ValueError, KeyError) as exc:
        return _fail(out, args.stage, exc, 1)
    err = out / ERROR
    if err.exists():
        err.unlink()
    print(json.dumps({"stage": args.stage, **result}, sort_keys=True, default=_plain))
    return 0


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(type(v).__name__)


if __name__ == "__main__":
    sys.exit(main())
