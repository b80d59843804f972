"""Command-line entry point: ``cflab <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data validation
error, 3 numeric or training failure.  Diagnostics go to stderr, one line
each, prefixed ``ERROR:``, ``WARN:`` or ``INFO:``.

Every JSON artifact carries a ``provenance`` block (tool version, config
fingerprint, resolved config).  CSV and binary artifacts get the same block
in a ``<file>.meta.json`` / ``<model>.json`` sidecar.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import DEFAULTS, ConfigError, RunConfig, parse_value
from .core import IDMParams, validate_event
from .data import (CSVFormatError, SplitError, extract_events, generate_fleet, make_tasks, read_events_csv,
                   task_manifest, tasks_from_manifest, write_events_csv)
from .evaluation import SUITE_ORDER, BenchmarkConfig, BenchmarkConfigError, SuiteEntry, run_benchmark, write_table_csv
from .ga import CalibrationError, calibrate
from .meta import TrainingError, fine_tune, meta_train, pretrain
from .nn import ModelParams, load_params, save_params
from .physics import GHRParams
from .pidl import IDM_PRIOR, FeatureScaler, Learner
from .pipeline import calibration_events
from .rollout import SimulationError
from .style import StyleError, mode_matrices, style_report, write_mode_csv


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def diag(level: str, msg: str) -> None:
    print(f"{level}: {msg}", file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# shared helpers ----------------------------------------------------------------


def _dump(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _with_provenance(obj: dict, cfg: RunConfig) -> dict:
    out = dict(obj)
    out["provenance"] = cfg.provenance()
    return out


def _sidecar(path, cfg: RunConfig, **extra) -> None:
    _dump(_with_provenance(extra, cfg), f"{path}.meta.json")


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _read_events(path):
    p = _require(path, "input file")
    try:
        events = read_events_csv(p)
    except CSVFormatError as exc:
        raise DataError(str(exc)) from None
    for e in events:
        bad = validate_event(e)
        if bad:
            raise DataError(f"{p}: event {e.event_id} is invalid: {bad[0]}")
    return events


def _read_tasks(args):
    events = _read_events(args.input)
    manifest = json.loads(_require(args.manifest, "manifest").read_text())
    try:
        return tasks_from_manifest(manifest["drivers"], events)
    except (KeyError, SplitError, ValueError) as exc:
        raise DataError(f"bad manifest {args.manifest}: {exc}") from None


def _save_model(learner: Learner, theta, path, cfg: RunConfig, **extra) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_params(ModelParams(np.asarray(theta, dtype=float), learner.layout), path)
    _dump(_with_provenance({"learner": learner.to_dict(), **extra}, cfg), path.with_suffix(".json"))


def _load_model(path):
    p = _require(path, "model file")
    side = _require(p.with_suffix(".json"), "model sidecar")
    meta = json.loads(side.read_text())
    learner = Learner.from_dict(meta["learner"])
    try:
        params = load_params(p)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if params.layout != learner.layout:
        raise DataError(f"{p}: parameter layout does not match its sidecar")
    return learner, params.values


def _load_physics(path):
    d = json.loads(_require(path, "calibration report").read_text())
    params = d["best_params"]
    return IDMParams.from_dict(params) if d["model_kind"] == "IDM" else GHRParams.from_dict(params)


def _write_log(trace, path, cfg: RunConfig, **extra) -> None:
    _dump(_with_provenance({"log": trace.to_records(), **extra}, cfg), path)


# subcommands -------------------------------------------------------------------


def cmd_gen(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fleet = generate_fleet(cfg["fleet.drivers"], cfg["fleet.events"], profiles_seed=cfg["seed"], config=cfg.fleet())
    write_events_csv(fleet.events, out / "fleet.csv")
    _sidecar(out / "fleet.csv", cfg, n_events=len(fleet.events))
    truth = {k: p.to_dict() for k, p in sorted(fleet.profiles.items())}
    _dump(_with_provenance({"drivers": truth}, cfg), out / "truth.json")
    diag("INFO", f"wrote {len(fleet.events)} events for {len(fleet.profiles)} drivers to {out}")


def cmd_extract(args, cfg: RunConfig) -> None:
    try:
        raw = read_events_csv(_require(args.input, "input file"))
    except CSVFormatError as exc:
        raise DataError(str(exc)) from None
    accepted, counts, rejections = extract_events(raw, cfg.extraction())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_events_csv(accepted, out / "events.csv")
    _sidecar(out / "events.csv", cfg, n_events=len(accepted))
    log = [{"driver_id": r.driver_id, "event_id": r.event_id, "reason": r.reason} for r in rejections]
    _dump(_with_provenance({"accepted_per_driver": counts, "rejections": log}, cfg), out / "rejections.json")
    diag("INFO", f"accepted {len(accepted)} events from {len(counts)} drivers, rejected {len(log)}")


def cmd_split(args, cfg: RunConfig) -> None:
    events = _read_events(args.input)
    try:
        train, test = make_tasks(events, cfg.split())
    except (SplitError, ValueError) as exc:
        raise DataError(str(exc)) from None
    _dump(_with_provenance({"drivers": task_manifest(train, test)}, cfg), args.out)
    diag("INFO", f"{len(train)} train and {len(test)} test drivers")


def cmd_calibrate(args, cfg: RunConfig) -> None:
    train, _ = _read_tasks(args)
    kind = args.model.upper()
    box = cfg.idm_box() if kind == "IDM" else cfg.ghr_box()
    ga_cfg = cfg.ga()
    if args.per_driver:
        drivers = {}
        for t in train:
            res = calibrate(kind, list(t.support), box, ga_cfg, cfg["eval.warmup"])
            drivers[t.driver_id] = res.to_dict(box, ga_cfg)
        _dump(_with_provenance({"model_kind": kind, "per_driver": drivers}, cfg), args.out)
        return
    events = calibration_events(train, cfg["ga.events_per_driver"])
    res = calibrate(kind, events, box, ga_cfg, cfg["eval.warmup"])
    _dump(_with_provenance(res.to_dict(box, ga_cfg), cfg), args.out)
    diag("INFO", f"{kind} best fitness {res.fitness:.6g}")


def _learner(args, cfg: RunConfig, train) -> tuple[Learner, np.ndarray]:
    if getattr(args, "init", None):
        return _load_model(args.init)
    scaler = FeatureScaler.fit([e for t in train for e in t.events])
    learner = Learner.create(args.kind, scaler, cfg["model.hidden"], cfg.idm_box(), cfg["model.window"])
    theta = learner.init_theta(np.random.default_rng([cfg["seed"], 0 if args.kind == "pidl" else 1]), IDM_PRIOR)
    return learner, theta


def cmd_train(args, cfg: RunConfig) -> None:
    train, _ = _read_tasks(args)
    learner, theta = _learner(args, cfg, train)
    objectives = [learner.objective(t, cfg["model.window_stride"]) for t in train]
    theta, trace = pretrain(theta, objectives, cfg.pretrain(), seed=cfg["seed"], record_wall=not args.reproducible)
    out = Path(args.out)
    _save_model(learner, theta, out / "model.mfw", cfg, recipe="pretrain")
    _write_log(trace, out / "train_log.json", cfg)


def cmd_meta_train(args, cfg: RunConfig) -> None:
    train, _ = _read_tasks(args)
    learner, theta = _learner(args, cfg, train)
    objectives = [learner.objective(t, cfg["model.window_stride"]) for t in train]
    out = Path(args.out)
    every = cfg["meta.checkpoint_every"]

    def checkpoint(step, th, loss):
        if every > 0 and (step + 1) % every == 0:
            _save_model(learner, th, out / "checkpoints" / f"step_{step + 1:06d}.mfw", cfg, recipe="meta", step=step + 1)

    theta, trace = meta_train(theta, objectives, cfg.meta(), seed=cfg["seed"], on_step=checkpoint,
                              record_wall=not args.reproducible)
    _save_model(learner, theta, out / "model.mfw", cfg, recipe="meta")
    _write_log(trace, out / "train_log.json", cfg)


def cmd_finetune(args, cfg: RunConfig) -> None:
    _, test = _read_tasks(args)
    learner, theta = _load_model(args.model)
    out = Path(args.out)
    ft = replace(cfg.meta(), outer_steps=0)
    for t in test:
        adapted = fine_tune(theta, learner.objective(t, cfg["model.window_stride"]), ft)
        _save_model(learner, adapted, out / f"{t.driver_id}.mfw", cfg, recipe="finetune", driver_id=t.driver_id)
    diag("INFO", f"fine-tuned {len(test)} driver models into {out}")


def _suite_entry(name: str, path: str, adapt: bool) -> SuiteEntry:
    p = _require(path, f"artifact for suite entry {name}")
    if p.suffix == ".json":
        return SuiteEntry(name, params=_load_physics(p))
    learner, theta = _load_model(p)
    return SuiteEntry(name, learner=learner, theta=theta, adapt=adapt)


def cmd_eval(args, cfg: RunConfig) -> None:
    if not args.model:
        raise UsageError("eval needs at least one --model NAME=PATH")
    entries = []
    for spec in args.model:
        if "=" not in spec:
            raise UsageError(f"--model expects NAME=PATH, got {spec!r}")
        name, path = spec.split("=", 1)
        entries.append((name, path))
    # check every artifact before doing any work
    for name, path in entries:
        _require(path, f"artifact for suite entry {name}")
    _, test = _read_tasks(args)
    suite = [_suite_entry(n, p, not args.no_finetune) for n, p in entries]
    bench = BenchmarkConfig(cfg["eval.warmup"], replace(cfg.meta(), outer_steps=0), cfg["model.window_stride"],
                            1 if args.reproducible else cfg["run.threads"])
    report = run_benchmark(test, suite, bench)
    report.fingerprint = cfg.fingerprint()
    out = Path(args.out)
    _dump(_with_provenance(report.to_dict(), cfg), out / "report.json")
    write_table_csv(report.rows(), out / "table.csv")
    _sidecar(out / "table.csv", cfg)
    for name, mse, rate, count in report.rows():
        diag("INFO", f"{name}: mse {mse:.4f} m^2, collisions {rate:.2f} per mille ({count})")


def cmd_style(args, cfg: RunConfig) -> None:
    events = _read_events(args.input)
    try:
        rep = style_report(events, cfg.thresholds(), derive=cfg["style.derive"])
        matrices = mode_matrices(events, cfg.thresholds())
    except StyleError as exc:
        raise DataError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(_with_provenance(rep, cfg), out / "style.json")
    write_mode_csv(matrices, out / "mode_matrices.csv")
    _sidecar(out / "mode_matrices.csv", cfg)


def cmd_report(args, cfg: RunConfig) -> None:
    """Average the per-model rows of several eval reports (e.g. seeds)."""
    if not args.reports:
        raise UsageError("report needs at least one eval report")
    per_model: dict[str, list] = {}
    for path in args.reports:
        d = json.loads(_require(path, "eval report").read_text())
        for name, m in d["models"].items():
            per_model.setdefault(name, []).append(m)
    order = [n for n in SUITE_ORDER if n in per_model] + sorted(n for n in per_model if n not in SUITE_ORDER)
    rows = []
    for name in order:
        ms = per_model[name]
        coll = sum(m["collision_count"] for m in ms)
        total = sum(m["total_events"] for m in ms)
        rows.append((name, float(np.mean([m["mse_spacing"] for m in ms])), 1000.0 * coll / total, coll))
    write_table_csv(rows, args.out)
    _sidecar(args.out, cfg, sources=[str(p) for p in args.reports])


COMMANDS = {
    "gen": cmd_gen, "extract": cmd_extract, "split": cmd_split, "calibrate": cmd_calibrate,
    "train": cmd_train, "meta-train": cmd_meta_train, "finetune": cmd_finetune, "eval": cmd_eval,
    "style": cmd_style, "report": cmd_report,
}

# short flags for the most used keys
ALIASES = {
    "--seed": "seed",
    "--drivers": "fleet.drivers",
    "--events": "fleet.events",
    "--support-ratio": "split.support_fraction",
    "--threads": "run.threads",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--reproducible", action="store_true",
                   help="single-threaded, fixed-order reductions, no wall-clock fields")
    for flag, key in ALIASES.items():
        p.add_argument(flag, dest=f"cfg:{key}", metavar=key.split(".")[-1].upper())
    for key in DEFAULTS:
        if f"--{key}" in ALIASES:
            continue
        p.add_argument(f"--{key}", dest=f"cfg:{key}", help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cflab", description="Car-following modelling lab")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        return p

    p = add("gen", "generate a synthetic fleet")
    p.add_argument("--out", required=True)
    p = add("extract", "apply the event extraction criteria")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p = add("split", "split drivers into train/test and events into support/query")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    for name, help_ in (("calibrate", "GA calibration of IDM or GHR"), ("train", "plain (non-meta) training"),
                        ("meta-train", "meta-training"), ("finetune", "adapt a model to each test driver"),
                        ("eval", "benchmark models on the test query sets")):
        p = add(name, help_)
        p.add_argument("--input", required=True, help="events CSV")
        p.add_argument("--manifest", required=True, help="split manifest JSON")
        p.add_argument("--out", required=True)
        if name == "calibrate":
            p.add_argument("--model", required=True, choices=["IDM", "GHR", "idm", "ghr"])
            p.add_argument("--per-driver", action="store_true")
        if name in ("train", "meta-train"):
            p.add_argument("--kind", choices=["pidl", "lstm"], default="pidl")
            p.add_argument("--init", help="start from this model file")
        if name == "finetune":
            p.add_argument("--model", required=True, help="model file to adapt")
        if name == "eval":
            p.add_argument("--model", action="append", default=[], metavar="NAME=PATH",
                           help="suite entry: calibration JSON or model file")
            p.add_argument("--no-finetune", action="store_true", help="score learned models without adaptation")
    p = add("style", "mode matrices, representative modes, gamma fits")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p = add("report", "average eval reports into one results table")
    p.add_argument("reports", nargs="*")
    p.add_argument("--out", required=True)
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = parse_value(k.strip(), v)
    for dest, value in vars(args).items():
        if dest.startswith("cfg:") and value is not None:
            key = dest[4:]
            overrides[key] = parse_value(key, value)
    if args.reproducible:
        overrides["run.threads"] = 1
    return RunConfig.layered(args.config, overrides)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
        return EXIT_OK
    except (UsageError, ConfigError, BenchmarkConfigError) as exc:
        diag("ERROR", str(exc))
        return EXIT_USAGE
    except (DataError, CSVFormatError, SplitError) as exc:
        diag("ERROR", str(exc))
        return EXIT_DATA
    except (TrainingError, ad.NumericError, SimulationError, CalibrationError, FloatingPointError) as exc:
        diag("ERROR", str(exc))
        return EXIT_NUMERIC


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
