"""Command line front end: simulate, ingest, prep, run, report.

Configuration precedence, lowest to highest: built-in defaults, the YAML file
given by ``--config``, then explicit command line flags.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .evalkit import EvalError, multi_horizon_eval, rollout_split, summarize_runs, temporal_drift
from .ingest import (ParseError, filter_events, lock_type_distribution, read_lockevents, read_raw_trace,
                     sort_chronological, write_lockevents)
from .models import KINDS, CheckpointError, ModelConfig, ModelError, build_predictor, save_checkpoint
from .prep import TASKS, DataError, build_dataset, save_dataset
from .simgen import ConfigError, WorkloadConfig, generate_cyclic_workload, generate_workload, serialize_workload
from .tensorcore import NonFiniteError
from .train import REGIMES, TrainConfig, TrainError, train_regime

log = logging.getLogger("lockseer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
MAX_MALFORMED_FRACTION = 0.01
INPUT_KINDS = ("simulate", "cyclic", "canonical", "raw")
MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"kind", "vocab_size", "seed"}


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, scope, exc):
        super().__init__(f"stage {stage!r} failed (scope {scope}): {exc}")
        self.cause = exc


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6f}"
    return str(value)


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path: Path) -> list:
    if not path.exists():
        raise DataError(f"missing artifact {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_yaml(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise UsageError(f"malformed config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config must be a mapping")
    return data


# ---------------------------------------------------------------------------
# experiment config
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    input: dict = field(default_factory=lambda: {"simulate": {}})
    task: str = "table"
    regime: str = "global"
    models: list = field(default_factory=lambda: list(KINDS))
    horizons: list = field(default_factory=lambda: [1, 2, 3, 4])
    drift_windows: int = 50
    average: str = "macro"
    train: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise UsageError(f"unknown config sections {sorted(unknown)}")
        return cls(**data)

    def validate(self) -> "ExperimentConfig":
        if not isinstance(self.input, dict) or len(self.input) != 1:
            raise UsageError("input must name exactly one source")
        (kind, _), = self.input.items()
        if kind not in INPUT_KINDS:
            raise UsageError(f"unknown input source {kind!r}; expected one of {INPUT_KINDS}")
        if self.task not in TASKS:
            raise UsageError(f"unknown task {self.task!r}")
        if self.regime not in REGIMES:
            raise UsageError(f"unknown regime {self.regime!r}")
        if self.task == "page_local" and self.regime != "local":
            raise UsageError("page_local requires the local regime")
        if self.task == "page_global" and self.regime != "global":
            raise UsageError("page_global requires the global regime")
        if not self.models or any(m not in KINDS for m in self.models) or len(set(self.models)) != len(self.models):
            raise UsageError(f"models must be distinct values from {KINDS}")
        if not self.horizons or any(not 1 <= int(h) <= 4 for h in self.horizons):
            raise UsageError("horizons must lie in 1..4")
        if self.drift_windows < 2:
            raise UsageError("drift_windows must be >= 2")
        if self.average not in ("macro", "weighted"):
            raise UsageError("average must be macro or weighted")
        bad = set(self.model) - MODEL_KEYS
        if bad:
            raise UsageError(f"unknown model keys {sorted(bad)}")
        self.train_config().validate()
        return self

    def train_config(self) -> TrainConfig:
        unknown = set(self.train) - {f.name for f in fields(TrainConfig)}
        if unknown:
            raise UsageError(f"unknown train keys {sorted(unknown)}")
        return TrainConfig(**self.train)

    def model_configs(self) -> list:
        return [ModelConfig(kind=k, vocab_size=3, **self.model) for k in self.models]

    def to_dict(self) -> dict:
        return asdict(self)


def apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "task", None):
        cfg.task = args.task
    if getattr(args, "regime", None):
        cfg.regime = args.regime
    if getattr(args, "models", None):
        cfg.models = [m.strip() for m in args.models.split(",") if m.strip()]
    if getattr(args, "horizons", None):
        cfg.horizons = parse_horizons(args.horizons)
    if getattr(args, "drift_windows", None) is not None:
        cfg.drift_windows = args.drift_windows
    if getattr(args, "seed", None) is not None:
        cfg.train = {**cfg.train, "master_seed": args.seed}
    if getattr(args, "input", None):
        cfg.input = {("raw" if args.raw else "canonical"): str(Path(args.input).resolve())}
    return cfg


def parse_horizons(text: str) -> list:
    try:
        if "-" in text and "," not in text:
            lo, hi = text.split("-")
            return list(range(int(lo), int(hi) + 1))
        return [int(h) for h in text.split(",")]
    except ValueError:
        raise UsageError(f"bad horizons {text!r}") from None


# ---------------------------------------------------------------------------
# input loading
# ---------------------------------------------------------------------------

def read_events(path, raw: bool):
    """Load events and a parse summary; returns (events, summary, total_lines)."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [ln for ln in fh if ln.strip()]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if not lines:
        raise DataError(f"empty input {path}")
    if raw:
        events, summary = read_raw_trace(lines)
    else:
        events, summary = read_lockevents(lines, strict=False)
    frac = summary.skipped / len(lines)
    if frac > MAX_MALFORMED_FRACTION:
        raise DataError(f"{summary.skipped} of {len(lines)} lines malformed ({100 * frac:.2f}% > 1%)")
    return events, summary, len(lines)


def workload_from(section: dict, seed: Optional[int] = None) -> WorkloadConfig:
    cfg = WorkloadConfig.from_dict(section or {})
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()


def load_input(source: dict) -> list:
    (kind, value), = source.items()
    if kind == "simulate":
        events = generate_workload(workload_from(value))
    elif kind == "cyclic":
        value = dict(value or {})
        events = generate_cyclic_workload(int(value.pop("n_events", 2000)), **value)
    else:
        events, _, _ = read_events(value, raw=(kind == "raw"))
    return sort_chronological(filter_events(events))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    data = load_yaml(args.config)
    section = data.get("workload", data.get("simulate", {}))
    cfg = workload_from(section, args.seed)
    if args.transactions is not None:
        cfg.transactions = args.transactions
        cfg.validate()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = serialize_workload(generate_workload(cfg))
    try:
        out.write_bytes(payload)
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc}") from None
    manifest = {
        "seed": cfg.seed,
        "config_sha256": cfg.fingerprint(),
        "config": cfg.to_dict(),
        "output": out.name,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "n_events": payload.count(b"\n"),
        "version": __version__,
    }
    manifest_path = out.with_name(out.name + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {manifest['n_events']} events to {out} sha256={manifest['sha256']}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    events, summary, n_lines = read_events(args.input, args.raw)
    report = lock_type_distribution(events)
    kept = sort_chronological(filter_events(events))
    print(report.format())
    print(summary.format())
    print(f"kept={len(kept)} of {len(events)} events after filtering")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_lockevents(kept, out)
        out.with_name(out.name + ".report.txt").write_text(
            report.format() + "\n" + summary.format() + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_prep(args) -> int:
    cfg = apply_overrides(ExperimentConfig.from_dict(load_yaml(args.config)), args)
    events = load_input(cfg.input)
    task = cfg.task
    if task == "page_local" and not args.table:
        raise UsageError("--table is required for page_local")
    ds = build_dataset(events, task, table=args.table)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(f"task={task} scope={ds.scope} vocab={len(ds.vocab)} "
          f"train={len(ds.train)} val={len(ds.val)} test={len(ds.test)} -> {out}")
    return EXIT_OK


@contextmanager
def stage(name, scope="-"):
    try:
        yield
    except (UsageError, StageError):
        raise
    except Exception as exc:
        raise StageError(name, scope, exc) from exc


def run_experiment(cfg: ExperimentConfig, out: Path) -> dict:
    """Execute the full pipeline and write every artifact under ``out``."""
    cfg.validate()
    train_cfg = cfg.train_config()
    seeds = sorted(train_cfg.resolved_seeds())
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    stored = cfg.to_dict()
    stored["train"] = {**stored["train"], "seeds": seeds}
    (out / "config.yaml").write_text(yaml.safe_dump(stored, sort_keys=True), encoding="utf-8")

    with stage("ingest"):
        events = load_input(cfg.input)
    with stage("train"):
        scopes = train_regime(cfg.regime, events, cfg.task, cfg.model_configs(), train_cfg)
    if not scopes:
        raise DataError("no scope had enough events to train")

    horizons = sorted(int(h) for h in cfg.horizons)
    metrics, per_table, drift, history, summary, summary_tables = [], [], [], [], [], []
    for sr in scopes:
        ds = sr.dataset
        for kind in cfg.models:
            reports = []
            for run in sr.runs[kind]:
                with stage("evaluate", sr.scope):
                    model = build_predictor(run.config, run.params or None)
                    preds = rollout_split(model, ds.test, max(horizons))
                    rep = multi_horizon_eval(model, ds, horizons, preds=preds, seed=run.seed,
                                             model_name=kind, average=cfg.average)
                    dr = temporal_drift(model, ds, cfg.drift_windows, horizons, preds=preds,
                                        seed=run.seed, model_name=kind)
                reports.append(rep)
                for h in horizons:
                    metrics.append([sr.scope, cfg.task, kind, run.seed, cfg.average, h, rep.n[h],
                                    rep.joint[h], rep.per_step[h], rep.precision, rep.recall, rep.f1])
                for (table, h), (n, acc) in sorted(rep.per_table.items()):
                    per_table.append([sr.scope, kind, run.seed, table, h, n, acc])
                for w in dr.windows:
                    for h in horizons:
                        drift.append([sr.scope, kind, run.seed, h, w.index, w.start_ns, w.end_ns,
                                      w.n[h], w.accuracy[h]])
                for row in run.history.rows(sr.scope, kind, run.seed):
                    history.append(list(row.values()))
                if run.params:
                    name = f"{sr.scope}_{kind}_seed{run.seed}.lseer"
                    save_checkpoint(run.params, run.config, ds.vocab,
                                    {"scope": sr.scope, "task": cfg.task, "seed": run.seed,
                                     "best_epoch": run.history.best_epoch}, out / "checkpoints" / name)
            with stage("summarize", sr.scope):
                agg = summarize_runs(reports)
            for (metric, h), mean in agg.mean.items():
                summary.append([sr.scope, cfg.task, kind, cfg.average, metric, h, agg.n_runs, mean,
                                agg.std[(metric, h)]])
            for (table, h), mean in agg.per_table_mean.items():
                summary_tables.append([sr.scope, kind, table, h, agg.n_runs, mean, agg.per_table_std[(table, h)]])

    write_csv(out / "metrics.csv", ["scope", "task", "model", "seed", "average", "horizon", "n",
                                    "joint_accuracy", "per_step_accuracy", "precision_h1", "recall_h1",
                                    "f1_h1"], metrics)
    write_csv(out / "per_table.csv", ["scope", "model", "seed", "table", "horizon", "n", "accuracy"], per_table)
    write_csv(out / "drift.csv", ["scope", "model", "seed", "horizon", "window", "window_start_ns",
                                  "window_end_ns", "n", "accuracy"], drift)
    write_csv(out / "history.csv", ["scope", "model", "seed", "epoch", "train_loss", "val_loss", "is_best"],
              history)
    write_csv(out / "summary.csv", ["scope", "task", "model", "average", "metric", "horizon", "n_runs",
                                    "mean", "std"], summary)
    write_csv(out / "summary_tables.csv", ["scope", "model", "table", "horizon", "n_runs", "mean", "std"],
              summary_tables)
    summary_doc = {
        "task": cfg.task,
        "regime": cfg.regime,
        "average": cfg.average,
        "seeds": seeds,
        "rows": [dict(zip(["scope", "task", "model", "average", "metric", "horizon", "n_runs", "mean", "std"],
                          [fmt(v) for v in row])) for row in summary],
    }
    (out / "summary.json").write_text(json.dumps(summary_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "version": __version__,
        "seeds": seeds,
        "scopes": [sr.scope for sr in scopes],
        "files": {str(p.relative_to(out)): sha256_file(p) for p in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def cmd_run(args) -> int:
    cfg = apply_overrides(ExperimentConfig.from_dict(load_yaml(args.config)), args)
    manifest = run_experiment(cfg, Path(args.out))
    print(f"run complete: {len(manifest['scopes'])} scope(s), {len(manifest['seeds'])} seed(s) -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def render_summary_table(summary_rows) -> str:
    metric_cols = [("joint_accuracy", "Accuracy"), ("precision", "Precision"), ("recall", "Recall"), ("f1", "F1")]
    cells = {}
    for r in summary_rows:
        if int(r["horizon"]) == 1:
            cells[(r["scope"], r["model"], r["metric"])] = (float(r["mean"]), float(r["std"]))
    keys = sorted({(s, m) for s, m, _ in cells})
    average = summary_rows[0]["average"] if summary_rows else "macro"
    lines = [f"# horizon 1, {average} averaged, mean ± std over seeds",
             f"{'Scope':<12}{'Model':<13}" + "".join(f"{label:>18}" for _, label in metric_cols)]
    for scope, model in keys:
        row = f"{scope:<12}{model:<13}"
        for metric, _ in metric_cols:
            mean, std = cells.get((scope, model, metric), (float("nan"), float("nan")))
            row += f"{mean:>10.4f} ± {std:<6.4f}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    rep_dir = Path(args.out) if args.out else run_dir / "report"
    summary = read_csv(run_dir / "summary.csv")
    tables = read_csv(run_dir / "summary_tables.csv")
    drift = read_csv(run_dir / "drift.csv")
    rep_dir.mkdir(parents=True, exist_ok=True)
    (rep_dir / "summary_table.txt").write_text(render_summary_table(summary), encoding="utf-8")

    models = sorted({r["model"] for r in tables})
    horizons = sorted({int(r["horizon"]) for r in tables})
    cols = [(m, h) for m in models for h in horizons]
    grid = defaultdict(dict)
    for r in tables:
        grid[r["table"]][(r["model"], int(r["horizon"]))] = (float(r["mean"]), float(r["std"]))
    header = ["table"] + [f"{m}_h{h}" for m, h in cols]
    names = sorted(grid)
    write_csv(rep_dir / "accuracy_by_table.csv", header,
              [[t] + [grid[t].get(c, (None, None))[0] for c in cols] for t in names])
    write_csv(rep_dir / "accuracy_by_table_std.csv", header,
              [[t] + [grid[t].get(c, (None, None))[1] for c in cols] for t in names])

    series = defaultdict(lambda: defaultdict(list))
    for r in drift:
        key = (r["scope"], r["model"], int(r["horizon"]))
        series[key][int(r["window"])].append(r)
    for (scope, model, h), windows in sorted(series.items()):
        rows = []
        for k in sorted(windows):
            rs = windows[k]
            accs = [float(r["accuracy"]) for r in rs if r["accuracy"] != ""]
            rows.append([float(rs[0]["window_start_ns"]), float(rs[0]["window_end_ns"]), int(rs[0]["n"]),
                         float(np.mean(accs)) if accs else None])
        prefix = "drift" if scope == "global" else f"drift_{scope}"
        write_csv(rep_dir / f"{prefix}_{model}_h{h}.csv", ["window_start_ns", "window_end_ns", "n", "accuracy"],
                  rows)
    print((rep_dir / "summary_table.txt").read_text(encoding="utf-8"), end="")
    print(f"report written to {rep_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lockseer", description="Lock acquisition sequence prediction toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--seed", type=int, help="seed override")

    sp = sub.add_parser("simulate", help="generate a synthetic TPC-C-like lock stream")
    common(sp, "output .lockevents file")
    sp.add_argument("--transactions", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("ingest", help="parse, report and filter a trace")
    sp.add_argument("input")
    sp.add_argument("--out", help="filtered canonical output")
    mode = sp.add_mutually_exclusive_group()
    mode.add_argument("--raw", action="store_true", help="input is a raw lock-manager trace")
    mode.add_argument("--canonical", dest="raw", action="store_false", help="input is canonical (default)")
    sp.set_defaults(func=cmd_ingest)

    for name, func, out_help in (("prep", cmd_prep, "dataset container file"),
                                 ("run", cmd_run, "run directory")):
        sp = sub.add_parser(name, help=f"{name} an experiment")
        common(sp, out_help)
        sp.add_argument("--input", help="trace path overriding the config input")
        sp.add_argument("--raw", action="store_true", help="--input is a raw trace")
        sp.add_argument("--task", choices=TASKS)
        sp.add_argument("--regime", choices=REGIMES)
        sp.add_argument("--models", help="comma separated model kinds")
        sp.add_argument("--horizons", help="e.g. 1,2,3,4 or 1-4")
        sp.add_argument("--drift-windows", type=int)
        if name == "prep":
            sp.add_argument("--table", help="table scope for local datasets")
        sp.set_defaults(func=func)

    sp = sub.add_parser("report", help="render tables and plot data from a run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--out", help="report directory (default <run_dir>/report)")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _code_for(exc.cause)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _code_for(exc)


def _code_for(exc) -> int:
    if isinstance(exc, (UsageError, ConfigError, ModelError)):
        return EXIT_USAGE
    if isinstance(exc, (DataError, ParseError, CheckpointError, EvalError, OSError)):
        return EXIT_DATA
    if isinstance(exc, TrainError) and isinstance(exc.__cause__, (DataError, ParseError)):
        return EXIT_DATA
    if isinstance(exc, (NonFiniteError, AssertionError, TrainError)):
        return EXIT_INTERNAL
    return EXIT_INTERNAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
