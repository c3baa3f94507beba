import csv
import hashlib
import json

import pytest
import yaml

from lockseer import cli
from lockseer.ingest import LockMode, LockObjectType, load_lockevents, serialize_event, sort_chronological
from lockseer.models import load_checkpoint
from lockseer.simgen import WorkloadConfig, emit_raw_trace, generate_workload

SMALL_MODEL = {"embed_dim": 8, "heads": 2, "ffn_hidden": 12, "lstm_hidden": 6, "head_hidden": 6}


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_config(path, **sections):
    path.write_text(yaml.safe_dump(sections), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def trace(tmp_path_factory):
    path = tmp_path_factory.mktemp("trace") / "w.lockevents"
    assert cli.main(["simulate", "--out", str(path), "--seed", "3", "--transactions", "150"]) == 0
    return path


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def test_simulate_manifest_and_determinism(tmp_path):
    a, b, c = tmp_path / "a.lockevents", tmp_path / "b.lockevents", tmp_path / "c.lockevents"
    assert cli.main(["simulate", "--out", str(a), "--seed", "7", "--transactions", "100"]) == 0
    assert cli.main(["simulate", "--out", str(b), "--seed", "7", "--transactions", "100"]) == 0
    assert cli.main(["simulate", "--out", str(c), "--seed", "8", "--transactions", "100"]) == 0
    manifest = json.loads((tmp_path / "a.lockevents.manifest.json").read_text())
    assert manifest["sha256"] == sha(a) == sha(b)
    assert manifest["seed"] == 7 and manifest["n_events"] == len(load_lockevents(a)[0])
    assert sha(c) != sha(a)


def test_simulate_config_file(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", workload={"transactions": 20, "seed": 11})
    out = tmp_path / "w.lockevents"
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    expected = generate_workload(WorkloadConfig(transactions=20, seed=11))
    assert load_lockevents(out)[0] == expected


def test_simulate_empty_workload(tmp_path, capsys):
    code = cli.main(["simulate", "--out", str(tmp_path / "x"), "--transactions", "0"])
    assert code == cli.EXIT_USAGE
    assert "empty workload" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def test_ingest_filters_after_reporting(tmp_path, trace, capsys):
    events = load_lockevents(trace)[0][:50]
    sys_rows = [e.__class__(f"s{i}", e.start_ns, e.end_ns, LockMode.S, LockObjectType.TABLE, "SYSIBM", "SYSTABLES")
                for i, e in enumerate(events[:5])]
    src = tmp_path / "in.lockevents"
    src.write_text("".join(serialize_event(e) + "\n" for e in events + sys_rows), encoding="utf-8")
    out = tmp_path / "out.lockevents"
    assert cli.main(["ingest", str(src), "--out", str(out)]) == 0
    kept = load_lockevents(out)[0]
    assert len(kept) == 50 and all(e.schema != "SYSIBM" for e in kept)
    report = capsys.readouterr().out
    assert "55" in report and "kept=50 of 55" in report
    assert (tmp_path / "out.lockevents.report.txt").exists()


def test_ingest_raw_matches_canonical(tmp_path, trace):
    events = load_lockevents(trace)[0]
    raw = tmp_path / "t.raw"
    raw.write_text("\n".join(emit_raw_trace(events)) + "\n", encoding="utf-8")
    a, b = tmp_path / "a.lockevents", tmp_path / "b.lockevents"
    assert cli.main(["ingest", str(raw), "--raw", "--out", str(a)]) == 0
    assert cli.main(["ingest", str(trace), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert load_lockevents(a)[0] == sort_chronological(events)


def test_ingest_errors(tmp_path, trace):
    empty = tmp_path / "e.lockevents"
    empty.write_text("", encoding="utf-8")
    assert cli.main(["ingest", str(empty)]) == cli.EXIT_DATA
    assert cli.main(["ingest", str(tmp_path / "missing")]) == cli.EXIT_DATA
    lines = trace.read_text().splitlines()[:200]
    bad = tmp_path / "bad.lockevents"
    bad.write_text("\n".join(lines + ["garbage"] * 3) + "\n", encoding="utf-8")
    assert cli.main(["ingest", str(bad)]) == cli.EXIT_DATA
    ok = tmp_path / "ok.lockevents"
    ok.write_text("\n".join(lines + ["garbage"]) + "\n", encoding="utf-8")
    assert cli.main(["ingest", str(ok)]) == 0


# ---------------------------------------------------------------------------
# config and prep
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(cli.UsageError):
        cli.ExperimentConfig(input={"simulate": {}, "raw": "x"}).validate()
    with pytest.raises(cli.UsageError):
        cli.ExperimentConfig(task="page_local", regime="global").validate()
    with pytest.raises(cli.UsageError):
        cli.ExperimentConfig(models=["gru"]).validate()
    with pytest.raises(cli.UsageError):
        cli.ExperimentConfig.from_dict({"nonsense": 1})
    assert cli.parse_horizons("1-4") == [1, 2, 3, 4] and cli.parse_horizons("1,3") == [1, 3]


def test_flags_override_config(tmp_path, trace):
    cfg_path = write_config(tmp_path / "c.yaml", task="table", models=["naive"], train={"master_seed": 1})
    args = cli.build_parser().parse_args(["run", "--config", str(cfg_path), "--out", "x", "--seed", "9",
                                          "--input", str(trace), "--horizons", "1-2"])
    cfg = cli.apply_overrides(cli.ExperimentConfig.from_dict(cli.load_yaml(args.config)), args)
    assert cfg.train["master_seed"] == 9 and cfg.horizons == [1, 2]
    assert cfg.input == {"canonical": str(trace.resolve())} and cfg.models == ["naive"]


def test_prep_writes_dataset(tmp_path, trace):
    out = tmp_path / "d.lsds"
    assert cli.main(["prep", "--out", str(out), "--input", str(trace), "--task", "page_global"]) == 0
    from lockseer.prep import load_dataset
    assert load_dataset(out).task == "page_global"
    assert cli.main(["prep", "--out", str(out), "--input", str(trace), "--task", "page_local",
                     "--regime", "local"]) == cli.EXIT_USAGE


# ---------------------------------------------------------------------------
# run and report
# ---------------------------------------------------------------------------

def test_naive_run_is_deterministic(tmp_path, trace):
    cfg = write_config(tmp_path / "c.yaml", models=["naive"], drift_windows=5,
                       train={"n_seeds": 3})
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["run", "--config", str(cfg), "--input", str(trace), "--out", str(out)]) == 0
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    metrics = rows(a / "metrics.csv")
    assert len(metrics) == 3 * 4 and not rows(a / "history.csv")
    assert not list((a / "checkpoints").iterdir())
    assert all(len(r["joint_accuracy"].split(".")[1]) == 6 for r in metrics)
    doc = json.loads((a / "summary.json").read_text())
    assert len(doc["seeds"]) == 3 and len(doc["rows"]) == len(rows(a / "summary.csv"))
    stored = yaml.safe_load((a / "config.yaml").read_text())
    assert stored["train"]["seeds"] == doc["seeds"]
    # the stored config reproduces the run
    c = tmp_path / "c"
    assert cli.main(["run", "--config", str(a / "config.yaml"), "--out", str(c)]) == 0
    assert (c / "summary.csv").read_bytes() == (a / "summary.csv").read_bytes()


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, trace):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "c.yaml", models=["lstm", "naive"], drift_windows=6, model=SMALL_MODEL,
                       train={"epochs": 2, "seeds": [1, 2]})
    out = root / "out"
    assert cli.main(["run", "--config", str(cfg), "--input", str(trace), "--out", str(out)]) == 0
    return out


def test_run_artifacts(trained_run):
    ckpts = sorted(p.name for p in (trained_run / "checkpoints").iterdir())
    assert ckpts == ["global_lstm_seed1.lseer", "global_lstm_seed2.lseer"]
    ck = load_checkpoint(trained_run / "checkpoints" / ckpts[0])
    assert ck.config.kind == "lstm" and ck.meta["seed"] == 1 and ck.config.embed_dim == 8
    hist = rows(trained_run / "history.csv")
    assert len(hist) == 2 * 2 and sum(int(r["is_best"]) for r in hist) == 2
    manifest = json.loads((trained_run / "manifest.json").read_text())
    assert manifest["files"]["summary.csv"] == sha(trained_run / "summary.csv")


def test_report_layout_and_idempotence(trained_run, tmp_path):
    assert cli.main(["report", str(trained_run), "--out", str(tmp_path / "r1")]) == 0
    assert cli.main(["report", str(trained_run), "--out", str(tmp_path / "r2")]) == 0
    r1, r2 = tmp_path / "r1", tmp_path / "r2"
    assert sorted(p.name for p in r1.iterdir()) == sorted(p.name for p in r2.iterdir())
    for p in r1.iterdir():
        assert p.read_bytes() == (r2 / p.name).read_bytes()
    header = next(csv.reader(open(r1 / "accuracy_by_table.csv")))
    assert header == ["table"] + [f"{m}_h{h}" for m in ("lstm", "naive") for h in (1, 2, 3, 4)]
    drift = rows(r1 / "drift_lstm_h1.csv")
    assert len(drift) == 6 and list(drift[0]) == ["window_start_ns", "window_end_ns", "n", "accuracy"]
    table = (r1 / "summary_table.txt").read_text()
    assert "lstm" in table and "naive" in table and "F1" in table


def test_report_missing_artifacts(tmp_path):
    assert cli.main(["report", str(tmp_path)]) == cli.EXIT_DATA


def test_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["bogus"])
    assert info.value.code == cli.EXIT_USAGE
    bad_cfg = tmp_path / "bad.yaml"
    bad_cfg.write_text("[1, 2", encoding="utf-8")
    assert cli.main(["run", "--config", str(bad_cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_USAGE
    assert cli.main(["run", "--input", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA
    err = capsys.readouterr().err
    assert "ingest" in err
    assert cli._code_for(AssertionError("x")) == cli.EXIT_INTERNAL
