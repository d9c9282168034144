import csv
import json

import numpy as np
import pytest

from disttune.cli import EXIT_INPUT, EXIT_OK, EXIT_UNSATISFIED, main, parse

SMALL = ["--patterns", "2", "--per-pattern", "2", "--days", "2"]
SPLIT = ["--train-days", "1", "--test-days", "1"]


@pytest.fixture(scope="module")
def net(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--data-dir", str(root), "--out", "net", "--drift", "1", *SMALL]) == EXIT_OK
    return root


def run(root, out, *extra):
    return main(["run", "--data-dir", str(root), "--manifest", "net/manifest.json",
                 "--out", out, *SPLIT, *extra])


@pytest.fixture(scope="module")
def baseline(net):
    assert run(net, "runs/a") == EXIT_OK
    return net / "runs/a"


def test_run_is_deterministic(net, baseline):
    assert run(net, "runs/b") == EXIT_OK
    for name in ("detectors.csv", "summary.json", "jobs.csv", "registry/registry.json"):
        assert (net / "runs/a" / name).read_bytes() == (net / "runs/b" / name).read_bytes()
    summary = json.loads((net / "runs/a/summary.json").read_text())
    assert summary["detectors"] == 4 and summary["g_count"] == 2


def test_sharing_off_runs_more_tuners(net, baseline):
    assert run(net, "runs/off", "--sharing", "off") == EXIT_OK
    on = json.loads((baseline / "summary.json").read_text())
    off = json.loads((net / "runs/off/summary.json").read_text())
    assert on["tuner_invocations"] < off["tuner_invocations"] == 4


def test_unsatisfied_exit_code(net):
    assert run(net, "runs/strict", "--thd-aare", "0.0001", "--budget", "5", "--sharing", "off") \
        == EXIT_UNSATISFIED


@pytest.mark.parametrize("argv", [
    ["run", "--manifest", "missing.json"],
    ["run", "--scenario", "1", "--mask", "n_layer=1"],
    ["run", "--workers", "2", "--transport", "serial"],
    ["run", "--mask", "depth=3"],
    ["run", "--thd-aare", "2"],
    ["report", "nothing-here"],
    ["bogus"],
    ["gradcheck", "--layers", "9"],
])
def test_input_errors(net, argv):
    assert main([*argv[:1], "--data-dir", str(net), *argv[1:]]) == EXIT_INPUT


def test_config_precedence(tmp_path, monkeypatch):
    monkeypatch.delenv("DISTTUNE_SEED", raising=False)
    cfg = tmp_path / "c.toml"
    cfg.write_text("# desk run\nbudget = 7\nseed = 11\nthd-aare = 0.04\nworkers = 2\n")
    args = parse(["run", "--config", str(cfg)])
    assert (args.budget, args.seed, args.thd_aare, args.workers) == (7, 11, 0.04, 2)
    args = parse(["run", "--config", str(cfg), "--budget", "9"])
    assert args.budget == 9
    monkeypatch.setenv("DISTTUNE_SEED", "3")
    assert parse(["run", "--config", str(cfg)]).seed == 3
    assert parse(["run", "--config", str(cfg), "--seed", "5"]).seed == 5
    cfg.write_text("colour = blue\n")
    assert main(["run", "--config", str(cfg)]) == EXIT_INPUT


def test_track_and_report(net, baseline):
    calm = ["track", "--data-dir", str(net), "--registry", "runs/a/registry", *SPLIT]
    assert main([*calm, "--feed", "net/manifest.json", "--out", "runs/t0"]) == EXIT_OK
    assert len((net / "runs/t0/tracking.csv").read_text().splitlines()) == 1
    assert main([*calm, "--feed", "net/feed/manifest.json", "--out", "runs/t1"]) == EXIT_OK
    with open(net / "runs/t1/tracking.csv") as fh:
        tracked = [r["detector"] for r in csv.DictReader(fh)]
    assert tracked == list(json.loads((net / "net/feed/drift.json").read_text()))

    assert main(["report", "--data-dir", str(net), "runs/a", "--out", "runs/rep"]) == EXIT_OK
    with open(net / "runs/rep/report.csv") as fh:
        row = next(csv.DictReader(fh))
    with open(net / "runs/a/detectors.csv") as fh:
        aare = [float(r["aare"]) for r in csv.DictReader(fh)]
    assert float(row["avg_aare"]) == pytest.approx(np.mean(aare), abs=1e-12)
    assert "total_time_s" not in row
    assert "total_time_s" in (net / "runs/rep/timing.csv").read_text()


def test_small_commands(tmp_path):
    assert main(["gradcheck", "--layers", "2", "--units", "4", "--lookback", "6"]) == EXIT_OK
    assert main(["bench", "--instances", "100"]) == EXIT_OK
    out = tmp_path / "w.csv"
    assert main(["window", "--weeks", "1", "2", "--out", str(out)]) == EXIT_OK
    assert len(out.read_text().splitlines()) == 3
