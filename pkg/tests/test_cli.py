import csv
import hashlib
import json
import subprocess
import sys
import time

import pytest

from movelight import cli
from movelight.agent import NumericalAbort
from movelight.builder import dumps, grid_scenario


def run(*argv):
    return cli.main(["--quiet", *argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    t0 = time.perf_counter()
    assert run("train", "--scenario", "single.json", "--seed", "1", "--episodes", "2", "--out-dir", str(out)) == 0
    return out, time.perf_counter() - t0


def test_train_smoke_outputs(trained):
    out, wall = trained
    assert wall < 60
    rows = list(csv.DictReader(open(out / "episodes.csv")))
    assert [int(r["episode"]) for r in rows] == [0, 1]
    assert (out / "checkpoint.npz").exists() and (out / "report.md").exists()
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["agent"]["learning_rate"] == 0.001 and cfg["seed"] == 1


def test_missing_scenario_is_usage_error(tmp_path):
    assert run("train", "--scenario", str(tmp_path / "none.json"), "--out-dir", str(tmp_path)) == 1


def test_bad_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        run("compare", "--scenario", "single.json", "--controller", "sumo")
    assert exc.value.code == 1


def test_malformed_scenario_is_data_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"intersections": [')
    assert run("compare", "--scenario", str(bad)) == 2
    assert run("validate", "--scenario", str(bad)) == 2


def test_validate_reports_asymmetric_neighbors(tmp_path, capsys):
    doc = grid_scenario(2, 2)
    doc["intersections"][0]["neighbors"] = doc["intersections"][0]["neighbors"][:1]
    path = tmp_path / "g.json"
    path.write_text(dumps(doc))
    assert run("validate", "--scenario", str(path)) == 2
    assert "not symmetric" in capsys.readouterr().out
    assert run("validate", "--scenario", "grid4x4.json") == 0


def test_missing_checkpoint_is_data_error(tmp_path):
    args = ["compare", "--scenario", "single.json", "--controller", "movelight", "--horizon", "100"]
    assert run(*args, "--checkpoint", str(tmp_path / "none.npz")) == 2
    assert run(*args) == 1


def test_oversaturated_webster_is_data_error():
    assert run("compare", "--scenario", "single.json", "--controller", "webster", "--demand-scale", "2") == 2


def test_compare_grid_shape_and_determinism(tmp_path, capsys):
    args = ["compare", "--scenario", "single.json", "--controller", "fixed,webster,maxpressure",
            "--horizon", "600"]
    assert run(*args, "--out-dir", str(tmp_path / "a")) == 0
    first = capsys.readouterr().out
    assert run(*args, "--out-dir", str(tmp_path / "b")) == 0
    assert capsys.readouterr().out == first
    assert (tmp_path / "a" / "compare.csv").read_text() == (tmp_path / "b" / "compare.csv").read_text()
    table = [l for l in first.splitlines() if l.startswith("| ") and not l.startswith("| controller")]
    assert [l.split("|")[1].strip() for l in table] == ["fixed", "webster", "maxpressure"]
    assert all(len(l.strip("|").split("|")) == 5 for l in table)
    rows = list(csv.DictReader(open(tmp_path / "a" / "compare.csv")))
    assert len(rows) == 3 * 5


def test_compare_table_recomputable_from_csv(tmp_path, capsys):
    import statistics

    assert run("compare", "--scenario", "single.json", "--controller", "maxpressure", "--seeds", "3,4,5",
               "--horizon", "600", "--out-dir", str(tmp_path)) == 0
    rows = list(csv.DictReader(open(tmp_path / "compare.csv")))
    q = [float(r["avg_queue"]) for r in rows]
    md = (tmp_path / "compare.md").read_text()
    assert f"{statistics.fmean(q):.3f} ± {statistics.stdev(q):.3f}" in md


def test_compare_with_checkpoint_is_read_only(trained, tmp_path):
    out, _ = trained
    ckpt = out / "checkpoint.npz"
    digest = hashlib.sha256(ckpt.read_bytes()).hexdigest()
    assert run("compare", "--scenario", "single.json", "--controller", "movelight,maxpressure",
               "--checkpoint", str(ckpt), "--seeds", "0", "--horizon", "300") == 0
    assert hashlib.sha256(ckpt.read_bytes()).hexdigest() == digest


def test_eval_event_log(tmp_path, capsys):
    log = tmp_path / "events.jsonl"
    assert run("eval", "--scenario", "single.json", "--controller", "random", "--seeds", "2",
               "--horizon", "50", "--event-log", str(log)) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("scenario,controller,seed") and out[1].startswith("single,random,2,")
    records = [json.loads(l) for l in log.read_text().splitlines()]
    assert [r["step"] for r in records] == list(range(50))


def test_neighbor_sweep_rejected_on_single():
    assert run("ablate", "--scenario", "single.json", "--sweep", "neighbors", "--episodes", "1") == 1


def test_neighbor_sweep_on_grid(tmp_path):
    assert run("ablate", "--scenario", "grid4x4.json", "--sweep", "neighbors", "--episodes", "1",
               "--horizon", "60", "--eval-seeds", "1", "--out-dir", str(tmp_path)) == 0
    rows = list(csv.DictReader(open(tmp_path / "ablate_neighbors.csv")))
    assert [int(r["neighbors"]) for r in rows] == [2, 3, 4, 5, 6]


def test_numerical_abort_exit_code(monkeypatch, tmp_path):
    def boom(*a, **k):
        raise NumericalAbort("non-finite TD loss")

    monkeypatch.setattr(cli, "run_training", boom)
    assert run("train", "--scenario", "single.json", "--episodes", "1", "--out-dir", str(tmp_path)) == 3


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "movelight.cli", "validate", "--scenario", "single.json"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("ok: single")
