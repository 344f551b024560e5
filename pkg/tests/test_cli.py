import json

import pytest

from conftest import SMOKE, cli_pipeline as pipeline
from gateadd.cli import EXIT_CONFIG, EXIT_DATA, EXIT_IO, run


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    return root, pipeline(root)


def test_gen_data_artifacts(smoke):
    _, d = smoke
    names = {p.name for p in d["data"].iterdir()}
    assert {"data.csv", "data.meta.json", "config.json"} <= names
    meta = json.loads((d["data"] / "data.meta.json").read_text())
    assert meta["correlations"]["t1"]["s1"] != 0


def test_run_directories(smoke):
    _, d = smoke
    for k in ("pre", "add", "van", "single"):
        assert (d[k] / "checkpoint" / "manifest.json").exists()
        assert (d[k] / "train.log.jsonl").read_text().count("\n") == 3
        assert json.loads((d[k] / "config.json").read_text())["train"]["epochs"] == 3


def test_add_task_reports_unchanged_frozen_hash(smoke, capsys, tmp_path):
    _, d = smoke
    rc = run(["add-task", "--config", SMOKE, "--data", str(d["data"]), "--checkpoint", str(d["pre"]),
              "--out", str(tmp_path / "again"), "--epochs", "1"])
    assert rc == 0
    assert "frozen parameters unchanged" in capsys.readouterr().out
    info = json.loads((tmp_path / "again" / "run.json").read_text())
    assert info["frozen_digest_before"] == info["frozen_digest_after"]


def test_evaluate_outputs(smoke):
    _, d = smoke
    m = json.loads((d["add"] / "metrics.json").read_text())
    assert set(m["tasks"]) == {"t1"}
    assert "t1" in m["recovery_rate"] and "t1" in m["max_source_correlation"]
    header = (smoke[0] / "report" / "report.csv").read_text().splitlines()[0]
    assert header.startswith("run,task,n,rmse")


def test_reruns_give_identical_metric_files(smoke, tmp_path):
    root, d = smoke
    d2 = pipeline(tmp_path)
    for k in ("add", "single"):
        assert (d[k] / "metrics.csv").read_bytes() == (d2[k] / "metrics.csv").read_bytes()


def test_out_root_env_default(tmp_path, monkeypatch):
    monkeypatch.setenv("GATEADD_OUT_ROOT", str(tmp_path))
    assert run(["gen-data", "--config", SMOKE]) == 0
    assert (tmp_path / "gen-data" / "data.csv").exists()


def test_exit_codes(smoke, tmp_path, capsys):
    assert run(["pretrain", "--bogus"]) == EXIT_CONFIG
    assert run([]) == EXIT_CONFIG
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nlearnig_rate = 1\n")
    assert run(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    broken = tmp_path / "broken.toml"
    broken.write_text("[train\n")
    assert run(["gen-data", "--config", str(broken), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    data = tmp_path / "d"
    data.mkdir()
    (data / "data.csv").write_text("f_0,y_a\n")
    assert run(["train-single", "--data", str(data), "--task", "a", "--out", str(tmp_path / "s")]) == EXIT_DATA
    assert run(["add-task", "--data", str(smoke[1]["data"]), "--checkpoint", str(tmp_path / "none"),
                "--out", str(tmp_path / "a")]) == EXIT_IO
    err = capsys.readouterr().err
    assert '"error": "data"' in err and '"error": "io"' in err
