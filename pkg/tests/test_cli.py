import json

import pytest

from noisycre import cli

TINY = {
    "n_relations": 4,
    "train_per_relation": 30,
    "test_per_relation": 8,
    "input_dim": 8,
    "separation": 8.0,
    "n_tasks": 2,
    "noise_rate": 0.3,
    "seed": 0,
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return path


def test_gen_stream(tmp_path, config_path, monkeypatch):
    monkeypatch.setenv("NOISYCRE_OUTPUT_ROOT", str(tmp_path))
    code = cli.main(["gen-stream", "--config", str(config_path), "--out", "manifest.json"])
    assert code == 0
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["n_tasks"] == 2
    flags = [row[3] for t in doc["tasks"] for row in t["train"]]
    assert sum(flags) == round(0.3 * 4 * 30)


def test_run_and_report(tmp_path, config_path, monkeypatch, capsys):
    monkeypatch.setenv("NOISYCRE_OUTPUT_ROOT", str(tmp_path))
    code = cli.main(["run", "--config", str(config_path), "--out", "run1"])
    assert code == 0
    out = capsys.readouterr().out
    assert "last accuracy" in out
    metrics = tmp_path / "run1" / "metrics.json"
    assert metrics.exists()

    code = cli.main(["report", "--metrics", str(metrics), "--out", str(tmp_path / "rep")])
    assert code == 0
    assert (tmp_path / "rep" / "report.txt").exists()


def test_ablate(tmp_path, config_path, monkeypatch, capsys):
    monkeypatch.setenv("NOISYCRE_OUTPUT_ROOT", str(tmp_path))
    code = cli.main([
        "ablate", "--config", str(config_path),
        "--methods", "nacl,finetune", "--seeds", "0,1", "--out", "abl",
    ])
    assert code == 0
    summary = json.loads((tmp_path / "abl" / "summary.json").read_text())
    assert set(summary) == {"nacl", "finetune"}
    assert (tmp_path / "abl" / "nacl_seed0" / "metrics.json").exists()
    out = capsys.readouterr().out
    assert "finetune" in out


def test_bad_config_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"unknown_knob": 5}))
    code = cli.main(["run", "--config", str(path), "--out", str(tmp_path / "x")])
    assert code == 1
    assert "unknown" in capsys.readouterr().err


def test_missing_config_exit_code(tmp_path, capsys):
    code = cli.main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
    assert code == 1
