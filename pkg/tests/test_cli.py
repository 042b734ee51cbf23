import copy
import csv

import pytest
import yaml

from kdanomaly.cli import main

from test_runner import TINY


@pytest.fixture
def config(tmp_path):
    raw = copy.deepcopy(TINY)
    raw["output_dir"] = str(tmp_path / "out")
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def test_run_writes_reports(config, tmp_path, capsys):
    assert main(["run", "--config", str(config)]) == 0
    out = tmp_path / "out"
    for name in ("results.csv", "scatter.csv", "correlations.txt"):
        assert (out / name).exists()
    assert "rho(mahalanobis_full_auroc, kd_auroc)" in capsys.readouterr().out
    with open(out / "results.csv") as f:
        assert len(list(csv.DictReader(f))) == 6


def test_stagewise_commands(config, tmp_path):
    out = tmp_path / "staged"
    common = ["--config", str(config), "--out", str(out), "--representation", "rotnet"]
    assert main(["pretrain"] + common) == 0
    assert (out / "checkpoints" / "rotnet.teacher.ckpt").exists()
    assert main(["distill"] + common) == 0
    assert (out / "checkpoints" / "rotnet.student.ckpt").exists()
    assert main(["score"] + common) == 0
    with open(out / "scores.csv") as f:
        rows = list(csv.DictReader(f))
    assert {r["detector"] for r in rows} == {"kd", "mahalanobis_full"}
    assert main(["brittleness"] + common) == 0
    assert (out / "brittleness.csv").read_text().startswith("representation,numerator")


def test_eval_then_report(config, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--config", str(config), "--out", str(out), "--seed", "3"]) == 0
    (out / "scatter.csv").unlink(missing_ok=True)
    assert main(["report", "--out", str(out)]) == 0
    assert (out / "scatter.csv").exists()


def test_exit_codes(config, tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == 6
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump(dict(TINY, detectors=[])))
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["pretrain", "--config", str(config), "--representation", "nope"]) == 2
    assert main(["report", "--out", str(tmp_path / "empty")]) == 6
    corrupt = tmp_path / "corrupt.ckpt"
    corrupt.write_bytes(b"junk")
    raw = dict(TINY, output_dir=str(tmp_path / "x"),
               representations=[{"name": "loaded", "task": "rotnet", "load": str(corrupt)}])
    loaded = tmp_path / "loaded.yaml"
    loaded.write_text(yaml.safe_dump(raw))
    assert main(["run", "--config", str(loaded)]) == 5


def test_argument_errors(config):
    with pytest.raises(SystemExit):
        main(["report"])
    with pytest.raises(SystemExit):
        main(["run", "--config", str(config), "--jobs", "0"])
    with pytest.raises(SystemExit):
        main(["frobnicate"])
