import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from damlab.cli import main
from damlab.config import DEFAULT_CONFIG, from_dict

FAST = {"dam": {"epochs": 4}, "merge": {"adamerging": {"steps": 3}}}


@pytest.fixture
def conf(tmp_path, monkeypatch):
    monkeypatch.setenv("DAM_OUTPUT_DIR", str(tmp_path / "out"))
    p = tmp_path / "exp.json"
    p.write_text(json.dumps(FAST))
    return str(p), from_dict(FAST).hash16, tmp_path / "out"


def _prepare(c):
    for cmd in (["gen-data"], ["pretrain"], ["finetune"]):
        assert main(cmd + ["--config", c]) == 0


def test_pipeline_smoke(conf, capsys):
    c, h, out = conf
    _prepare(c)
    assert main(["merge", "--config", c, "--method", "average"]) == 0
    rep = json.loads((out / f"report-average-{h}.json").read_text())
    assert 0.0 <= rep["aggregates"]["acc_avg"] <= 1.0
    assert rep["config_hash"].startswith(h)
    assert all(h in name for name in os.listdir(out))

    assert main(["dam", "--config", c, "--alpha-sweep", "0,1"]) == 0
    for part in ("mask", "coefficients", "perturbations", "merged"):
        assert (out / f"dam-alpha1-{part}-{h}.dam").exists()
    assert (out / f"dam-alpha0-trace-{h}.json").exists()
    rows = json.loads((out / f"pareto-{h}.json").read_text())
    assert [r["alpha"] for r in rows] == [0.0, 1.0]

    assert main(["eval", "--config", c, "--model", str(out / f"merged-average-{h}.dam")]) == 0
    assert (out / f"report-eval-merged-average-{h}.json").exists()
    assert main(["report", "--config", c]) == 0
    assert "average" in capsys.readouterr().out


def test_rerun_is_byte_identical(conf):
    c, h, out = conf
    _prepare(c)
    assert main(["merge", "--config", c, "--method", "ties"]) == 0
    before = {n: (out / n).read_bytes() for n in os.listdir(out)}
    _prepare(c)
    assert main(["merge", "--config", c, "--method", "ties"]) == 0
    after = {n: (out / n).read_bytes() for n in os.listdir(out)}
    assert before == after


def test_merge_overrides_get_their_own_hash(conf):
    c, h, out = conf
    _prepare(c)
    assert main(["merge", "--config", c, "--method", "task_arithmetic", "--lambda", "0.5"]) == 0
    h2 = from_dict(dict(FAST, merge={**FAST["merge"], "lambda": 0.5, "ties": {"lambda": 0.5}})).hash16
    assert h2 != h and (out / f"report-task_arithmetic-{h2}.json").exists()


def test_negative_lr_exit_1(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"trainer": {"finetune": {"learning_rate": -1}}}))
    assert main(["pretrain", "--config", str(p)]) == 1
    assert "trainer.finetune.learning_rate" in capsys.readouterr().err


def test_missing_prerequisite_exit_2(conf, capsys):
    c, _, _ = conf
    assert main(["merge", "--config", c, "--method", "average"]) == 2
    assert "damlab pretrain" in capsys.readouterr().err
    assert main(["pretrain", "--config", c]) == 0
    assert main(["finetune", "--config", c, "--task", "task0"]) == 0
    capsys.readouterr()
    assert main(["merge", "--config", c, "--method", "average"]) == 2
    assert "damlab finetune" in capsys.readouterr().err


def test_bad_arguments_exit_1(conf):
    c, _, _ = conf
    assert main(["merge", "--config", c, "--method", "nope"]) == 1
    assert main(["dam", "--config", c, "--alpha-sweep", "1"]) == 1
    assert main(["finetune", "--config", c, "--task", "ghost"]) == 1
    assert main(["dam", "--config", c, "--alpha", "-1"]) == 1
    assert main(["no-such-command"]) == 1


def test_module_entry_point_help():
    r = subprocess.run([sys.executable, "-m", "damlab", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "repro" in r.stdout
