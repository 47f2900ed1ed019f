import json
import os
import subprocess
import sys

import pytest

from twograph.cli import main
from twograph.runner import load_config

from conftest import SHIPPED, config_path


def write_config(tmp_path, **overrides):
    cfg = {
        "protocol": "backprop",
        "seed": 0,
        "settings": {"widths": [3, 1], "input_dim": 2, "batch_size": 16},
        "environment": {"kind": "supervised", "teacher": [[1.0, -0.5]]},
        "optimizer": {"lr": 0.05},
        "stop": {"max_rounds": 30, "tol": 1e-9},
        "output_dir": str(tmp_path / "out"),
    }
    cfg.update(overrides)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_configs_validate(name, capsys):
    assert main(["validate", config_path(name)]) == 0
    assert "valid" in capsys.readouterr().out


@pytest.mark.parametrize("name", ["backprop", "vae", "gan", "dac"])
def test_shipped_configs_pass_gradcheck(name, tmp_path):
    out = tmp_path / "gc.json"
    assert main(["gradcheck", config_path(name), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["ok"]


def test_kickback_gradcheck_reports_failure(tmp_path, capsys):
    out = tmp_path / "gc.json"
    assert main(["gradcheck", config_path("kickback"), "--out", str(out)]) == 1
    assert "theta1" in capsys.readouterr().out
    report = json.loads(out.read_text())
    assert not report["ok"] and not report["passed"]["theta1"]


def test_run_writes_outputs(tmp_path):
    out = tmp_path / "run"
    assert main(["run", write_config(tmp_path), "--out", str(out)]) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "round,objective,delta_norm:theta1,delta_norm:theta2"
    assert len(lines) == 31
    params = json.loads((out / "final_params.json").read_text())
    assert set(params) == {"theta1", "theta2"}
    report = json.loads((out / "report.json").read_text())
    assert report["rounds"] == 30 and report["seed"] == 0
    assert not [f for f in os.listdir(out) if f.startswith(".tmp")]


def test_seed_environment_override(tmp_path, monkeypatch):
    cfg = write_config(tmp_path)
    main(["run", cfg, "--out", str(tmp_path / "a")])
    monkeypatch.setenv("TWOGRAPH_SEED", "9")
    assert load_config(cfg)["seed"] == 9
    main(["run", cfg, "--out", str(tmp_path / "b")])
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a != b


def test_max_rounds_override(tmp_path):
    out = tmp_path / "run"
    main(["run", write_config(tmp_path), "--out", str(out), "--max-rounds", "5"])
    assert len((out / "metrics.csv").read_text().splitlines()) == 6


def test_export_dot(tmp_path, capsys):
    out = tmp_path / "g.dot"
    assert main(["export-dot", config_path("gan"), "--which", "response", "--out", str(out)]) == 0
    assert out.read_text().startswith('digraph "gan_response"')
    again = tmp_path / "g2.dot"
    main(["export-dot", config_path("gan"), "--which", "response", "--out", str(again)])
    assert out.read_bytes() == again.read_bytes()


def test_verify_kickback(tmp_path):
    cfg = write_config(
        tmp_path,
        protocol="kickback",
        settings={"widths": [3, 3, 1], "input_dim": 2},
        verify={"trials": 5},
    )
    out = tmp_path / "verify.json"
    assert main(["verify", cfg, "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["ok"] and report["sign_check"]["coherent_trials"] == 5


@pytest.mark.parametrize(
    "overrides, fragment",
    [
        ({"bogus": 1}, "unknown field"),
        ({"protocol": "nope"}, "unknown protocol"),
        ({"seed": -1}, "seed"),
        ({"settings": {"widths": [2, 1], "colour": "red"}}, "bad settings"),
        ({"environment": {"kind": "moon"}}, "environment kind"),
        ({"optimizer": {"lr": -1.0}}, "optimizer"),
        ({"optimizer": {"players": {"ghost": {"lr": 0.1}}}}, "unknown player"),
        ({"stop": {"max_rounds": 0}}, "stop rule"),
    ],
)
def test_bad_config_exits_2(tmp_path, capsys, overrides, fragment):
    assert main(["run", write_config(tmp_path, **overrides)]) == 2
    err = capsys.readouterr().err.strip()
    assert fragment in err
    assert len(err.splitlines()) == 1


def test_missing_and_malformed_config(tmp_path, capsys):
    assert main(["validate", str(tmp_path / "absent.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["validate", str(bad)]) == 2
    assert "not valid JSON" in capsys.readouterr().err


def test_unknown_subcommand_single_line():
    proc = subprocess.run([sys.executable, "-m", "twograph.cli", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert len(proc.stderr.strip().splitlines()) == 1
