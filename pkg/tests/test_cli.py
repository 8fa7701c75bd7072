import json
import subprocess
import sys

import pytest

from diffest import acceptance, cli
from diffest.acceptance import CriterionResult

CONFIG = {"d": 2, "N": 8, "K": 4, "T": 0.2, "dt": 0.05, "nu": 0.1, "delta": 0.3, "substeps": 2,
          "seed": 1, "initial": {"kind": "gaussian", "scale": 0.5}, "grid": {"L": 12.0, "n": 128}}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(CONFIG))
    return path


def test_simulate_writes_run_and_report(tmp_path, config_file, capsys):
    out = tmp_path / "out"
    code = cli.main(["simulate", "--config", str(config_file), "--out", str(out), "--csv", "--meanfield"])
    assert code == cli.EXIT_OK
    assert "nu_hat=" in capsys.readouterr().out
    assert len(list(out.glob("*.run"))) == 1 and len(list(out.glob("*.csv"))) == 1
    report = json.loads(next(out.glob("*.report.json")).read_text())
    assert report["I2"] is not None and report["nu_KN"] is not None


def test_simulate_master_seed_changes_run(tmp_path, config_file):
    cli.main(["simulate", "--config", str(config_file), "--out", str(tmp_path / "a")])
    cli.main(["simulate", "--config", str(config_file), "--out", str(tmp_path / "b"), "--master-seed", "5"])
    a = json.loads(next((tmp_path / "a").glob("*.report.json")).read_text())
    b = json.loads(next((tmp_path / "b").glob("*.report.json")).read_text())
    assert a["seed"] == 1 and b["seed"] != 1 and a["nu_hat"] != b["nu_hat"]


def test_environment_output_dir(tmp_path, config_file, monkeypatch):
    monkeypatch.setenv(cli.ENV_OUT, str(tmp_path / "env"))
    assert cli.main(["simulate", "--config", str(config_file)]) == 0
    assert len(list((tmp_path / "env").glob("*.run"))) == 1


def test_sweep_and_tables(tmp_path, capsys):
    base = dict(CONFIG)
    del base["grid"]
    plan = {"base": base, "axes": {"dt": [0.1, 0.05, 0.025]}, "replicates": 2}
    (tmp_path / "plan.json").write_text(json.dumps(plan))
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--config", str(tmp_path / "plan.json"), "--out", str(out)]) == 0
    assert "6 runs (6 computed, 0 failed)" in capsys.readouterr().out
    assert cli.main(["sweep", "--config", str(tmp_path / "plan.json"), "--out", str(out)]) == 0
    assert "(0 computed" in capsys.readouterr().out
    assert cli.main(["tables", "--out", str(out), "--group", "dt"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("dt,count,")
    assert "# slope[err_median]" in text
    assert (out / "table_dt.csv").exists() and (out / "table_dt.fits.json").exists()


def test_verify_single_criterion(tmp_path, capsys):
    out = tmp_path / "v"
    assert cli.main(["verify", "--criteria", "10", "--out", str(out)]) == cli.EXIT_OK
    assert "criterion 10 [PASS]" in capsys.readouterr().out
    payload = json.loads((out / "acceptance.json").read_text())
    assert [p["number"] for p in payload] == [10] and payload[0]["passed"]


def test_verify_failed_check_exit_code(tmp_path, monkeypatch):
    def failing(ctx=None):
        return CriterionResult(42, "always fails", False, "forced")
    failing.number, failing.title = 42, "always fails"
    monkeypatch.setattr(acceptance, "CRITERIA", (failing,))
    assert cli.main(["verify", "--criteria", "42", "--out", str(tmp_path)]) == cli.EXIT_FAILED_CHECK


@pytest.mark.parametrize("argv", [
    ["simulate", "--config", "/nonexistent.json"],
    ["verify", "--criteria", "99"],
    ["verify", "--criteria", "one"],
    ["verify", "--master-seed", "-3"],
    ["sweep", "--config", "/nonexistent.json", "--parallel", "0"],
])
def test_error_exit_code(argv, tmp_path):
    assert cli.main(argv + ["--out", str(tmp_path)]) == cli.EXIT_ERROR


def test_invalid_config_exit_code(tmp_path):
    bad = dict(CONFIG, K=100)
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert cli.main(["simulate", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 1
    (tmp_path / "broken.json").write_text("{")
    assert cli.main(["simulate", "--config", str(tmp_path / "broken.json"), "--out", str(tmp_path)]) == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "diffest", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for verb in ("simulate", "sweep", "verify", "tables"):
        assert verb in proc.stdout
