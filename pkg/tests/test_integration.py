"""Integration tests driving the command-line surface end to end.

These tests are run automatically by:

    carechain test [--output-dir DIR]

They can also be run directly with pytest:

    pytest tests/test_integration.py -v
    pytest tests/test_integration.py -v --output-dir ./my_output
"""

import json
import os
import sys

import pandas as pd
import pytest

from carechain import main as cli
from carechain.io.exporters import read_chain
from carechain.ledger import verify_chain


def run_cli(monkeypatch, *argv):
    monkeypatch.setattr(sys, "argv", ["carechain", *argv])
    with pytest.raises(SystemExit) as exc:
        cli.main()
    return exc.value.code


# ---------------------------------------------------------------------------
# Shared fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def config_path(small_config, output_dir):
    path = os.path.join(output_dir, "small_scenario.json")
    with open(path, "w", encoding="utf-8") as f:
        f.write(small_config.model_dump_json(indent=2))
    return path


@pytest.fixture(scope="module")
def run_dir(config_path, output_dir):
    """A completed `carechain run` on the small scenario."""
    out = os.path.join(output_dir, "cli_run")
    mp = pytest.MonkeyPatch()
    try:
        code = run_cli(mp, "run", config_path, "--output-dir", out, "--trace", "--log-level", "WARNING")
    finally:
        mp.undo()
    assert code == cli.EXIT_OK
    return out


# ---------------------------------------------------------------------------
# run / verify-chain
# ---------------------------------------------------------------------------


def test_run_writes_every_artifact(run_dir):
    for name in ("metrics.json", "metrics.csv", "energy.csv", "decisions.csv", "chain.bin", "chain.json",
                 "trace.ndjson"):
        assert os.path.exists(os.path.join(run_dir, name)), name
    with open(os.path.join(run_dir, "metrics.json"), encoding="utf-8") as f:
        metrics = json.load(f)
    assert metrics["architecture"] == "proposed"
    assert metrics["access"]["violations"] == 0
    with open(os.path.join(run_dir, "chain.json"), encoding="utf-8") as f:
        assert len(json.load(f)["blocks"]) == metrics["blocks"]


def test_verify_chain_accepts_the_export(run_dir, monkeypatch, capsys):
    code = run_cli(monkeypatch, "verify-chain", os.path.join(run_dir, "chain.bin"))
    assert code == cli.EXIT_OK
    verdict = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert verdict["valid"] and verdict["first_invalid"] is None
    assert verdict["blocks"] == len(read_chain(os.path.join(run_dir, "chain.bin")))


def test_verify_chain_flags_a_tampered_export(run_dir, tmp_path, monkeypatch):
    data = bytearray(open(os.path.join(run_dir, "chain.bin"), "rb").read())
    data[-1] ^= 0xFF
    tampered = tmp_path / "tampered.bin"
    tampered.write_bytes(bytes(data))
    assert run_cli(monkeypatch, "verify-chain", str(tampered)) == cli.EXIT_VIOLATION


def test_verify_chain_missing_file(tmp_path, monkeypatch):
    assert run_cli(monkeypatch, "verify-chain", str(tmp_path / "nope.bin")) == cli.EXIT_CONFIG


def test_exported_chain_decodes_to_a_valid_chain(run_dir):
    assert verify_chain(read_chain(os.path.join(run_dir, "chain.bin"))) is None


# ---------------------------------------------------------------------------
# Configuration errors
# ---------------------------------------------------------------------------


def test_invalid_config_exits_with_config_error(tmp_path, monkeypatch):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"patients": -1}), encoding="utf-8")
    assert run_cli(monkeypatch, "run", str(bad), "--output-dir", str(tmp_path / "out")) == cli.EXIT_CONFIG
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    assert run_cli(monkeypatch, "run", str(broken), "--output-dir", str(tmp_path / "out")) == cli.EXIT_CONFIG
    assert run_cli(monkeypatch, "run", "missing.json", "--output-dir", str(tmp_path / "out")) == cli.EXIT_CONFIG


def test_invalid_override_exits_with_config_error(config_path, tmp_path, monkeypatch):
    code = run_cli(monkeypatch, "run", config_path, "--patients", "-3", "--output-dir", str(tmp_path))
    assert code == cli.EXIT_CONFIG


def test_attack_eval_rejects_a_bad_grid(config_path, monkeypatch):
    assert run_cli(monkeypatch, "attack-eval", config_path, "--eps", "off,abc") == cli.EXIT_CONFIG


# ---------------------------------------------------------------------------
# Other commands
# ---------------------------------------------------------------------------


def test_generate_dumps_the_workload(config_path, small_config, output_dir, monkeypatch):
    out = os.path.join(output_dir, "cli_generate")
    assert run_cli(monkeypatch, "generate", "--config", config_path, "--output-dir", out) == cli.EXIT_OK
    cohort = pd.read_csv(os.path.join(out, "cohort.csv"))
    assert len(cohort) == small_config.patients
    assert os.path.getsize(os.path.join(out, "vitals.csv")) > 0
    assert os.path.exists(os.path.join(out, "injections.csv"))


def test_throughput_command(config_path, output_dir, monkeypatch):
    out = os.path.join(output_dir, "cli_throughput")
    code = run_cli(monkeypatch, "throughput", config_path, "--offered", "20", "--output-dir", out)
    assert code == cli.EXIT_OK
    row = pd.read_csv(os.path.join(out, "throughput.csv")).iloc[0]
    assert row["offered_tps"] == 20.0 and row["committed"] == row["submitted"]


def test_attack_eval_command(config_path, output_dir, monkeypatch):
    out = os.path.join(output_dir, "cli_attack")
    code = run_cli(monkeypatch, "attack-eval", config_path, "--eps", "off,1", "--seeds", "2", "--output-dir", out)
    assert code in (cli.EXIT_OK, cli.EXIT_VIOLATION)
    df = pd.read_csv(os.path.join(out, "attack.csv"))
    assert list(df["epsilon"].astype(str)) == ["off", "1"]
