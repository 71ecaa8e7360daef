from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from flowaudit.cli import (EXIT_CONFIG, EXIT_INPUT, EXIT_OK, STAGES, ConfigError, load_config,
                           main)

ARTIFACTS = ["flows.jsonl", "labels.jsonl", "verdicts.jsonl", "purposes.jsonl", "report.csv",
             "report.md", "verdict_histogram.json", "transactions.jsonl", "purpose_tallies.json"]
TABLE_HISTOGRAM = {"clear": 1, "vague": 2, "omitted": 3, "ambiguous": 2, "incorrect": 2}


def run(config: Path, out: Path, *extra: str) -> int:
    return main(["run", "--config", str(config), "--output-dir", str(out), *extra])


def snapshot(out: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


@pytest.fixture
def config(demo_dir) -> Path:
    return demo_dir / "config.yaml"


def test_full_run_writes_everything(config, tmp_path):
    assert run(config, tmp_path) == EXIT_OK
    assert sorted(p.name for p in tmp_path.iterdir()) == sorted(ARTIFACTS)
    assert json.loads((tmp_path / "verdict_histogram.json").read_text()) == TABLE_HISTOGRAM


def test_run_is_idempotent_and_matches_stages(config, tmp_path):
    assert run(config, tmp_path / "a") == EXIT_OK
    assert run(config, tmp_path / "a") == EXIT_OK
    assert run(config, tmp_path / "b") == EXIT_OK
    for stage in STAGES:
        assert main([stage, "--config", str(config), "--output-dir", str(tmp_path / "c")]) == EXIT_OK
    assert snapshot(tmp_path / "a") == snapshot(tmp_path / "b") == snapshot(tmp_path / "c")


def test_reference_mode_never_lowers_consistency(config, tmp_path):
    assert run(config, tmp_path / "plain") == EXIT_OK
    assert run(config, tmp_path / "ref", "--mode", "reference-policies") == EXIT_OK

    def consistent(d):
        return sum(json.loads(line)["consistent"] for line in (d / "verdicts.jsonl").open())
    assert consistent(tmp_path / "ref") > consistent(tmp_path / "plain") == 3


def test_report_format_flag(config, tmp_path):
    assert run(config, tmp_path, "--report-format", "md") == EXIT_OK
    assert (tmp_path / "report.md").exists() and not (tmp_path / "report.csv").exists()


def test_missing_rules_file_exit_2(config, tmp_path, monkeypatch):
    monkeypatch.setenv("FLOWAUDIT_RULES", str(tmp_path / "nope.yaml"))
    assert run(config, tmp_path / "out") == EXIT_CONFIG


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("capturez: [x]\n")
    assert main(["run", "--config", str(cfg)]) == EXIT_CONFIG
    assert "capturez" in capsys.readouterr().err


def test_bad_capture_exit_3(tmp_path, capsys):
    (tmp_path / "bad.pcapng").write_bytes(b"\x0a\x0d\x0d\x0a" + b"\xff" * 20)
    cfg = tmp_path / "c.yaml"
    cfg.write_text("captures: [bad.pcapng]\noutput_dir: out\n")
    assert main(["run", "--config", str(cfg)]) == EXIT_INPUT
    assert "stage ingest" in capsys.readouterr().err


def test_stage_without_previous_artifact_exit_3(config, tmp_path):
    assert main(["check", "--config", str(config), "--output-dir", str(tmp_path)]) == EXIT_INPUT


def test_config_paths_and_env(tmp_path):
    cfg = tmp_path / "sub" / "c.yaml"
    cfg.parent.mkdir()
    cfg.write_text("captures: [a.pcapng]\nblocklists: {x: lists/x.txt}\nfirst_match_only: yes\n")
    loaded = load_config(cfg, environ={"FLOWAUDIT_AUTO_INCLUDE": "oculus, unity",
                                       "FLOWAUDIT_FIRST_MATCH_ONLY": "false"})
    assert loaded.captures == [cfg.parent / "a.pcapng"]
    assert loaded.blocklists == {"x": cfg.parent / "lists" / "x.txt"}
    assert loaded.auto_include == ["oculus", "unity"]
    assert loaded.first_match_only is False
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml", environ={})


def test_sigscan_subcommand(tmp_path, capsys):
    blob = bytes(range(64))
    (tmp_path / "b.bin").write_bytes(blob)
    assert main(["sigscan", "extract", str(tmp_path / "b.bin"), "--offset", "8"]) == 0
    assert json.loads(capsys.readouterr().out)["preamble"] == "04 05 06 07"


def test_console_script_entry(config, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "flowaudit.cli", "run", "--config", str(config),
                           "--output-dir", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
