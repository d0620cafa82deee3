from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from agentcheck.cli import main
from agentcheck.metrics import RunSummary, suite_metrics
from agentcheck.scenarios import fault_scenarios, fixture_suite, golden_scenarios
from agentcheck.suite import (
    ENV_PREFIX, EXIT_BUGS, EXIT_ENV_FAILURE, EXIT_FRAMEWORK_ERROR, EXIT_PASS, EXIT_USAGE, ConfigError, SuiteConfig,
    apply_env_overrides, find_run_dirs, run_suite, write_suite,
)

from report_fixture import build, write_run_dirs


@pytest.fixture(scope="module")
def golden_suite(tmp_path_factory):
    return write_suite(tmp_path_factory.mktemp("golden"), golden_scenarios().values())


@pytest.fixture(scope="module")
def fault_suite(tmp_path_factory):
    return write_suite(tmp_path_factory.mktemp("faults"), fault_scenarios(counts=(None,))[:2])


@pytest.mark.parametrize("feature,code", [
    ("backup", EXIT_BUGS), ("backup-nominal", EXIT_PASS), ("reply-david", EXIT_BUGS), ("hr-idle", EXIT_PASS),
])
def test_run_exit_codes(golden_suite, tmp_path, capsys, feature, code):
    rc = main(["run", "--config", str(golden_suite.config_path), "--feature", feature, "--out", str(tmp_path)])
    assert rc == code
    assert (tmp_path / feature / "verdict.json").exists()
    assert feature in capsys.readouterr().out


def test_env_failure_exit_code(fault_suite, tmp_path):
    fid = fault_suite.feature_ids[0]
    assert main(["run", "--config", str(fault_suite.config_path), "--feature", fid, "--out", str(tmp_path)]) \
        == EXIT_ENV_FAILURE


def test_unknown_feature_is_usage_error(golden_suite, tmp_path):
    assert main(["run", "--config", str(golden_suite.config_path), "--feature", "nope",
                 "--out", str(tmp_path)]) == EXIT_USAGE


def test_missing_config_is_usage_error(tmp_path):
    assert main(["suite", "--config", str(tmp_path / "absent.json")]) == EXIT_USAGE


def test_empty_features_file(tmp_path, capsys):
    (tmp_path / "features.json").write_text("[]")
    (tmp_path / "suite.json").write_text(json.dumps({"features": "features.json", "agents": {}}))
    assert main(["suite", "--config", str(tmp_path / "suite.json")]) == EXIT_USAGE
    assert "no features" in capsys.readouterr().err


def test_missing_transcript_is_framework_error(golden_suite, tmp_path):
    cfg = SuiteConfig.load(golden_suite.config_path, environ={})
    (Path(cfg.provider["transcript_dir"]) / "backup.json").rename(tmp_path / "moved.json")
    try:
        rc = main(["run", "--config", str(golden_suite.config_path), "--feature", "backup", "--out", str(tmp_path)])
        assert rc == EXIT_FRAMEWORK_ERROR
        assert "no transcript" in (tmp_path / "backup" / "error.txt").read_text()
    finally:
        (tmp_path / "moved.json").rename(Path(cfg.provider["transcript_dir"]) / "backup.json")


def test_suite_command_writes_report(golden_suite, tmp_path, capsys):
    assert main(["suite", "--config", str(golden_suite.config_path), "--out", str(tmp_path), "--jobs", "3"]) == 0
    summary = json.loads((tmp_path / "suite.json").read_text())
    assert [s["feature"] for s in summary] == golden_suite.feature_ids
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["outcomes"] == {"Bugs": 2, "Pass": 4}
    assert "Outcomes: Bugs=2, Pass=4" in capsys.readouterr().out
    # Aggregation recomputed from the written run directories agrees.
    again = suite_metrics([RunSummary.load(d) for d in find_run_dirs([tmp_path])], [], None).to_dict()
    assert again["outcomes"] == report["outcomes"] and again["total"]["steps"] == report["total"]["steps"]


def test_ninety_nine_feature_suite(tmp_path):
    fx = write_suite(tmp_path / "s99", fixture_suite(99))
    cfg = SuiteConfig.load(fx.config_path, environ={})
    results = run_suite(cfg, out=tmp_path / "runs", jobs=4)
    assert len(results) == 99 and not [r for r in results if r.error]
    found = {r.feature_id: len(r.record.verdict.bugs) for r in results}
    assert found == fx.expected_bugs
    assert sum(found.values()) == 28
    assert {r.exit_code for r in results} == {EXIT_PASS, EXIT_BUGS}


def test_env_overrides(golden_suite, tmp_path):
    raw = apply_env_overrides({"seed": 0}, {f"{ENV_PREFIX}SEED": "5", f"{ENV_PREFIX}MAX_RETRIES": "7",
                                            f"{ENV_PREFIX}TRANSCRIPT_DIR": "/x"})
    assert raw["seed"] == 5 and raw["max_retries"] == 7 and raw["provider"]["transcript_dir"] == "/x"
    with pytest.raises(ConfigError):
        apply_env_overrides({}, {f"{ENV_PREFIX}SEED": "many"})
    cfg = SuiteConfig.load(golden_suite.config_path, environ={f"{ENV_PREFIX}OUT": str(tmp_path / "o")})
    assert cfg.out == tmp_path / "o"


def test_duplicate_feature_ids_rejected(tmp_path):
    sc = golden_scenarios()["backup"]
    with pytest.raises(ConfigError):
        SuiteConfig.load(write_suite(tmp_path, [sc, sc], pin_digests=False).config_path, environ={})


# -- report --------------------------------------------------------------

def test_report_reproduces_reference_tables(tmp_path, capsys):
    runs, ann = build()
    write_run_dirs(runs, tmp_path / "runs")
    annotations = tmp_path / "ann.jsonl"
    annotations.write_text("".join(json.dumps(a) + "\n" for a in ann))
    out_json = tmp_path / "report.json"
    assert main(["report", str(tmp_path / "runs"), "--annotations", str(annotations), "--json", str(out_json)]) == 0
    text = capsys.readouterr().out
    assert "96.0% (1551/1615)" in text
    total = json.loads(out_json.read_text())["total"]["bugs"]
    assert (total["precision"], total["recall"], total["F1"], total["PSR"]) == ("0.92", "0.86", "0.89", "100.0%")


def test_report_without_runs(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 0
    assert "Total" in capsys.readouterr().out


def test_report_missing_annotation_file(tmp_path):
    assert main(["report", str(tmp_path), "--annotations", str(tmp_path / "none.jsonl")]) == EXIT_USAGE


def test_report_bad_annotation_line(tmp_path, capsys):
    (tmp_path / "a.jsonl").write_text('{"type": "step"}\nnot json\n')
    assert main(["report", str(tmp_path), "--annotations", str(tmp_path / "a.jsonl")]) == EXIT_FRAMEWORK_ERROR
    assert "line" in capsys.readouterr().err


def test_fixtures_command_and_console_entry(tmp_path):
    assert main(["fixtures", str(tmp_path / "g"), "--set", "golden"]) == 0
    proc = subprocess.run([sys.executable, "-m", "agentcheck", "run", "--config", str(tmp_path / "g" / "suite.json"),
                           "--feature", "backup", "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == EXIT_BUGS, proc.stderr
