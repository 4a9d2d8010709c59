import json
import subprocess
import sys

import pytest

from cascade_match.cli import COMMANDS, main

from conftest import tiny_config

SUBCOMMANDS = ["generate-data", "train-matcher", "annotate", "train-selector", "evaluate",
               "curves", "agreement", "cost", "all"]


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.json"
    path.write_text(json.dumps(tiny_config().to_dict()))
    return path


def _run(capsys, *argv):
    code = main(list(argv))
    err = capsys.readouterr().err.strip().splitlines()
    return code, (json.loads(err[-1]) if err else None)


def test_all_subcommands_registered():
    assert list(COMMANDS) == SUBCOMMANDS
    out = subprocess.run([sys.executable, "-m", "cascade_match", "--help"],
                         capture_output=True, text=True, check=True).stdout
    for name in SUBCOMMANDS:
        assert name in out


def test_unknown_key_is_usage_error(tmp_path, capsys):
    code, err = _run(capsys, "generate-data", "--out", str(tmp_path), "--set", "matcher.nope=1")
    assert code == 2 and err["error"] == "usage" and "matcher.nope" in err["message"]


def test_missing_stage_input(tmp_path, capsys, config_file):
    assert _run(capsys, "generate-data", "--config", str(config_file), "--out", str(tmp_path))[0] == 0
    code, err = _run(capsys, "train-selector", "--config", str(config_file), "--out", str(tmp_path))
    assert code == 3
    assert err["missing"] == "annotations.jsonl" and err["producer"] == "annotate"


def test_staged_run_writes_reports(tmp_path, capsys, config_file):
    base = ["--config", str(config_file), "--out", str(tmp_path)]
    for cmd in SUBCOMMANDS[:-1]:
        assert _run(capsys, cmd, *base)[0] == 0, cmd
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert list(manifest["stages"]) == ["generate_data", "train_matcher", "annotate",
                                        "train_selector", "evaluate", "curves", "agreement", "cost"]
    for name in ("metrics.csv", "curves.csv", "curves.svg", "agreement.json", "cost.json"):
        assert (tmp_path / name).stat().st_size > 0
    rows = json.loads((tmp_path / "metrics.json").read_text())
    assert [r["method"] for r in rows] == ["no-neighbors", "all-neighbors", "cdsm"]
    curves = json.loads((tmp_path / "curves.json").read_text())
    k0 = {r["p_at_1"] for r in curves if r["k"] == 0}
    assert len(k0) == 1  # every method coincides with no neighbors
    cost = json.loads((tmp_path / "cost.json").read_text())
    assert cost["cdsm"] == pytest.approx(cost["n"] * cost["T_s"] + cost["k"] * cost["T_m"])


def test_all_matches_staged_artifacts(tmp_path, capsys, config_file):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run(capsys, "all", "--config", str(config_file), "--out", str(a))[0] == 0
    assert _run(capsys, "all", "--config", str(config_file), "--out", str(b))[0] == 0
    for name in ("matcher.ckpt", "annotations.jsonl", "selector.ckpt", "metrics.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_svg_is_byte_stable(tmp_path, capsys, config_file):
    base = ["--config", str(config_file)]
    for cmd in SUBCOMMANDS[:4]:
        _run(capsys, cmd, *base, "--out", str(tmp_path))
    _run(capsys, "agreement", *base, "--out", str(tmp_path))
    first = (tmp_path / "agreement.svg").read_bytes()
    _run(capsys, "agreement", *base, "--out", str(tmp_path))
    assert (tmp_path / "agreement.svg").read_bytes() == first
