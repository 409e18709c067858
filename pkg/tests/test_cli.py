from __future__ import annotations

import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from slagfib.cli import (EXIT_CERTIFICATE, EXIT_CONFIG, EXIT_EMBEDDING, EXIT_OK, EXIT_SOLVER, EXIT_VERIFICATION,
                         main)
from slagfib.config import ConfigError, parse_config

SMALL1 = {"name": "small1", "n": 1, "epsilon": 0.01, "seed": 3, "cutoff": 4,
          "lattice": {"type": "cubic", "scale": 6.283185307179586},
          "grid": {"count": 5, "half_width": 1.0},
          "certificate": {"probes": 8, "samples": 3, "sigma_samples": 2},
          "verify": {"mc_samples": 100000, "fibers": 2, "radius_fractions": [0.5, 1.0]}}


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def run(tmp_path, command, cfg, *extra):
    return main([command, "--config", str(write(tmp_path, cfg)), "--out", str(tmp_path / "out"), *extra])


def test_exit_codes_distinct():
    codes = [EXIT_OK, EXIT_CONFIG, EXIT_CERTIFICATE, EXIT_SOLVER, EXIT_EMBEDDING, EXIT_VERIFICATION]
    assert len(set(codes)) == len(codes) and EXIT_OK == 0


def test_full_pipeline_n1(tmp_path):
    for command in ("generate", "certify", "solve", "fibrate", "verify", "report"):
        assert run(tmp_path, command, SMALL1) == EXIT_OK, command
    out = tmp_path / "out"
    for suffix in (".structure", ".certificate", ".section", ".fibration", ".csv", ".volume.csv",
                   ".injectivity.csv", ".collapsing.csv", ".bishop_gromov.csv"):
        assert (out / f"small1{suffix}").exists(), suffix
    summary = json.loads((out / "summary.json").read_text())
    assert summary["certificate"]["hypotheses_ok"] is True
    assert set(summary["commands"]) >= {"generate", "certify", "solve", "fibrate", "verify"}
    rows = list(csv.DictReader((out / "small1.csv").open()))
    assert len(rows) == 5 and all(float(r["residual_direct"]) <= 1e-8 for r in rows)
    inj = list(csv.DictReader((out / "small1.injectivity.csv").open()))
    assert all(r["holds"] == "True" for r in inj)


def test_generate_is_byte_identical(tmp_path):
    assert run(tmp_path, "generate", SMALL1) == EXIT_OK
    first = (tmp_path / "out" / "small1.structure").read_bytes()
    assert run(tmp_path, "generate", SMALL1) == EXIT_OK
    assert (tmp_path / "out" / "small1.structure").read_bytes() == first
    assert run(tmp_path, "generate", SMALL1, "--seed-override", "4") == EXIT_OK
    assert (tmp_path / "out" / "small1.structure").read_bytes() != first


def test_fibration_deterministic_across_threads(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    assert run(a, "fibrate", SMALL1) == EXIT_OK
    assert run(b, "fibrate", SMALL1, "--threads", "3") == EXIT_OK
    assert (a / "out" / "small1.fibration").read_bytes() == (b / "out" / "small1.fibration").read_bytes()


@pytest.mark.parametrize("patch", [
    {"n": 7},
    {"unknown_key": 1},
    {"lattice": {"type": "cubic", "scale": -1.0}},
    {"certificate": {"delta": 0.5, "delta0": 0.4}},
    {"verify": {"collapsing_scales": [0.5, 1.0]}},
    {"lattice": {"type": "hexagonal"}},
    {"solver": {"y": [0.0, 0.0]}},
])
def test_bad_configs_exit_2(tmp_path, patch, capsys):
    cfg = {**SMALL1, **patch}
    assert run(tmp_path, "generate", cfg) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_required_field_named():
    with pytest.raises(ConfigError, match="epsilon"):
        parse_config({"n": 1, "seed": 0})


def test_not_json_is_config_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert main(["generate", "--config", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_bad_seed_override(tmp_path):
    assert run(tmp_path, "generate", SMALL1, "--seed-override", str(2**64)) == EXIT_CONFIG


def test_degenerate_structure_refused(tmp_path):
    assert run(tmp_path, "generate", {**SMALL1, "epsilon": 50.0}) == EXIT_CONFIG


def test_large_epsilon_refuses_certificate(tmp_path, capsys):
    cfg = {**SMALL1, "n": 2, "epsilon": 0.8, "lattice": {"type": "cubic", "scale": 6.283185307179586}}
    assert run(tmp_path, "solve", cfg) == EXIT_CERTIFICATE
    assert "margins" in capsys.readouterr().err
    assert not (tmp_path / "out" / "small1.section").exists()


def test_grid_outside_ball_is_config_error(tmp_path):
    cfg = {**SMALL1, "grid": {"count": 3, "half_width": 1.6}}
    assert run(tmp_path, "fibrate", cfg) == EXIT_CONFIG


def test_tight_jacobian_tolerance_fails_embedding(tmp_path):
    cfg = {**SMALL1, "tolerances": {"jacobian": 1.5}}
    assert run(tmp_path, "fibrate", cfg) == EXIT_EMBEDDING


def test_verify_without_fibration(tmp_path):
    assert run(tmp_path, "verify", SMALL1) == EXIT_CONFIG


def test_console_entry_point(tmp_path):
    cfg = write(tmp_path, SMALL1)
    proc = subprocess.run([sys.executable, "-m", "slagfib.cli", "generate", "--config", str(cfg),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["status"] == "ok"


def test_missing_structure_file(tmp_path):
    assert run(tmp_path, "certify", SMALL1, "--structure", str(tmp_path / "nope.structure")) == EXIT_CONFIG


def test_baseline_matches_committed_regression(tmp_path):
    root = Path(__file__).resolve().parents[1]
    expected = json.loads((root / "tests" / "data" / "baseline_regression.json").read_text())
    cfg = root / expected["config"]
    out = tmp_path / "out"
    assert main(["solve", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    cert = json.loads((out / "baseline.certificate").read_text())
    for key, value in expected["certificate"].items():
        if isinstance(value, float):
            assert cert[key] == pytest.approx(value, rel=1e-8), key
        else:
            assert cert[key] == value, key
    solve = json.loads((out / "summary.json").read_text())["commands"]["solve"]
    assert solve["y"] == expected["solve"]["y"]
    assert solve["sigma_norm"] == pytest.approx(expected["solve"]["sigma_norm"], rel=1e-8)
    assert solve["log"]["iterations"] == expected["solve"]["iterations"]
    assert solve["residual_direct"] <= 1e-10


def test_committed_large_epsilon_config_refused(tmp_path):
    root = Path(__file__).resolve().parents[1]
    cfg = json.loads((root / "configs" / "large_eps.json").read_text())
    cfg["certificate"] = {"probes": 16, "samples": 3, "sigma_samples": 2}
    assert run(tmp_path, "certify", cfg) == EXIT_CERTIFICATE
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["commands"]["certify"]["certificate"]["hypotheses_ok"] is False
