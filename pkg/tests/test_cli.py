import json
import os

import pytest

from dnlskam.cli import main
from dnlskam.config import ConfigError, parse_config


def write_cfg(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def base_cfg(**over):
    doc = {
        "schema_version": 1,
        "sites": [-1, 2],
        "mode_cutoff": 3,
        "phase": {"s0": 0.4, "r0": 1e-6, "p": 2.0, "q": 1.0, "a_exp": 0.05},
        "budget": {"degree_max": 4, "fourier_max": 6},
        "schedule": {"alpha0": 1e-12, "tau": 5.0, "beta": "1/13",
                     "bsigma_c": 1e-66, "max_steps": 2},
        "grid": {"auto_count": 2},
        "enum": {"k_max": 6, "mode_max": 8},
        "seed": 7,
    }
    doc.update(over)
    return doc


def test_config_validation_diagnostics():
    with pytest.raises(ConfigError) as e:
        parse_config(base_cfg(extra_key=1))
    assert e.value.name == "unknown_key"
    with pytest.raises(ConfigError) as e:
        parse_config(base_cfg(schema_version=99))
    assert e.value.name == "schema_version"
    bad = base_cfg()
    bad["schedule"]["tau"] = 3.0
    with pytest.raises(ConfigError) as e:
        parse_config(bad)
    assert e.value.name == "tau_too_small"
    bad = base_cfg()
    bad["phase"]["q"] = 0.5
    with pytest.raises(ConfigError) as e:
        parse_config(bad)
    assert e.value.name == "pq_gap"
    bad = base_cfg()
    bad["phase"]["s0"] = 1.5
    with pytest.raises(ConfigError) as e:
        parse_config(bad)
    assert e.value.name == "s0_range"
    with pytest.raises(ConfigError):
        parse_config(base_cfg(sites=[3]))


def test_cmd_admissible(tmp_path, capsys):
    ok = write_cfg(tmp_path, base_cfg(), "ok.json")
    assert main(["--config", ok, "--out", str(tmp_path / "o1"), "admissible"]) == 0
    bad = write_cfg(tmp_path, base_cfg(sites=[-1, 1]), "bad.json")
    assert main(["--config", bad, "--out", str(tmp_path / "o2"), "admissible"]) == 1
    verdict = json.loads((tmp_path / "o2" / "admissible.json").read_text())
    assert verdict["verdict"] == "violates_divisibility"
    nocfg = write_cfg(tmp_path, base_cfg(sites=[3]), "n1.json")
    assert main(["--config", nocfg, "admissible"]) == 2


def test_cmd_assumptions(tmp_path, capsys):
    cfg = write_cfg(tmp_path, base_cfg())
    out = str(tmp_path / "out")
    assert main(["--config", cfg, "--out", out, "assumptions"]) == 0
    doc = json.loads((tmp_path / "out" / "assumptions.json").read_text())
    assert doc["m"] >= 0.5
    assert abs(doc["m2"] - doc["m2_reference"]) < 1e-12
    assert doc["jacobian_inverse_error"] < 1e-12


def test_cmd_normal_form(tmp_path, capsys):
    cfg = write_cfg(tmp_path, base_cfg())
    out = str(tmp_path / "out")
    assert main(["--config", cfg, "--out", out, "normal-form"]) == 0
    doc = json.loads((tmp_path / "out" / "normal_form.json").read_text())
    assert doc["q1_residual_rel"] < 1e-12
    assert doc["zero_divisor_terms"] == 0
    # malformed higher-order entry -> config error
    bad = base_cfg()
    bad["dnls"] = {"quintic": [[0, 2, 1, 1.0, 0.0]]}
    path = write_cfg(tmp_path, bad, "bad.json")
    assert main(["--config", path, "--out", out, "normal-form"]) == 2


def test_cmd_kam_runs_and_is_deterministic(tmp_path, capsys):
    cfg = write_cfg(tmp_path, base_cfg())
    out1 = str(tmp_path / "r1")
    out2 = str(tmp_path / "r2")
    assert main(["--config", cfg, "--out", out1, "kam"]) == 0
    assert main(["--config", cfg, "--out", out2, "kam"]) == 0
    for name in ("steps.jsonl", "summary.json", "torus.txt"):
        b1 = (tmp_path / "r1" / name).read_bytes()
        b2 = (tmp_path / "r2" / name).read_bytes()
        assert b1 == b2, name
    steps = [json.loads(l) for l in
             (tmp_path / "r1" / "steps.jsonl").read_text().splitlines()]
    assert len(steps) >= 1
    summary = json.loads((tmp_path / "r1" / "summary.json").read_text())
    assert summary["contraction_failure"] is None
    # different seed -> different grid -> different bytes
    out3 = str(tmp_path / "r3")
    assert main(["--config", cfg, "--seed", "8", "--out", out3, "kam"]) == 0
    assert (tmp_path / "r1" / "steps.jsonl").read_bytes() != \
        (tmp_path / "r3" / "steps.jsonl").read_bytes()


def test_cmd_kam_max_steps_zero_trivial(tmp_path, capsys):
    doc = base_cfg()
    doc["schedule"]["max_steps"] = 0
    cfg = write_cfg(tmp_path, doc)
    out = str(tmp_path / "out")
    assert main(["--config", cfg, "--out", out, "kam"]) == 0
    assert (tmp_path / "out" / "steps.jsonl").read_text() == ""
    torus = (tmp_path / "out" / "torus.txt").read_text()
    assert "steps 0" in torus.splitlines()[0]
    # trivial embedding: no x-shift terms, y/z identity on the torus
    assert "## frequencies" in torus


def test_cmd_measure(tmp_path, capsys):
    doc = base_cfg()
    doc["measure"] = {"box_lo": [0.0, 0.0], "box_hi": [0.1, 0.1],
                      "resolution": 16, "k_max": 4, "mode_max": 6, "steps": 2,
                      "alpha": 1e-3}
    cfg = write_cfg(tmp_path, doc)
    out = str(tmp_path / "out")
    assert main(["--config", cfg, "--out", out,
                 "--alpha-sweep", "0.001,0.002,0.004", "measure"]) == 0
    rep = json.loads((tmp_path / "out" / "measure.json").read_text())
    assert len(rep["alphas"]) == 3
    assert rep["zone_cross_check_passed"] == rep["zone_cross_checks"]
    assert (tmp_path / "out" / "zones.csv").exists()


def test_cmd_verify_bounds(tmp_path, capsys):
    doc = base_cfg()
    doc["bounds"] = {"samples": 4, "kmax_sums": 10, "kmax_fields": 3}
    cfg = write_cfg(tmp_path, doc)
    out = str(tmp_path / "out")
    assert main(["--config", cfg, "--out", out, "verify-bounds"]) == 0
    rep = json.loads((tmp_path / "out" / "bounds.json").read_text())
    assert all(v["failed"] == 0 for v in rep.values())


def test_workers_flag_validation(tmp_path, capsys):
    cfg = write_cfg(tmp_path, base_cfg())
    assert main(["--config", cfg, "--workers", "0", "admissible"]) == 2
    assert main(["--config", cfg, "--workers", "2",
                 "--out", str(tmp_path / "w"), "admissible"]) == 0
