import json
import subprocess
import sys

import numpy as np
import pytest

from heflow.cli import main, resolve_config
from heflow.geometry import load_field


def _write(path, cfg):
    path.write_text(json.dumps(cfg))
    return path


def _cfg(preset="flat_rank2", n=8, t_max=0.02, **initial):
    return {
        "schema_version": 1,
        "seed": 0,
        "geometry": {"tau_re": 0.1, "tau_im": 1.0, "area_scale": 1.0, "grid_n": n},
        "bundle": {"preset": preset},
        "initial": initial or {"kind": "identity"},
        "flow": {"t_max": t_max, "scheme": "exp_midpoint", "monitor_every": 2},
        "output": {"directory": "unused"},
    }


def test_flat_identity_run(tmp_path):
    cfg = _write(tmp_path / "c.json", _cfg())
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r"), "--quiet"]) == 0
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert summary["status"] == "completed"
    assert summary["final"]["sup_phi"] < 1e-10
    assert set(summary["files"]) >= {"trace.jsonl", "state_K.heflow", "state_final.heflow"}


def test_flat_random_run_is_stationary_after_normalisation(tmp_path):
    # on the flat preset, Phi(H) is pure trace for a conformal change, so start from identity plus seed
    cfg = _write(tmp_path / "c.json", _cfg(kind="random", amplitude=0.3))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r"), "--quiet"]) == 0


@pytest.mark.parametrize(
    "mutate, key",
    [
        (lambda c: c["geometry"].pop("grid_n"), "grid_n"),
        (lambda c: c["flow"].update(scheme="rk45"), "flow.scheme"),
        (lambda c: c["geometry"].update(colour="red"), "colour"),
        (lambda c: c["bundle"].update(preset="nope"), "bundle"),
        (lambda c: c["geometry"].update(tau_im=-1.0), "geometry.tau_im"),
    ],
)
def test_malformed_config_names_the_key(tmp_path, capsys, mutate, key):
    cfg = _cfg()
    mutate(cfg)
    path = _write(tmp_path / "c.json", cfg)
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "r")]) == 1
    err = capsys.readouterr().err
    assert "error" in err and key in err
    assert not (tmp_path / "r").exists()


def test_json_syntax_error_reports_line(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text('{\n  "schema_version": 1,\n  "seed": 0,,\n}')
    assert main(["run", "--config", str(path)]) == 1
    assert "line 3" in capsys.readouterr().err


def test_missing_config_and_bad_usage(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 1
    assert "nope.json" in capsys.readouterr().err
    assert main(["frobnicate"]) == 1
    assert main(["run"]) == 1


def test_runs_are_deterministic_and_reproducible_from_summary(tmp_path):
    cfg = _write(tmp_path / "c.json", _cfg("extension_O_O", kind="random", amplitude=0.4))
    for name in ("a", "b"):
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / name), "--quiet"]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "trace.jsonl").read_bytes() == (b / "trace.jsonl").read_bytes()
    assert (a / "state_final.heflow").read_bytes() == (b / "state_final.heflow").read_bytes()
    resolved = json.loads((a / "summary.json").read_text())["config"]
    assert resolve_config(resolved) == resolved
    again = _write(tmp_path / "resolved.json", resolved)
    assert main(["run", "--config", str(again), "--out", str(tmp_path / "c"), "--quiet"]) == 0
    assert (tmp_path / "c" / "trace.jsonl").read_bytes() == (a / "trace.jsonl").read_bytes()


def test_flag_accumulation_gives_exit_two(tmp_path):
    cfg = _cfg("split_unstable", kind="random", amplitude=0.5)
    # zero drift tolerances flag every record whose drift is not exactly zero
    cfg["flow"].update(det_drift_tol=0.0, trace_drift_tol=0.0)
    path = _write(tmp_path / "c.json", cfg)
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "r"), "--quiet"]) == 2
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert summary["flag_counts"]


def test_aborted_run_is_hard_error(tmp_path):
    cfg = _cfg("nilpotent_higgs", kind="random", amplitude=0.5)
    # far beyond the stability bound the first step overshoots and no halving is allowed
    cfg["flow"].update(dt_factor=20.0, scheme="exp_euler", max_halvings=0)
    path = _write(tmp_path / "c.json", cfg)
    with pytest.warns(UserWarning, match="stability"):
        assert main(["run", "--config", str(path), "--out", str(tmp_path / "r"), "--quiet"]) == 1
    assert json.loads((tmp_path / "r" / "summary.json").read_text())["status"].startswith("aborted")


def test_oracle_subcommands(tmp_path):
    scalar = {
        "schema_version": 1, "seed": 0,
        "geometry": {"grid_n": 16},
        "bundle": {"degrees": [0]},
        "initial": {"kind": "random", "amplitude": 0.5, "band": 3, "normalize": False},
        "flow": {"t_max": 0.5, "scheme": "log_rk4", "monitor_every": 1000},
        "oracle": {"kind": "scalar", "times": [0.5]},
    }
    assert main(["oracle", "--config", str(_write(tmp_path / "s.json", scalar)), "--out", str(tmp_path / "s"),
                 "--quiet"]) == 0
    rows = [json.loads(line) for line in (tmp_path / "s" / "oracle.jsonl").read_text().splitlines()]
    assert rows[0]["sup_diff"] <= 1e-6
    matrix = {
        "schema_version": 1, "seed": 0,
        "geometry": {"grid_n": 8},
        "bundle": {"preset": "nilpotent_higgs"},
        "initial": {"kind": "constant", "log_h": [[0.5, 0.0], [0.0, -0.5]], "normalize": False},
        "flow": {"dt": 1e-3, "t_max": 0.2, "scheme": "log_rk4", "monitor_every": 1000},
        "oracle": {"kind": "matrix_ode", "times": [0.1, 0.2]},
    }
    assert main(["oracle", "--config", str(_write(tmp_path / "m.json", matrix)), "--out", str(tmp_path / "m"),
                 "--quiet"]) == 0
    # a tolerance nobody can meet is a mismatch, not a crash
    matrix["oracle"]["tolerance"] = 1e-30
    assert main(["oracle", "--config", str(_write(tmp_path / "m2.json", matrix)), "--out", str(tmp_path / "m2"),
                 "--quiet"]) == 2
    del matrix["oracle"]
    assert main(["oracle", "--config", str(_write(tmp_path / "m3.json", matrix)), "--quiet"]) == 1


def test_analyze_stable_regime_notice(tmp_path, capsys):
    cfg = _write(tmp_path / "c.json", _cfg())
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "r"), "--quiet"])
    assert main(["analyze", str(tmp_path / "r"), "--quiet"]) == 0
    assert "stable regime" in capsys.readouterr().out
    assert not (tmp_path / "r" / "report.json").exists()


def test_analyze_missing_artifact(tmp_path, capsys):
    cfg = _write(tmp_path / "c.json", _cfg())
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "r"), "--quiet"])
    (tmp_path / "r" / "state_K.heflow").unlink()
    assert main(["analyze", str(tmp_path / "r")]) == 1
    assert "state_K.heflow" in capsys.readouterr().err
    assert main(["analyze", str(tmp_path / "nowhere")]) == 1


def test_analyze_split_run(tmp_path):
    cfg = _cfg("split_unstable", n=8, t_max=2.0, kind="random", amplitude=0.2)
    cfg["geometry"]["area_scale"] = 4.0
    cfg["flow"].update(scheme="log_rk4", monitor_every=50)
    path = _write(tmp_path / "c.json", cfg)
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "r"), "--quiet"]) == 0
    code = main(["analyze", str(tmp_path / "r"), "--out", str(tmp_path / "a"), "--quiet"])
    doc = json.loads((tmp_path / "a" / "report.json").read_text())
    assert doc["nu"]["nu"] < 0
    assert doc["projections"][0]["rank"] == 1
    assert code == (0 if doc["nu"]["trusted"] else 2)
    pi = load_field(tmp_path / "a" / "pi_1.heflow")
    assert np.allclose(np.trace(pi.values, axis1=2, axis2=3).real.mean(), 1.0, atol=0.05)


def test_check_subcommand(tmp_path, capsys):
    assert main(["check", "--out", str(tmp_path), "--quiet"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 7 and "FAIL" not in out
    res = json.loads((tmp_path / "check.json").read_text())
    assert all(v["passed"] for v in res.values())


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "heflow.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
