import json
import math

import pytest

from superbm import cli
from superbm.config import DEFAULTS, OUT_ENV, load_config, parse_atoms, parse_density, reference_text
from superbm.errors import ConfigurationError


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_defaults_load():
    cfg = load_config()
    assert cfg.params.gamma == 0.5 and cfg.grid.n == 1024 and cfg.measure.total_mass == 1.0
    assert cfg.criteria == tuple(range(1, 11))
    assert len(cfg.content_hash()) == 64


def test_reference_lists_every_key():
    text = reference_text()
    for sec, kv in DEFAULTS.items():
        assert f"[{sec}]" in text
        for k in kv:
            assert f"{k} =" in text


def test_problems_are_aggregated(tmp_path):
    path = write(tmp_path, "bad.ini", "[model]\ngamma = 1.5\n[grid]\npoints = 7\n[nope]\nx = 1\n"
                                      "[simulation]\nparticle_mass = -1\n")
    with pytest.raises(ConfigurationError) as exc:
        load_config(path)
    assert len(exc.value.problems) >= 4


def test_gamma_outside_unit_interval_rejected():
    for g in ("0", "1", "-0.2", "abc"):
        with pytest.raises(ConfigurationError):
            load_config(overrides={("model", "gamma"): g})


def test_parsers():
    pos, mass = parse_atoms("0:1; 1.5:0.25", 1)
    assert pos.ravel().tolist() == [0.0, 1.5] and mass.tolist() == [1.0, 0.25]
    pos, mass = parse_atoms("0.5,-1:2", 2)
    assert pos.tolist() == [[0.5, -1.0]]
    assert parse_density("none") is None
    assert parse_density("gaussian(0.5)")[0] == "gaussian"
    with pytest.raises(Exception):
        parse_density("triangle(1)")


def test_density_measures(tmp_path):
    cfg = load_config(overrides={("initial_measure", "atoms"): "", ("initial_measure", "density"): "indicator(1)"})
    assert cfg.measure.total_mass == pytest.approx(2.0, rel=1e-12)
    cfg = load_config(overrides={("initial_measure", "density"): "gaussian(0.5, 2)"})
    assert cfg.measure.total_mass == pytest.approx(3.0, rel=1e-6)


def test_out_dir_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "envdir"))
    assert load_config().out_dir == str(tmp_path / "envdir")
    assert load_config(overrides={("output", "directory"): "x"}).out_dir == "x"


def test_malformed_config_exits_2_without_files(tmp_path, capsys):
    path = write(tmp_path, "bad.ini", "[model]\ngamma = 2\n")
    out = tmp_path / "out"
    assert cli.main(["solve", "--config", path, "--out", str(out)]) == 2
    assert not out.exists()
    assert "gamma" in capsys.readouterr().err
    path = write(tmp_path, "broken.ini", "this is not ini\n")
    assert cli.main(["solve", "--config", path, "--out", str(out)]) == 2
    assert not out.exists()


def test_solve_constant(tmp_path):
    path = write(tmp_path, "c.ini", "[initial_measure]\natoms =\ndensity = constant(1)\n[grid]\npoints = 256\n")
    out = tmp_path / "o"
    assert cli.main(["solve", "--config", path, "--out", str(out)]) == 0
    summary = json.loads((out / "solve_summary.json").read_text())
    assert summary["final_max"] == pytest.approx(2.25, rel=1e-3)
    assert summary["provenance"]["config"]["initial_measure"]["density"] == "constant(1)"
    text = (out / "solve_slices.csv").read_text().splitlines()
    assert any(line.startswith("# config_sha256 = ") for line in text)
    rows = [line.split(",") for line in text if line and line[0].isdigit()]
    assert float(rows[-1][0]) == 1.0 and float(rows[-1][2]) == pytest.approx(2.25, rel=1e-3)


def test_solve_dirac_reports_bounds(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["solve", "--out", str(out), "--format", "json"]) == 0
    summary = json.loads((out / "solve_summary.json").read_text())
    b = summary["bounds"]
    assert b["passed"] and b["resolvable_lower_margin"] > 0 and b["worst_upper_margin"] > 0
    assert not (out / "solve_slices.csv").exists()


def test_nonconvergence_exits_3(tmp_path):
    path = write(tmp_path, "nc.ini", "[solver]\nmax_iters = 2\n[grid]\npoints = 128\n")
    out = tmp_path / "o"
    assert cli.main(["solve", "--config", path, "--out", str(out)]) == 3
    rep = json.loads((out / "solve_convergence.json").read_text())
    assert rep["converged"] is False and len(rep["sup_diffs"]) == 2


def test_simulate_summary_is_deterministic(tmp_path):
    path = write(tmp_path, "s.ini", "[simulation]\nparticle_mass = 1e-2\nmotion_dt = 1e-2\nreplicates = 200\n"
                                    "snapshot_times = 0.5\n")
    a = tmp_path / "a"
    assert cli.main(["simulate", "--config", path, "--out", str(a), "--seed", "7"]) == 0
    first = (a / "simulate_summary.json").read_bytes()
    assert cli.main(["simulate", "--config", path, "--out", str(a), "--seed", "7", "--threads", "2"]) == 0
    assert (a / "simulate_summary.json").read_bytes() == first
    assert cli.main(["simulate", "--config", path, "--out", str(a), "--seed", "8"]) == 0
    assert (a / "simulate_summary.json").read_bytes() != first
    s = json.loads((a / "simulate_summary.json").read_text())
    assert s["replicates"] == 200 and 0 < s["explosion_fraction"] < 1
    assert s["laplace"][0]["t"] == 0.5
    header = (a / "simulate_snapshots.csv").read_text().splitlines()
    assert "replicate,time,x,count" in header


def test_simulate_tiny_cap_warns(tmp_path, capsys):
    path = write(tmp_path, "cap.ini", "[simulation]\nn_max = 5\nreplicates = 20\n")
    assert cli.main(["simulate", "--config", path, "--out", str(tmp_path / "o"), "--format", "json"]) == 0
    assert "warning" in capsys.readouterr().err
    s = json.loads((tmp_path / "o" / "simulate_summary.json").read_text())
    assert s["explosion_fraction"] == 1.0


def test_explosion_tables(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["explosion", "--out", str(out)]) == 0
    rows = [r for r in (out / "explosion_cdf.csv").read_text().splitlines() if r and not r.startswith("#")]
    assert rows[0] == "t,cdf,survival"
    t, c, s = map(float, rows[-1].split(","))
    assert t == 1.0 and c == pytest.approx(1 - math.exp(-0.25), rel=1e-15)
    assert (out / "explosion.json").exists()


def test_density_command(tmp_path):
    path = write(tmp_path, "d.ini", "[simulation]\nparticle_mass = 1e-2\nmotion_dt = 1e-2\nreplicates = 300\n"
                                    "horizon = 0.5\n[test_function]\nkind = bump\nbase = 0\n[grid]\npoints = 512\n")
    out = tmp_path / "o"
    assert cli.main(["density", "--config", path, "--out", str(out)]) == 0
    rep = json.loads((out / "density_report.json").read_text())
    assert rep["ns"] == [8, 16, 32] and len(rep["estimates"]) == 3
    assert (out / "density_field.csv").exists()


def test_validate_subset_and_failure_code(tmp_path, monkeypatch):
    out = tmp_path / "o"
    assert cli.main(["validate", "--criteria", "1,2", "--out", str(out)]) == 0
    rep = json.loads((out / "validate_report.json").read_text())
    assert [c["criterion"] for c in rep["criteria"]] == [1, 2] and rep["passed"]

    from superbm import validate

    monkeypatch.setattr(validate.Suite, "c1", lambda self: (False, "forced", {}))
    assert cli.main(["validate", "--criteria", "1", "--out", str(out)]) == 1


def test_gamma_09_stress(tmp_path):
    path = write(tmp_path, "g.ini", "[model]\ngamma = 0.9\n[validate]\ncriteria = 1,2,3,5\n")
    assert cli.main(["validate", "--config", path, "--out", str(tmp_path / "o")]) == 0


def test_tolerance_scale_cannot_tighten():
    with pytest.raises(ConfigurationError):
        load_config(overrides={("validate", "tolerance_scale"): "0.5"})
