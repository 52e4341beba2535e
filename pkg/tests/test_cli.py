import json
import math
import subprocess
import sys

import numpy as np
import pytest

from jaclab.cli import pgm_bytes, read_pgm, run, verify_manifest

COARSE = ["--h", "0.03125"]


def _config(tmp_path, drop=None, **edits):
    from jaclab.cli import resolve_config_path
    cfg = json.loads(resolve_config_path("two_phase").read_text())
    if drop:
        section, key = drop
        del cfg[section][key]
    for k, v in edits.items():
        cfg[k] = v
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_missing_field_reports_clause_and_exits_2(tmp_path, capsys):
    cfg = _config(tmp_path, drop=("coefficients", "lambda"))
    code = run(["solve", cfg, "--out", str(tmp_path / "o")])
    assert code == 2
    err = capsys.readouterr().err
    assert 'coefficients: missing field "lambda"' in err
    assert not (tmp_path / "o").exists()


def test_several_violations_reported_one_per_line(tmp_path, capsys):
    cfg = _config(tmp_path, drop=("coefficients", "lambda"), solver={"h": -1.0, "method": "magic"})
    assert run(["solve", cfg, "--out", str(tmp_path / "o")]) == 2
    lines = [ln for ln in capsys.readouterr().err.splitlines() if ln.startswith("jaclab: config error")]
    assert len(lines) >= 3


def test_failed_run_keeps_previous_output(tmp_path):
    out = tmp_path / "o"
    assert run(["frames", "check", "--dim", "3", "--samples", "200", "--out", str(out)]) == 0
    before = (out / "manifest.json").read_bytes()
    cfg = _config(tmp_path, drop=("coefficients", "lambda"))
    assert run(["solve", cfg, "--out", str(out)]) == 2
    assert (out / "manifest.json").read_bytes() == before
    assert verify_manifest(out) == []
    assert sorted(p.name for p in tmp_path.iterdir()) == ["cfg.json", "o"]


def test_frames_outputs(tmp_path):
    out = tmp_path / "f"
    assert run(["frames", "check", "--dim", "4", "--samples", "500", "--out", str(out)]) == 0
    assert verify_manifest(out) == []
    rows = (out / "frames.csv").read_text().splitlines()
    assert rows[0] == "id,gram_err,det,rank"
    assert len(rows) == 501
    summary = json.loads((out / "summary.json").read_text())
    assert summary["max_gram_err"] < 1e-12 and summary["min_rank"] == 4


def test_solve_outputs_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["solve", "two_phase", *COARSE, "--bc", "x", "--out", str(out)]) == 0
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    assert verify_manifest(a) == []
    img = read_pgm(a / "u.pgm")
    assert img.max() == 255 and img.min() == 0        # corners outside the disk map to 0
    header = (a / "nodal.csv").read_text().splitlines()[0]
    assert "x" in header and "y" in header


def test_recon_reports_log_ratio(tmp_path):
    out = tmp_path / "r"
    assert run(["recon", "two_phase", *COARSE, "--out", str(out)]) == 0
    rec = json.loads((out / "recon.json").read_text())
    jumps = {k: v["value"] for k, v in rec["jumps"].items()}
    assert any(abs(abs(v) - math.log(2)) < 0.05 for v in jumps.values())
    assert verify_manifest(out) == []


def test_tampered_file_detected(tmp_path):
    out = tmp_path / "p"
    assert run(["poincare", "--funcs", "4", "--out", str(out)]) == 0
    assert verify_manifest(out) == []
    (out / "poincare.json").write_text("{}")
    (out / "extra.txt").write_text("x")
    assert set(verify_manifest(out)) == {"poincare.json", "extra.txt"}


def test_env_default_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("JACLAB_OUT", str(tmp_path / "root"))
    assert run(["frames", "check", "--dim", "2", "--samples", "100"]) == 0
    assert verify_manifest(tmp_path / "root" / "frames") == []


def test_pgm_round_trip():
    v = np.array([[0.0, 0.5, 1.0], [np.nan, 0.25, 0.75]])
    img = read_pgm_bytes(pgm_bytes(v))
    assert img.shape == (2, 3)
    assert img[1, 0] == 0
    assert img[0, 0] == 1 and img[0, 2] == 255
    assert img[0, 0] < img[1, 1] < img[0, 1] < img[1, 2] < img[0, 2]


def read_pgm_bytes(data, tmp=None):
    import tempfile
    from pathlib import Path
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "x.pgm"
        p.write_bytes(data)
        return read_pgm(p)


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "jaclab.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0
    assert res.stdout.startswith("jaclab")
