import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mskernel.cli import main


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_generate_default_manifest(tmp_path):
    assert main(["generate", "--output", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["N"] == [9, 25, 81, 289]
    assert man["validation"]["violations"] == []
    pts = np.loadtxt(tmp_path / "level_02.csv", delimiter=",", skiprows=1)
    assert pts.shape == (25, 2)
    assert (tmp_path / "config.ini").exists()


def test_generate_single_level_and_binary(tmp_path):
    assert main(["generate", "-L", "1", "--format", "binary", "--output", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["N"] == [9]
    assert man["validation"]["h_ratios"] == []
    assert (tmp_path / "level_01.mskp").read_bytes()[:4] == b"MSKP"


def test_generate_level_eleven(tmp_path):
    assert main(["generate", "-L", "11", "--max-levels", "11", "--no-points", "--output", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["N"][-1] == 4198401


def test_level_cap_enforced(tmp_path, capsys):
    assert main(["generate", "-L", "9", "--output", str(tmp_path)]) == 2
    assert "cap" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[solver]\nmode = nope\n")
    assert main(["solve", "--config", str(cfg), "--output", str(tmp_path)]) == 2


def test_assemble_writes_blocks(tmp_path):
    assert main(["assemble", "-L", "3", "--output", str(tmp_path)]) == 0
    info = json.loads((tmp_path / "assembly.json").read_text())
    assert len(info["blocks"]) == 6
    assert (tmp_path / "B_3_1.mtx").read_text().startswith("%%MatrixMarket")


def test_solve_with_oracle(tmp_path):
    rc = main(["solve", "--oracle", "--cg-tol", "1e-12", "--quadrature", "128", "--output", str(tmp_path)])
    assert rc == 0
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert meta["oracle_relative_difference"] <= 1e-8
    assert meta["jacobi_steps"] == 4
    rows = read_csv(tmp_path / "errors.csv")
    assert list(rows[0]) == ["L", "N_total", "l2_error", "linf_error", "T", "solver_mode"]
    assert len(read_csv(tmp_path / "coefficients.csv")) == 9 + 25 + 81 + 289


def test_solve_thresholded_auto_echoes_T(tmp_path):
    rc = main(["solve", "--mode", "thresholded", "--T", "auto", "--quadrature", "64", "--output", str(tmp_path)])
    assert rc == 0
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert meta["T"] == pytest.approx(meta["T_selection"]["T"])
    assert meta["config"]["jacobi_mode"] == "thresholded"


def test_solve_failure_exit_code(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[solver]\ncg_tol = 1e-12\ncg_max_iter = 1\n")
    assert main(["solve", "--config", str(cfg), "--quadrature", "64", "--output", str(tmp_path)]) == 1


def test_workers_give_identical_coefficients(tmp_path):
    a, b = tmp_path / "w1", tmp_path / "w4"
    for w, out in (("1", a), ("4", b)):
        assert main(["solve", "--workers", w, "--deterministic", "--quadrature", "64", "--output", str(out)]) == 0
    assert (a / "coefficients.csv").read_text() == (b / "coefficients.csv").read_text()


def test_analyze_outputs(tmp_path):
    assert main(["analyze", "-L", "3", "--output", str(tmp_path)]) == 0
    norms = read_csv(tmp_path / "m_norm.csv")
    assert [r["L"] for r in norms] == ["2", "3"]
    assert float(norms[0]["m_norm"]) == pytest.approx(1.935, rel=0.03)
    trunc = read_csv(tmp_path / "truncation.csv")
    assert len(trunc) == 12
    row = [r for r in trunc if r["L"] == "3" and r["T"] == "1"][0]
    assert float(row["norm_ratio"]) == pytest.approx(0.71423, rel=0.05)
    assert json.loads((tmp_path / "explicit_inverse.json").read_text())["passed"]
    assert len(read_csv(tmp_path / "kappa.csv")) == 3


def test_analyze_empty_T_list(tmp_path):
    assert main(["analyze", "-L", "2", "--T-list", "", "--output", str(tmp_path)]) == 0
    assert read_csv(tmp_path / "truncation.csv") == []
    assert len(read_csv(tmp_path / "m_norm.csv")) == 1


def test_analyze_cap(tmp_path):
    assert main(["analyze", "-L", "6", "--output", str(tmp_path)]) == 2


def test_bench_small_ladder(tmp_path):
    assert main(["bench", "-L", "4", "--max-workers", "2", "--output", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "bench.csv")
    base = [r for r in rows if r["workers"] == "1"]
    assert all(float(r["efficiency"]) == 1.0 for r in base)
    assert {r["phase"] for r in rows} == {"assembly", "jacobi", "block_cg", "total"}
    assert json.loads((tmp_path / "bench.json").read_text())["bit_identical"]


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "mskernel.cli", "generate", "-L", "2", "--output", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "[9, 25]" in out.stdout
