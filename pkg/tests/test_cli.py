import csv
import subprocess
import sys

import pytest

from heightfit.cli import EXIT_FAILED_FITS, EXIT_INVALID, EXIT_OK, main
from heightfit.mesh import Mesh, load_mesh, save_mesh

from test_harness import FOLDED_F, FOLDED_V


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_genmesh_then_estimate(tmp_path):
    mesh = tmp_path / "s.off"
    assert main(["genmesh", "--surface", "sphere", "--level", "2", "--out", str(mesh)]) == EXIT_OK
    assert load_mesh(mesh).n_vertices == 162
    out = tmp_path / "v.csv"
    assert main(["estimate", str(mesh), "--degree", "3", "--out", str(out)]) == EXIT_OK
    table = rows(out)
    assert len(table) == 162
    assert all(abs(float(r["kappaH"]) + 1.0) < 0.1 for r in table)


def test_estimate_switches(tmp_path):
    mesh = tmp_path / "t.obj"
    main(["genmesh", "--surface", "torus", "--style", "structured", "--out", str(mesh)])
    out = tmp_path / "v.csv"
    argv = ["estimate", str(mesh), "--degree", "4", "--iterative", "--no-weights",
            "--no-conditioning", "--out", str(out)]
    assert main(argv) == EXIT_OK
    assert len(rows(out)) == 768


def test_convergence(tmp_path):
    out = tmp_path / "run"
    argv = ["convergence", "--surface", "f2", "--style", "semiregular", "--levels", "2",
            "--degrees", "1..2", "--out", str(out)]
    assert main(argv) == EXIT_OK
    table = rows(out / "summary.csv")
    assert [(r["degree"], r["level"]) for r in table] == [("1", "0"), ("1", "1"),
                                                          ("2", "0"), ("2", "1")]
    assert (out / "vertices_d2_L1.csv").exists()


def test_convergence_degree_list(tmp_path):
    argv = ["convergence", "--surface", "sphere", "--levels", "1", "--degrees", "2,5",
            "--no-vertex-csv", "--out", str(tmp_path)]
    assert main(argv) == EXIT_OK
    assert [r["degree"] for r in rows(tmp_path / "summary.csv")] == ["2", "5"]


def test_failed_fit_exit_code(tmp_path, capsys):
    mesh = tmp_path / "fold.off"
    save_mesh(Mesh(FOLDED_V, FOLDED_F), mesh)
    out = tmp_path / "v.csv"
    assert main(["estimate", str(mesh), "--out", str(out)]) == EXIT_FAILED_FITS
    assert "3" in capsys.readouterr().err
    assert rows(out)[3]["kappa1"] == "FAILED"


@pytest.mark.parametrize("argv", [
    ["estimate", "missing.off", "--out", "x.csv"],
    ["convergence", "--surface", "klein", "--out", "x"],
    ["convergence", "--surface", "f1", "--degrees", "0..3", "--out", "x"],
    ["genmesh", "--surface", "sphere", "--level", "99", "--out", "x.off"],
    [],
])
def test_invalid_input(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as info:
        raise SystemExit(main(argv))
    assert info.value.code == EXIT_INVALID


def test_malformed_mesh(tmp_path, capsys):
    p = tmp_path / "bad.off"
    p.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n")
    assert main(["estimate", str(p), "--out", str(tmp_path / "v.csv")]) == EXIT_INVALID
    assert "bad.off" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    out = tmp_path / "m.off"
    res = subprocess.run([sys.executable, "-m", "heightfit", "genmesh", "--surface", "f1",
                          "--out", str(out)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert out.exists()
