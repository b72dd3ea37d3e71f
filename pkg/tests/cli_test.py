import numpy as np

from app.cli import main
from app.db.storage import load_csdc, load_csdc_dir, read_csv


def test_synth_writes_images_and_line_rasters(tmp_path):
    out = tmp_path / "synth"
    assert main(["synth", "--count", "3", "--size", "16", "--seed", "2", "--out", str(out)]) == 0
    images = load_csdc_dir(out)
    assert [c.id for c in images] == ["synth-00000", "synth-00001", "synth-00002"]
    raster = load_csdc(out / "lines" / "synth-00000.csd")
    assert set(np.unique(raster.pixels)) <= {0.0, 1.0}


def test_import_then_reconstruct(tmp_path):
    csv = tmp_path / "device.csv"
    rows = [",".join(str((i * 7 + j * 3) % 11) for j in range(16)) for i in range(16)]
    csv.write_text("\n".join(rows) + "\n")
    assert main(["import", str(csv), "--v1", "-1", "1", "--out", str(tmp_path / "csd")]) == 0
    imported = load_csdc(tmp_path / "csd" / "device.csd")
    assert imported.v1_range == (-1.0, 1.0)

    out = tmp_path / "recon.csd"
    code = main(["reconstruct", str(tmp_path / "csd" / "device.csd"), "--mask", "grid:3", "--method", "idw", "--out", str(out)])
    assert code == 0
    recon = load_csdc(out)
    assert np.array_equal(recon.pixels[::3, ::3], imported.pixels[::3, ::3])


def test_timebudget_table(tmp_path, capsys):
    target = tmp_path / "budget.csv"
    assert main(["timebudget", "--mask", "grid:5", "--steps", "20", "--csv", str(target)]) == 0
    assert "grid:5" in capsys.readouterr().out
    table = read_csv(target)
    row = table[table["steps"] == 20].iloc[0]
    assert abs(row["total"] - 0.0369) < 1e-9


def test_errors_exit_with_code_2(tmp_path):
    assert main(["reconstruct", str(tmp_path / "missing.csd"), "--mask", "grid:3", "--out", str(tmp_path / "x.csd")]) == 2
    assert main(["timebudget", "--mask", "grid:0"]) == 2
