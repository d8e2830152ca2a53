import pytest

from ghnq.schemas import SchemaError, validate_csv
from ghnq.train import EvalReport, EvalRow, LayerwiseRecord, write_layerwise_csv, write_study_csv


def _rows():
    ok = EvalRow("Regular_Conv_With_BN_HeUni", "W8/A8", 71.1, 98.0, 70.9, 97.5, 0.01, 0.2, 0.281)
    bad = EvalRow("Regular_Conv_No_BN_RandNorm_Large", "W8/A8", float("nan"), float("nan"), status="diverged")
    return ok, bad


def test_study_csv_valid(tmp_path):
    write_study_csv(list(_rows()), tmp_path / "study.csv")
    assert validate_csv(tmp_path / "study.csv", "study") == 2


def test_study_csv_rejects_bad_cells(tmp_path):
    p = tmp_path / "study.csv"
    write_study_csv(list(_rows()), p)
    p.write_text(p.read_text().replace("70.90", "170.90"))
    with pytest.raises(SchemaError, match="QUINT8"):
        validate_csv(p, "study")


def test_header_mismatch(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(SchemaError, match="header"):
        validate_csv(p, "study_table")
    with pytest.raises(SchemaError, match="unknown schema"):
        validate_csv(p, "nope")


def test_layerwise_and_split_table(tmp_path):
    rec = LayerwiseRecord(0, "conv0", -1.0, 1.0, 2 / 255, 0.0, 3.0, 3 / 255)
    write_layerwise_csv([rec], tmp_path / "lw.csv")
    assert validate_csv(tmp_path / "lw.csv", "layerwise") == 1
    rep = EvalReport()
    for g, acc in enumerate([70.0, 72.0, 74.0]):
        rep.add("TestID", g, "Float32", acc, 100.0)
        rep.add("BNFree", g, "Float32", acc - 10, 100.0)
    rep.write_table_csv(tmp_path / "t.csv")
    rep.write_rows_csv(tmp_path / "rows.csv")
    assert validate_csv(tmp_path / "t.csv", "split_table") == 1
    assert validate_csv(tmp_path / "rows.csv", "eval_rows") == 6
    (tmp_path / "t.csv").write_text("Bits,ID\nW4/A4,72.0\n")
    with pytest.raises(SchemaError, match="mean±sem"):
        validate_csv(tmp_path / "t.csv", "split_table")
