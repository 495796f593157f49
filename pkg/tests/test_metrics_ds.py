import csv
import io
import json
import statistics
from importlib import resources

import pytest

from qarvd.metrics_ds import (
    TableError, UndefinedCVError, boa, bundled_table, cv, ds_report, load_table,
)

FROZEN_CV_FVD = 0.5873201363592085
DIRS = {"directions": {"a": "higher_better", "b": "lower_better"},
        "bitwidth_order": ["BF16", "W8A8", "W4A8"], "reference": "BF16"}


def _table(text, side=DIRS):
    return load_table(io.StringIO(text), side)


SMALL = """method,bitwidth,a,b
BF16,BF16,10,0
m1,W8A8,9,1
m1,W4A8,8,2
m2,W8A8,9,3
m2,W4A8,9.5,2
"""


def test_small_table():
    t = _table(SMALL)
    assert t.methods == ("m1", "m2") and t.bitwidths == ("W8A8", "W4A8")
    assert boa(t, "a") == 0.5
    assert boa(t, "b") == 0.5
    vals = [9, 9, 8, 9.5]
    assert cv(t, "a") == pytest.approx(statistics.pstdev(vals) / statistics.mean(vals), rel=1e-15)
    per = (statistics.pstdev([9, 9]) / 9 + statistics.pstdev([8, 9.5]) / 8.75) / 2
    assert cv(t, "a", "per_bitwidth") == pytest.approx(per, rel=1e-15)
    with pytest.raises(ValueError):
        cv(t, "a", "all")


def test_boa_ties_do_not_count():
    t = _table(SMALL.replace("m1,W8A8,9,1", "m1,W8A8,8,1"))
    assert boa(t, "a") == 0.0


def test_zero_mean_cv():
    t = _table("method,bitwidth,a,b\nBF16,BF16,1,1\nm,W8A8,0,1\nm,W4A8,0,2\n")
    with pytest.raises(UndefinedCVError):
        cv(t, "a")


@pytest.mark.parametrize("text,side", [
    ("", DIRS),
    ("x,y,a,b\nBF16,BF16,1,1\n", DIRS),
    ("method,bitwidth,a,b\nm,W8A8,1,1\nm,W4A8,1,1\n", DIRS),
    ("method,bitwidth,a,b\nBF16,BF16,1,1\nm,W8A8,1,1\n", DIRS),
    ("method,bitwidth,a,b\nBF16,BF16,1,1\nm,W2A2,1,1\n", DIRS),
    ("method,bitwidth,a,b\nBF16,BF16,1,x\nm,W8A8,1,1\nm,W4A8,1,1\n", DIRS),
    ("method,bitwidth,a,b\nBF16,BF16,1,1\nBF16,BF16,1,1\n", DIRS),
    (SMALL, {"directions": {"a": "higher_better"}, "bitwidth_order": ["BF16", "W8A8", "W4A8"]}),
    (SMALL, {"directions": DIRS["directions"]}),
    (SMALL, dict(DIRS, reference="W8A8")),
])
def test_malformed_tables(text, side):
    with pytest.raises(TableError):
        _table(text, side)


def _independent_column(name, metric):
    text = (resources.files("qarvd") / "data" / f"{name}.csv").read_text()
    return [float(r[metric]) for r in csv.DictReader(io.StringIO(text)) if r["bitwidth"] != "BF16"]


def test_table1_cv_against_stdlib_oracle():
    t = bundled_table("table1")
    for metric in t.metrics:
        col = _independent_column("table1", metric)
        expect = statistics.pstdev(col) / statistics.mean(abs(v) for v in col)
        assert cv(t, metric) == pytest.approx(expect, rel=1e-12)
    assert cv(t, "FVD-FP") == FROZEN_CV_FVD


def test_table1_fixture_values():
    t = bundled_table("table1")
    assert len(t.methods) == 6 and t.reference["Subject Consistency"] == 96.91
    assert boa(t, "FVD-FP") == 1.0
    assert boa(t, "LPIPS-FP") == 1.0
    assert boa(t, "Motion Smoothness") == 0.0
    rep = ds_report(t)
    ranking = rep.ranking()
    assert set(ranking[:2]) == {"FVD-FP", "LPIPS-FP"}
    scores = rep.by_metric()
    assert scores["FVD-FP"].ds == scores["FVD-FP"].cv * scores["FVD-FP"].boa


def test_table2_loads():
    t = bundled_table("table2")
    assert t.bitwidths == ("W8A8", "W4A8", "W4A6")
    assert ds_report(t, "per_bitwidth").population == "per_bitwidth"


def test_report_serialization():
    rep = ds_report(bundled_table("table1"))
    d = rep.to_dict()
    json.dumps(d)
    assert [m["metric"] for m in d["metrics"]] == rep.ranking()
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert float(rows[0]["ds"]) == rep.scores[0].ds


def test_load_from_paths(tmp_path):
    (tmp_path / "t.csv").write_text(SMALL)
    (tmp_path / "d.json").write_text(json.dumps(DIRS))
    t = load_table(tmp_path / "t.csv", tmp_path / "d.json")
    assert t.value("m2", "W4A8", "a") == 9.5
