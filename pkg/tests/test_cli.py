import argparse
import json

import numpy as np
import pytest

from qarvd import schemas
from qarvd.cli import build_parser, main, parse_seeds
from qarvd.engine import load_quantized
from qarvd.tensor_core import load_tensor


def test_parse_seeds():
    assert parse_seeds("0-3,10") == (0, 1, 2, 3, 10)
    assert parse_seeds("5") == (5,)
    with pytest.raises(argparse.ArgumentTypeError):
        parse_seeds("a")
    with pytest.raises(argparse.ArgumentTypeError):
        parse_seeds(",")


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


@pytest.fixture(scope="module")
def model_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cli") / "toy.qarm"
    assert main(["gen-model", "--out", str(p)]) == 0
    return p


def _json(p):
    return json.loads(p.read_text())


def test_profile_and_outliers(model_file, tmp_path):
    out = tmp_path / "prof.json"
    assert main(["profile-sensitivity", "--model", str(model_file), "--seeds", "0-1",
                 "--out", str(out)]) == 0
    prof = _json(out)
    assert prof["N"] == 7 and abs(sum(prof["alpha_normalized"]) - 1) < 1e-12
    assert len((tmp_path / "prof.tsv").read_text().splitlines()) == 8

    out = tmp_path / "out.json"
    assert main(["detect-outliers", "--model", str(model_file), "--out", str(out)]) == 0
    rep = _json(out)
    flagged = {l["layer_name"] for l in rep["layers"] if l["raw_outliers"]}
    assert {"block0.ffn.2", "block1.ffn.2"} <= flagged
    assert rep["fleet"]["by_type"]["ffn.2"] == 1.0
    header = (tmp_path / "out.tsv").read_text().splitlines()[0]
    assert header.split("\t") == ["layer", "rank", "channel", "l2_norm", "outlier"]


def test_calibrate_run_eval(model_file, tmp_path):
    qpath = tmp_path / "q.qarq"
    args = ["calibrate", "--model", str(model_file), "--scheme", "W8A8", "--iters", "3",
            "--calib-prompts", "100", "--profile-seeds", "0", "--out", str(qpath)]
    assert main(args) == 0
    log = _json(tmp_path / "q.log.json")
    assert log["iterations"] == 3 and len(log["layers"]) == 20
    qm = load_quantized(qpath)
    assert qm.scheme.name == "W8A8"

    lat = tmp_path / "lat.qtns"
    assert main(["run", "--qmodel", str(qpath), "--seeds", "0-1", "--out", str(lat)]) == 0
    assert load_tensor(lat).shape == (2, 7, 16, 64)

    ev = tmp_path / "eval.json"
    assert main(["eval", "--model", str(model_file), "--qmodel", str(qpath), "--seeds", "0",
                 "--out", str(ev)]) == 0
    e = _json(ev)
    assert e["mean_latent_mse"] > 0 and e["size"]["ratio"] > 1.5


def test_metrics_ds_command(tmp_path):
    from importlib import resources

    table = resources.files("qarvd") / "data" / "table1.csv"
    out = tmp_path / "ds.json"
    assert main(["metrics-ds", "--table", str(table), "--out", str(out)]) == 0
    rep = _json(out)
    assert [m["metric"] for m in rep["metrics"]][:2] == ["FVD-FP", "LPIPS-FP"]
    assert (tmp_path / "ds.csv").read_text().startswith("metric,direction")


def test_ablate_sweep(model_file, tmp_path):
    out = tmp_path / "abl.json"
    assert main(["ablate", "--model", str(model_file), "--sweep", "tau=3.0,4.0", "--weighting",
                 "uniform", "--iters", "2", "--calib-prompts", "100", "--seeds", "0",
                 "--out", str(out)]) == 0
    rows = _json(out)["rows"]
    assert [r["tau"] for r in rows] == [3.0, 4.0]
    schemas.validate(_json(out), "ablate")


def test_errors_return_code_two(model_file, tmp_path, capsys):
    assert main(["eval", "--model", str(tmp_path / "missing"), "--qmodel", "x",
                 "--out", str(tmp_path / "e.json")]) == 2
    assert "model file not found" in capsys.readouterr().err
    assert main(["ablate", "--model", str(model_file), "--out", str(tmp_path / "a.json")]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("nope\n")
    (tmp_path / "directions.json").write_text("{}")
    assert main(["metrics-ds", "--table", str(bad), "--out", str(tmp_path / "d.json")]) == 2
