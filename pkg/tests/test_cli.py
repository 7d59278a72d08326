import json
import xml.etree.ElementTree as ET

import pytest

from metakoopman.cli import main
from metakoopman.experiment import records_from_csv, summary_from_csv
from metakoopman.plot import read_predictions, write_predictions

SVG = "{http://www.w3.org/2000/svg}"


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def pipeline(d, seed=7):
    gen = write(d / "gen.json", {"schema_version": 1, "family": "linear", "length": 30, "n_series": 10})
    tr = write(d / "tr.json", {"schema_version": 1, "method": "ours", "model": {"K": 4, "hidden": 8},
                               "train": {"max_epochs": 20, "valid_every": 5, "T": 8, "T_Q": 4}})
    ex = write(d / "ex.json", {"schema_version": 1, "methods": ["ours", "dmd", "ndmd"], "repetitions": 2,
                               "model": {"K": 4, "hidden": 8}, "train": {"max_epochs": 10, "valid_every": 5},
                               "eval": {"T": 8, "T_Q": 4}})
    s = ["--seed", str(seed)]
    ds, ck = str(d / "ds.json"), str(d / "m.json")
    assert main(["generate", "--spec", gen, "--out", ds] + s) == 0
    assert main(["train", "--config", tr, "--dataset", ds, "--checkpoint", ck, "--log", str(d / "log.csv")] + s) == 0
    assert main(["predict", "--checkpoint", ck, "--dataset", ds, "--series-id", "lin-0001", "--T", "8",
                 "--horizon", "4", "--out", str(d / "pred.csv")] + s) == 0
    assert main(["spectrum", "--checkpoint", ck, "--dataset", ds, "--series-id", "lin-0001", "--T", "8",
                 "--out", str(d / "spec.csv")]) == 0
    assert main(["evaluate", "--config", ex, "--dataset", ds, "--records", str(d / "rec.csv"),
                 "--summary", str(d / "sum.csv")] + s) == 0
    assert main(["sweep", "--config", ex, "--dataset", ds, "--records", str(d / "swr.csv"), "--summary",
                 str(d / "sws.csv"), "--axis", "support_length", "--values", "4,8"] + s) == 0
    assert main(["plot", "--predictions", str(d / "pred.csv"), "--out", str(d / "pred.svg")]) == 0
    return d


OUTPUTS = ["ds.json", "m.json", "log.csv", "pred.csv", "spec.csv", "rec.csv", "sum.csv", "swr.csv", "sws.csv", "pred.svg"]


def test_pipeline_is_byte_identical_on_rerun(tmp_path):
    (tmp_path / "a").mkdir()
    a = pipeline(tmp_path / "a")
    (tmp_path / "b").mkdir()
    b = pipeline(tmp_path / "b")
    for name in OUTPUTS:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_outputs_reparse(tmp_path):
    d = tmp_path / "run"
    d.mkdir()
    pipeline(d)
    recs = records_from_csv((d / "rec.csv").read_text())
    assert {r.method for r in recs} == {"ours", "dmd", "ndmd"}
    assert summary_from_csv((d / "sum.csv").read_text())
    steps, names, truth, pred = read_predictions((d / "pred.csv").read_text())
    assert truth.shape == pred.shape == (4, 2)
    assert (d / "spec.csv").read_text().splitlines()[0] == "index,re,im,abs,frequency,growth_rate"
    assert (d / "m.json.config.json").exists()


def test_plot_svg_well_formed(tmp_path):
    import numpy as np
    csv_path = tmp_path / "p.csv"
    csv_path.write_text(write_predictions(range(5), ["0"], np.arange(5.0)[:, None], np.arange(5.0)[:, None] * 1.1))
    out = tmp_path / "p.svg"
    assert main(["plot", "--predictions", str(csv_path), "--out", str(out)]) == 0
    root = ET.parse(out).getroot()
    lines = root.findall(f"{SVG}polyline")
    assert [l.get("class") for l in lines] == ["truth", "prediction"]
    assert lines[0].get("stroke-dasharray") and not lines[1].get("stroke-dasharray")


def test_dmd_predict_without_checkpoint(tmp_path):
    gen = write(tmp_path / "g.json", {"schema_version": 1, "family": "linear", "length": 30, "n_series": 3})
    ds = str(tmp_path / "ds.json")
    assert main(["generate", "--spec", gen, "--out", ds]) == 0
    assert main(["predict", "--method", "dmd", "--dataset", ds, "--series-id", "lin-0000",
                 "--out", str(tmp_path / "p.csv"), "--horizon", "5"]) == 0
    _, _, truth, pred = read_predictions((tmp_path / "p.csv").read_text())
    assert abs(truth - pred).max() < 1e-8


@pytest.mark.parametrize("argv, msg", [
    (["generate", "--spec", "/nonexistent.json", "--out", "x"], "cannot read"),
    (["train", "--nope"], ""),
    (["frobnicate"], ""),
])
def test_errors_exit_nonzero(argv, msg, capsys):
    assert main(argv) != 0
    assert msg in capsys.readouterr().err


def test_schema_version_required(tmp_path, capsys):
    spec = write(tmp_path / "g.json", {"family": "linear"})
    assert main(["generate", "--spec", spec, "--out", str(tmp_path / "d.json")]) == 2
    assert "schema_version" in capsys.readouterr().err
    assert not (tmp_path / "d.json").exists()


def test_bad_predictions_csv(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    assert main(["plot", "--predictions", str(p), "--out", str(tmp_path / "o.svg")]) == 2
    assert "step" in capsys.readouterr().err


def test_evaluate_exit_nonzero_on_failed_method(tmp_path, capsys):
    gen = write(tmp_path / "g.json", {"schema_version": 1, "family": "linear", "length": 20, "n_series": 6})
    ds = str(tmp_path / "ds.json")
    main(["generate", "--spec", gen, "--out", ds])
    ex = write(tmp_path / "ex.json", {"schema_version": 1, "methods": ["ours", "dmd"], "repetitions": 1,
                                      "model": {"K": 4, "hidden": 8},
                                      "train": {"max_epochs": 2, "T": 15, "T_Q": 10}, "eval": {"T": 8, "T_Q": 4}})
    code = main(["evaluate", "--config", ex, "--dataset", ds, "--records", str(tmp_path / "r.csv"),
                 "--summary", str(tmp_path / "s.csv")])
    assert code == 1 and "failed" in capsys.readouterr().err
    assert (tmp_path / "r.csv").exists()
