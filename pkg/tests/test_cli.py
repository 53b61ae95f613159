import csv
import json

import numpy as np
import pytest

from rmstbart.cli import build_parser, main, parse_args
from rmstbart.errors import ConfigurationError

from conftest import friedman_data

FAST = ["--iters", "200", "--burnin", "50", "--H", "10"]


@pytest.fixture
def toy_csv(tmp_path):
    d = friedman_data(n=60, p=5, seed=1)
    p = tmp_path / "toy.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "time", "event"] + [f"x{j}" for j in range(5)])
        for i in range(d.n):
            w.writerow([f"s{i}", d.times[i], d.events[i]] + list(d.covariates[i]))
    return p


def read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def fit(tmp_path, toy_csv, *extra, name="m"):
    model = tmp_path / f"{name}.json"
    summary = tmp_path / f"{name}.csv"
    code = main(["fit", "--input", str(toy_csv), "--id-col", "id", "--tau", "20",
                 "--output-model", str(model), "--output-summary", str(summary), *FAST, *extra])
    return code, model, summary


def test_fit_smoke(tmp_path, toy_csv):
    code, model, summary = fit(tmp_path, toy_csv)
    assert code == 0
    rows = read(summary)
    assert rows[0] == ["id", "mean", "lower", "upper"]
    assert len(rows) == 61 and rows[1][0] == "s0"
    for r in rows[1:]:
        lo, m, hi = float(r[2]), float(r[1]), float(r[3])
        assert lo <= m <= hi
    meta = json.loads(model.read_text())
    assert meta["format-version"] == 1
    assert meta["metadata"]["censoring_model"] == "noninformative"


def test_fit_deterministic(tmp_path, toy_csv):
    _, m1, s1 = fit(tmp_path, toy_csv, name="a")
    _, m2, s2 = fit(tmp_path, toy_csv, name="b")
    assert s1.read_bytes() == s2.read_bytes()
    assert json.loads(m1.read_text())["draws"] == json.loads(m2.read_text())["draws"]


def test_fit_dep_records_informative(tmp_path, toy_csv):
    code, model, _ = fit(tmp_path, toy_csv, "--censoring", "dep")
    assert code == 0
    assert json.loads(model.read_text())["metadata"]["censoring_model"] == "informative"


def test_missing_event_column(tmp_path, toy_csv, capsys):
    out = tmp_path / "x.csv"
    code = main(["fit", "--input", str(toy_csv), "--event-col", "status", "--tau", "20",
                 "--output-model", str(tmp_path / "x.json"), "--output-summary", str(out), *FAST])
    assert code == 2
    assert "status" in capsys.readouterr().err
    assert not out.exists()


def test_bad_config_no_partial_output(tmp_path, toy_csv, capsys):
    code = main(["fit", "--input", str(toy_csv), "--id-col", "id", "--tau", "20", "--iters", "10", "--burnin", "10",
                 "--output-model", str(tmp_path / "x.json"), "--output-summary", str(tmp_path / "x.csv")])
    assert code == 3
    assert list(tmp_path.iterdir()) == [toy_csv]


def test_missing_required_flag():
    with pytest.raises(ConfigurationError, match="--tau"):
        parse_args(["fit", "--input", "a.csv", "--output-model", "m", "--output-summary", "s"])
    assert main(["fit", "--input", "a.csv"]) == 3


def test_unreadable_input(tmp_path):
    code = main(["fit", "--input", str(tmp_path / "nope.csv"), "--tau", "5",
                 "--output-model", str(tmp_path / "m.json"), "--output-summary", str(tmp_path / "s.csv")])
    assert code == 2


def test_predict_matches_fit_summary(tmp_path, toy_csv):
    _, model, summary = fit(tmp_path, toy_csv)
    out = tmp_path / "pred.csv"
    assert main(["predict", "--model", str(model), "--input", str(toy_csv), "--id-col", "id",
                 "--output", str(out)]) == 0
    assert out.read_bytes() == summary.read_bytes()


def test_predict_schema_mismatch(tmp_path, toy_csv, capsys):
    _, model, _ = fit(tmp_path, toy_csv)
    bad = tmp_path / "bad.csv"
    bad.write_text("x0,x1,x2\n0.1,0.2,0.3\n")
    assert main(["predict", "--model", str(model), "--input", str(bad), "--output", str(tmp_path / "o.csv")]) == 2
    err = capsys.readouterr().err
    assert "x3" in err and "x4" in err


def test_importance_and_pdp(tmp_path, toy_csv):
    _, model, _ = fit(tmp_path, toy_csv)
    imp = tmp_path / "imp.csv"
    assert main(["importance", "--model", str(model), "--output", str(imp)]) == 0
    rows = read(imp)
    assert rows[0] == ["variable", "mean_splits"]
    vals = [float(r[1]) for r in rows[1:]]
    assert sorted(vals, reverse=True) == vals and len(vals) == 5
    pdp = tmp_path / "pdp.csv"
    assert main(["pdp", "--model", str(model), "--input", str(toy_csv), "--var", "x3",
                 "--output", str(pdp)]) == 0
    rows = read(pdp)
    assert rows[0] == ["x3", "partial_dependence"] and len(rows) == 21
    assert main(["pdp", "--model", str(model), "--input", str(toy_csv), "--var", "zz",
                 "--output", str(tmp_path / "p2.csv")]) == 2


def test_never_split_model(tmp_path, toy_csv):
    # with a vanishing split probability no grow move is ever accepted
    _, model, _ = fit(tmp_path, toy_csv, "--alpha", "1e-300", name="stump")
    imp = tmp_path / "imp.csv"
    main(["importance", "--model", str(model), "--output", str(imp)])
    assert all(float(r[1]) == 0.0 for r in read(imp)[1:])
    pdp = tmp_path / "pdp.csv"
    main(["pdp", "--model", str(model), "--input", str(toy_csv), "--var", "x0", "--output", str(pdp)])
    vals = {r[1] for r in read(pdp)[1:]}
    assert len(vals) == 1


def test_config_file_and_override(tmp_path, toy_csv):
    conf = tmp_path / "run.yaml"
    conf.write_text(f"input: {toy_csv}\ntau: 20\nH: 7\niters: 100\nburnin: 20\n")
    args = parse_args(["fit", "--config", str(conf), "--output-model", "m", "--output-summary", "s"])
    assert args.H == 7 and args.tau == 20 and args.iters == 100
    args = parse_args(["fit", "--config", str(conf), "--H", "9", "--output-model", "m", "--output-summary", "s"])
    assert args.H == 9
    conf.write_text("bogus: 1\n")
    with pytest.raises(ConfigurationError, match="bogus"):
        parse_args(["fit", "--config", str(conf), "--output-model", "m", "--output-summary", "s"])


def test_help_lists_defaults():
    sub = build_parser()._subparsers._group_actions[0].choices
    text = sub["fit"].format_help().split("options:", 1)[1]
    for flag, default in [("--H", "200"), ("--kappa", "2.0"), ("--alpha", "0.95"), ("--beta", "2.0"),
                          ("--iters", "2500"), ("--burnin", "500"), ("--thin", "1"), ("--chains", "1"),
                          ("--kappa0", "1.0"), ("--alpha-increment", "1.0"), ("--weight-cap", "20.0"),
                          ("--censoring", "noninf")]:
        assert flag in text
        seg = text.split(f"\n  {flag} ", 1)[1].split("\n  --", 1)[0]
        assert f"(default: {default})" in " ".join(seg.split()), flag
    assert "(default: 0.1, 0.25, 0.5, 0.75, 1.0, 1.5)" in " ".join(sub["cv"].format_help().split()).replace("[", "").replace("]", "")


def test_cv_single_candidate(tmp_path, toy_csv, capsys):
    out = tmp_path / "cv.csv"
    code = main(["cv", "--input", str(toy_csv), "--id-col", "id", "--tau", "20", "--candidates", "1.0",
                 "--folds", "2", "--output", str(out), "--iters", "40", "--burnin", "10", "--H", "5"])
    assert code == 0
    rows = read(out)
    assert len(rows) == 2 and rows[1][-1] == "1"
    chosen = float(capsys.readouterr().out.strip())
    sigma_r2 = float(rows[1][1])
    assert chosen == pytest.approx(1 / (2 * sigma_r2))


def simulate(tmp_path, name):
    out = tmp_path / f"{name}.csv"
    code = main(["simulate", "--family", "friedman", "--n", "250", "--p", "10", "--r", "0.1", "--reps", "2",
                 "--seed", "7", "--n-test", "100", "--output", str(out), *FAST])
    assert code == 0
    return out


def test_simulate_byte_identical(tmp_path):
    a = simulate(tmp_path, "a")
    b = simulate(tmp_path, "b")
    assert a.read_bytes() == b.read_bytes()
    agg_a = tmp_path / "a_aggregate.csv"
    assert agg_a.read_bytes() == (tmp_path / "b_aggregate.csv").read_bytes()
    header = read(agg_a)[0]
    for col in ("method", "n", "p", "rate", "mean_rmse"):
        assert col in header
    assert [r[0] for r in read(agg_a)[1:]] == ["null", "rmst-bart-default"]
    assert (tmp_path / "a_timing.csv").exists()


def test_simulate_unknown_method(tmp_path):
    code = main(["simulate", "--methods", "cox", "--output", str(tmp_path / "o.csv")])
    assert code == 3
    assert not (tmp_path / "o.csv").exists()
