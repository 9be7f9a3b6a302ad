import json

import numpy as np
import pandas as pd
import pytest

from dsense.cli import build_parser, main, resolve_config
from dsense.exceptions import ConfigError
from dsense.simulation import DgpConfig, sample_dgp


@pytest.fixture(scope="module")
def csv_path(tmp_path_factory):
    t = sample_dgp(DgpConfig(n=600, seed=21, beta_pi=1.2))
    rng = np.random.default_rng(0)
    frame = pd.DataFrame({"y": t.outcome, "z": t.treatment, "x1": t.covariates[:, 0],
                          "x2": rng.normal(size=t.n), "const": 1.0})
    path = tmp_path_factory.mktemp("data") / "study.csv"
    frame.to_csv(path, index=False)
    return path


def _base(csv_path, out, *extra):
    return ["--input", str(csv_path), "--outcome-col", "y", "--treatment-col", "z",
            "--covariate-cols", "x1,x2", "--out-dir", str(out), *extra]


def _report(out):
    return json.loads((out / "report.json").read_text())


def test_fit(csv_path, tmp_path):
    assert main(["fit", *_base(csv_path, tmp_path, "--trim-propensity", "0.9", "--augment", "ols")]) == 0
    rep = _report(tmp_path)
    assert rep["status"] == "ok" and rep["seed"] == 0 and rep["command"] == "fit"


def test_sensitivity_outputs(csv_path, tmp_path):
    args = _base(csv_path, tmp_path, "--reps", "50", "--lambda", "1,1.5", "--r2", "0,0.1", "--seed", "3")
    assert main(["sensitivity", *args]) == 0
    frame = pd.read_csv(tmp_path / "sensitivity.csv")
    assert len(frame) == 4
    rep = _report(tmp_path)
    # fewer than 200 replicates is flagged in the diagnostics
    assert any("replicates" in d["message"] for d in rep["diagnostics"])


def test_design_sensitivity_layout(csv_path, tmp_path):
    args = _base(csv_path, tmp_path, "--trim-propensity", "0.9", "--augment", "ols", "--tau-grid", "0.5,1")
    assert main(["design-sensitivity", *args]) == 0
    frame = pd.read_csv(tmp_path / "design_sensitivity.csv")
    assert list(frame.columns) == ["tau", "r2_plain", "r2_trim", "r2_aug",
                                   "lambda_plain", "lambda_trim", "lambda_aug"]
    assert (frame["r2_plain"].diff().dropna() > 0).all()
    gains = _report(tmp_path)["results"]["gains"]
    assert set(gains) == {"augmentation", "trimming"}


def test_plan_modes(csv_path, tmp_path):
    assert main(["plan", *_base(csv_path, tmp_path / "a", "--tau-grid", "1")]) == 0
    assert _report(tmp_path / "a")["results"]["mode"] == "planning_sample"
    assert main(["plan", *_base(csv_path, tmp_path / "b", "--tau-grid", "1", "--outcome-sim")]) == 0
    assert _report(tmp_path / "b")["results"]["mode"] == "simulated_outcomes"
    assert main(["plan", *_base(csv_path, tmp_path / "c", "--tau-grid", "1", "--proxy-r2", "0.3")]) == 0
    assert _report(tmp_path / "c")["results"]["mode"] == "proxy_outcome"


def test_power_split_layout(csv_path, tmp_path):
    args = _base(csv_path, tmp_path, "--augment", "ols", "--splits", "2", "--reps", "30",
                 "--lambda", "1", "--r2", "0", "--planning-fraction", "0.2")
    assert main(["power-split", *args]) == 0
    frame = pd.read_csv(tmp_path / "power.csv")
    assert list(frame.columns) == ["model", "gamma", "plain", "aug", "chosen"]


def test_simulate(tmp_path):
    assert main(["simulate", "--sweep", "heterogeneity", "--n", "3000", "--out-dir", str(tmp_path)]) == 0
    frame = pd.read_csv(tmp_path / "sweep_heterogeneity.csv")
    assert len(frame) == 10


def test_exit_codes(csv_path, tmp_path, capsys):
    # configuration: conflicting trim rules, missing input, bad lambda
    assert main(["fit", *_base(csv_path, tmp_path, "--trim-propensity", "0.9", "--trim-weight", "5")]) == 2
    assert main(["fit", "--out-dir", str(tmp_path)]) == 2
    assert main(["sensitivity", *_base(csv_path, tmp_path, "--lambda", "0.5")]) == 2
    # data: missing file and missing column
    assert main(["fit", *_base(tmp_path / "nope.csv", tmp_path)]) == 3
    args = _base(csv_path, tmp_path)
    args[args.index("x1,x2")] = "x1,x9"
    assert main(["fit", *args]) == 3
    assert _report(tmp_path)["status"] == "error"
    # numeric: a constant covariate makes the propensity design singular
    args[args.index("x1,x9")] = "x1,const"
    assert main(["fit", *args]) == 4
    err = capsys.readouterr().err
    assert "SingularDesignError" in err


def test_config_file_and_override(csv_path, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"input": str(csv_path), "outcome_col": "y", "treatment_col": "z",
                                "covariate_cols": "x1,x2", "reps": 40, "seed": 5,
                                "lambda": [1.0, 2.0]}))
    parser = build_parser()
    cfg = resolve_config(parser.parse_args(["sensitivity", "--config", str(conf), "--seed", "8"]), {})
    assert cfg["seed"] == 8 and cfg["reps"] == 40 and cfg["lambda"] == [1.0, 2.0]
    assert cfg["covariate_cols"] == ["x1", "x2"]
    conf.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ConfigError):
        resolve_config(parser.parse_args(["fit", "--config", str(conf)]), {})


def test_seed_from_environment(csv_path):
    parser = build_parser()
    args = parser.parse_args(["fit", *_base(csv_path, "o")])
    assert resolve_config(args, {"DSENSE_SEED": "17"})["seed"] == 17
    assert resolve_config(args, {})["seed"] == 0
    with pytest.raises(ConfigError):
        resolve_config(args, {"DSENSE_SEED": "x"})


def test_rerun_from_echoed_config_is_identical(csv_path, tmp_path):
    out1 = tmp_path / "one"
    args = _base(csv_path, out1, "--reps", "40", "--seed", "12", "--trim-weight", "6")
    assert main(["sensitivity", *args]) == 0
    cfg = _report(out1)["config"]
    out2 = tmp_path / "two"
    cfg["out_dir"] = str(out2)
    conf = tmp_path / "echo.json"
    conf.write_text(json.dumps(cfg))
    assert main(["sensitivity", "--config", str(conf)]) == 0
    assert (out1 / "sensitivity.csv").read_bytes() == (out2 / "sensitivity.csv").read_bytes()
    r1, r2 = _report(out1)["results"], _report(out2)["results"]
    assert r1 == r2
