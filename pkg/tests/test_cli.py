"""
Tests for CSV ingestion and the command line.
Covers:
- read_csv: column selection and row/column-addressed errors
- fit: written files, their consistency and byte-for-byte determinism
- error exits with error.json
- density-curve, delta-bic, bootstrap and simulate commands
- real-data fits on the fixture CSVs (Boston ones slow and only with a built boston.csv)
"""
import json
import math
import os
import sys
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from scipy import integrate

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from conftest import FIXTURES, fixture_csv
from data_io import fit_summary, read_csv
from errors import MissingColumn, MissingValue, NonNumericCell
from main import main
from models import FitConfig, SimScenario, TelescopeConfig
from optimizer import telescope_fit

FAST = ["--telescope", "10:1e-4:15"]


@pytest.fixture
def hetero_csv(tmp_path):
    rng = np.random.default_rng(21)
    n = 150
    Z = rng.normal(size=(n, 3))
    s = np.exp(0.5 * (-1.0 + Z[:, 1]))
    y = 1.0 + Z[:, 0] + s * rng.normal(size=n) / math.sqrt(2.0)
    path = tmp_path / "hetero.csv"
    pd.DataFrame({"y": y, "a": Z[:, 0], "b": Z[:, 1], "c": Z[:, 2]}).to_csv(path, index=False)
    return str(path)


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr().out
    return code, (json.loads(out) if code == 0 else None)


# ────────────────────────── read_csv ────────────────────────────────────────

def test_read_csv_tiny_fixture():
    data = read_csv(os.path.join(FIXTURES, "tiny.csv"), "y")
    assert data.n == 4 and data.names == ("x1", "x2")
    np.testing.assert_array_equal(data.y, [1.5, -0.25, 2.0, 4.5])
    np.testing.assert_array_equal(data.X[:, 2], [3, 4, 7, 1])
    only = read_csv(os.path.join(FIXTURES, "tiny.csv"), "y", ["x2"])
    assert only.names == ("x2",) and only.X.shape == (4, 2)


def test_read_csv_missing_column():
    with pytest.raises(MissingColumn) as err:
        read_csv(os.path.join(FIXTURES, "tiny.csv"), "zz")
    assert err.value.context["column"] == "zz"
    with pytest.raises(MissingColumn):
        read_csv(os.path.join(FIXTURES, "tiny.csv"), "y", ["x1", "x9"])


def test_read_csv_missing_value(tmp_path):
    path = tmp_path / "na.csv"
    path.write_text("y,x1\n1,2\n2,3\nNA,4\n3,1\n5,0\n", encoding="utf-8")
    with pytest.raises(MissingValue) as err:
        read_csv(str(path), "y")
    assert err.value.context["row"] == 3 and err.value.context["column"] == "y"


def test_read_csv_non_numeric(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("y,x1\n1,2\n2,abc\n3,1\n5,0\n", encoding="utf-8")
    with pytest.raises(NonNumericCell) as err:
        read_csv(str(path), "y")
    payload = err.value.to_dict()
    assert payload["error"] == "NonNumericCell"
    assert payload["row"] == 2 and payload["column"] == "x1" and payload["value"] == "abc"


# ────────────────────────── fit ─────────────────────────────────────────────

def test_fit_writes_consistent_outputs(hetero_csv, tmp_path, capsys):
    prefix = str(tmp_path / "out" / "run_")
    code, printed = run(["fit", "--data", hetero_csv, "--response", "y", "--out-prefix", prefix, *FAST], capsys)
    assert code == 0 and printed["command"] == "fit"
    for name in ("estimates.csv", "path.csv", "summary.json", "residuals.csv"):
        assert os.path.exists(prefix + name)

    est = pd.read_csv(prefix + "estimates.csv")
    path = pd.read_csv(prefix + "path.csv")
    with open(prefix + "summary.json", encoding="utf-8") as f:
        summary = json.load(f)
    residuals = pd.read_csv(prefix + "residuals.csv")

    assert est.shape[0] == 9
    assert "timing" not in summary
    slopes = est[est["variable"] != "(Intercept)"]
    selected_beta = slopes[(slopes["component"] == "beta") & slopes["selected"]]["variable"].tolist()
    selected_alpha = slopes[(slopes["component"] == "alpha") & slopes["selected"]]["variable"].tolist()
    assert summary["active_beta"] == selected_beta
    assert summary["active_alpha"] == selected_alpha
    assert "a" in selected_beta and "b" in selected_alpha
    assert summary["df"] == len(selected_beta) + len(selected_alpha) + 3
    assert summary["bic"] == pytest.approx(-2 * summary["loglik"] + math.log(150) * summary["df"])

    assert path.shape == (15, 2 + 9)
    assert path["epsilon"].iloc[-1] == pytest.approx(1e-4)
    last = path.iloc[-1]
    for _, row in est.iterrows():
        key = f"{row['component']}:{row['variable']}"
        assert last[key] == pytest.approx(row["estimate_standardized"], rel=1e-12, abs=1e-300)
    assert residuals.shape == (150, 2)


def test_fit_is_deterministic(hetero_csv, tmp_path, capsys):
    first, second = str(tmp_path / "a_"), str(tmp_path / "b_")
    for prefix in (first, second):
        code, _ = run(["fit", "--data", hetero_csv, "--response", "y", "--out-prefix", prefix, *FAST], capsys)
        assert code == 0
    for name in ("estimates.csv", "path.csv", "summary.json", "residuals.csv"):
        with open(first + name, "rb") as f1, open(second + name, "rb") as f2:
            assert f1.read() == f2.read()


def test_fit_records_timing_on_request(hetero_csv, tmp_path, capsys):
    prefix = str(tmp_path / "t_")
    code, _ = run(["fit", "--data", hetero_csv, "--response", "y", "--out-prefix", prefix,
                   "--record-timing", "--mode", "spr", *FAST], capsys)
    assert code == 0
    with open(prefix + "summary.json", encoding="utf-8") as f:
        summary = json.load(f)
    assert summary["timing"]["wall_seconds"] >= 0
    assert summary["mode"] == "spr" and summary["active_alpha"] == []


def test_summary_does_not_call_a_stalled_fit_converged(hetero_csv):
    data = read_csv(hetero_csv, "y")
    fit = telescope_fit(data, FitConfig(telescope=TelescopeConfig.parse("10:1e-4:15")))
    steps = len(fit.diagnostics.converged)
    clean = replace(fit, diagnostics=replace(fit.diagnostics, converged=(True,) * steps,
                                             stalled=(False,) * steps))
    assert fit_summary(clean)["converged"] is True and fit_summary(clean)["stalled"] is False
    stalled = replace(clean, diagnostics=replace(clean.diagnostics, stalled=(False,) * (steps - 1) + (True,)))
    summary = fit_summary(stalled)
    assert summary["converged"] is False
    assert summary["stalled"] is True


# ────────────────────────── errors ──────────────────────────────────────────

def test_missing_column_exits_with_error_json(hetero_csv, tmp_path, capsys):
    prefix = str(tmp_path / "err_")
    code = main(["fit", "--data", hetero_csv, "--response", "zz", "--out-prefix", prefix])
    assert code == 1
    assert "MissingColumn" in capsys.readouterr().err
    with open(prefix + "error.json", encoding="utf-8") as f:
        payload = json.load(f)
    assert payload["error"] == "MissingColumn" and payload["column"] == "zz"


def test_missing_file_exits_with_error_json(tmp_path, capsys):
    prefix = str(tmp_path / "nofile_")
    code = main(["fit", "--data", str(tmp_path / "absent.csv"), "--response", "y", "--out-prefix", prefix])
    assert code == 1
    with open(prefix + "error.json", encoding="utf-8") as f:
        assert json.load(f)["error"] == "FileNotFoundError"


def test_fit_without_data_is_an_error(tmp_path, capsys):
    assert main(["fit", "--out-prefix", str(tmp_path / "x_")]) == 1
    assert os.path.exists(str(tmp_path / "x_error.json"))


# ────────────────────────── other commands ──────────────────────────────────

def curves_integrate_to_one(frame):
    for _, curve in frame.groupby("level"):
        mass = integrate.trapezoid(curve["density"].to_numpy(), curve["y"].to_numpy())
        assert mass == pytest.approx(1.0, abs=0.02)


def test_density_curve(hetero_csv, tmp_path, capsys):
    prefix = str(tmp_path / "curve_")
    code, printed = run(["density-curve", "--data", hetero_csv, "--response", "y", "--vary", "b",
                         "--points", "400", "--out-prefix", prefix, *FAST], capsys)
    assert code == 0 and printed["written"] == [prefix + "curves.csv"]
    frame = pd.read_csv(prefix + "curves.csv")
    assert set(frame["level"]) == {"Q1", "Q3"}
    assert list(frame.columns) == ["level", "value", "mu", "s", "y", "density"]
    curves_integrate_to_one(frame)
    s = frame.groupby("level")["s"].first()
    assert s["Q3"] > s["Q1"]


def test_density_curve_zero_scale_effect_shifts_only(hetero_csv, tmp_path, capsys):
    prefix = str(tmp_path / "spr_")
    code, _ = run(["density-curve", "--data", hetero_csv, "--response", "y", "--vary", "a", "--mode", "spr",
                   "--levels", "Q1,median,2.5", "--out-prefix", prefix, *FAST], capsys)
    assert code == 0
    frame = pd.read_csv(prefix + "curves.csv")
    assert frame["level"].nunique() == 3
    assert frame.groupby("level")["s"].first().nunique() == 1
    assert frame.groupby("level")["mu"].first().nunique() == 3


def test_density_curve_unknown_covariate(hetero_csv, tmp_path, capsys):
    prefix = str(tmp_path / "bad_")
    code = main(["density-curve", "--data", hetero_csv, "--response", "y", "--vary", "zz",
                 "--out-prefix", prefix, *FAST])
    assert code == 1
    with open(prefix + "error.json", encoding="utf-8") as f:
        assert json.load(f)["error"] == "UnknownCovariate"


def test_delta_bic_command(hetero_csv, tmp_path, capsys):
    prefix = str(tmp_path / "dbic_")
    code, _ = run(["delta-bic", "--data", hetero_csv, "--response", "y", "--variables", "a",
                   "--out-prefix", prefix, *FAST], capsys)
    assert code == 0
    table = pd.read_csv(prefix + "delta_bic.csv")
    assert table["variable"].tolist() == ["a"]
    assert table["d_beta"].iloc[0] > 10.0

    code, _ = run(["delta-bic", "--data", hetero_csv, "--response", "y", "--variables", "a",
                   "--refit", "telescope", "--out-prefix", prefix, *FAST], capsys)
    assert code == 0
    assert pd.read_csv(prefix + "delta_bic.csv")["d_beta"].iloc[0] > 10.0
    with pytest.raises(SystemExit):
        main(["delta-bic", "--data", hetero_csv, "--response", "y", "--refit", "greedy"])


def test_bootstrap_command(hetero_csv, tmp_path, capsys):
    prefix = str(tmp_path / "boot_")
    code, _ = run(["bootstrap", "--data", hetero_csv, "--response", "y", "--B", "3", "--seed", "5",
                   "--out-prefix", prefix, *FAST], capsys)
    assert code == 0
    table = pd.read_csv(prefix + "bootstrap_se.csv")
    assert {"se_boot", "se_sandwich", "n_failed"} <= set(table.columns)
    assert (table["se_boot"] >= 0).all()


def test_simulate_command(tmp_path, capsys):
    scenario = SimScenario(name="cli", beta_true=[1.0, 1.0, 0.0], alpha_true=[0.0, 0.8, 0.0],
                           covariate_spec=["norm", "exp"], n=120)
    spec_path = tmp_path / "scenario.json"
    spec_path.write_text(scenario.json(), encoding="utf-8")
    prefix = str(tmp_path / "sim_")
    code, _ = run(["simulate", "--scenario", str(spec_path), "--replicates", "2", "--seed", "4",
                   "--out-prefix", prefix, "--telescope", "10:1e-4:10"], capsys)
    assert code == 0
    params = pd.read_csv(prefix + "metrics_params.csv")
    assert params.shape[0] == 7
    with open(prefix + "metrics_selection.json", encoding="utf-8") as f:
        selection = json.load(f)
    assert selection["replicates"] + selection["failures"] == 2
    assert selection["scenario"]["seed"] == 4 and selection["se_method"] == "sandwich"


# ────────────────────────── real data ───────────────────────────────────────

BOSTON_COVARIATES = "crim,zn,indus,rm,age,rad,ptratio,lnox,ldis,ltax,llstat,chast"


@pytest.mark.slow
def test_boston_fit(tmp_path, capsys):
    path = fixture_csv("boston.csv")
    prefix = str(tmp_path / "boston_")
    code, _ = run(["fit", "--data", path, "--response", "lcmedv", "--covariates", BOSTON_COVARIATES,
                   "--out-prefix", prefix], capsys)
    assert code == 0
    with open(prefix + "summary.json", encoding="utf-8") as f:
        summary = json.load(f)
    assert set(summary["active_alpha"]) == {"ltax", "ldis", "rad"}
    assert {"ltax", "rm", "ldis", "llstat", "ptratio", "crim", "rad", "lnox"} <= set(summary["active_beta"])
    assert not {"zn", "indus"} & set(summary["active_beta"])
    assert 1.37 <= summary["kappa_hat"] <= 1.67
    assert summary["bic"] == pytest.approx(-457, abs=10)


@pytest.mark.slow
def test_boston_delta_bic(tmp_path, capsys):
    path = fixture_csv("boston.csv")
    prefix = str(tmp_path / "boston_")
    code, _ = run(["delta-bic", "--data", path, "--response", "lcmedv", "--covariates", BOSTON_COVARIATES,
                   "--out-prefix", prefix, "--workers", "4"], capsys)
    assert code == 0
    table = pd.read_csv(prefix + "delta_bic.csv").set_index("variable")
    assert table["d_both"].idxmax() == "ltax"
    both = table["d_both"].dropna()
    worst = table[["d_beta", "d_alpha"]].max(axis=1).loc[both.index]
    assert (both >= worst - 10).all()


def test_diabetes_fixture_is_shipped():
    data = read_csv(os.path.join(FIXTURES, "diabetes.csv"), "Y")
    assert data.n == 442
    assert data.names == ("AGE", "SEX", "BMI", "BP", "S1", "S2", "S3", "S4", "S5", "S6")
    assert data.y[:3].tolist() == [151.0, 75.0, 141.0]
    assert set(np.unique(data.X[:, 2])) == {1.0, 2.0}


def test_diabetes_fit(tmp_path, capsys):
    path = os.path.join(FIXTURES, "diabetes.csv")
    prefix = str(tmp_path / "diabetes_")
    code, _ = run(["fit", "--data", path, "--response", "Y", "--out-prefix", prefix], capsys)
    assert code == 0
    with open(prefix + "summary.json", encoding="utf-8") as f:
        summary = json.load(f)
    assert set(summary["active_beta"]) == {"BMI", "S5", "S3", "BP", "SEX"}
    assert summary["active_alpha"] == ["BMI"]
    assert 0.59 <= summary["nu0_hat"] <= 0.99
    assert summary["bic"] == pytest.approx(4819.2, abs=1.0)

    code, _ = run(["delta-bic", "--data", path, "--response", "Y", "--variables", "BMI",
                   "--out-prefix", prefix], capsys)
    assert code == 0
    table = pd.read_csv(prefix + "delta_bic.csv")
    assert 3 <= table["d_alpha"].iloc[0] <= 12
    assert table["d_beta"].iloc[0] > 10 and table["d_both"].iloc[0] > 10
