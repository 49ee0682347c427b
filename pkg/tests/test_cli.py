import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from pairlasso.cli import SCHEMAS, main, resolve_config, ConfigError
from pairlasso.core import make_linear_basis, read_dataset_csv
from pairlasso.tuning import estimate_C_hat, lambda_hat


@pytest.fixture
def dataset(tmp_path):
    path = tmp_path / "data.csv"
    assert main(["simulate", "--theta0", "1,1,0,0", "--n", "60", "--seed", "4",
                 "--out", str(path)]) == 0
    return path


def run_json(capsys, argv):
    code = main(argv)
    out = capsys.readouterr()
    return code, (json.loads(out.out) if code == 0 and out.out else None), out.err


def test_simulate_writes_csv_and_sidecar(dataset):
    data = read_dataset_csv(dataset)
    assert (data.n, data.d) == (60, 4)
    meta = json.loads(dataset.with_suffix(".json").read_text())
    assert meta["seed"] == 4
    assert meta["config"]["theta0"] == [1.0, 1.0, 0.0, 0.0]
    assert meta["command"] == "simulate"


def test_fit_embeds_config_seed_and_threads(dataset, capsys):
    code, out, _ = run_json(capsys, ["fit", str(dataset), "--loss", "logistic", "--lambda",
                                     "0.01", "--threads", "2", "--seed", "9"])
    assert code == 0
    assert out["seed"] == 9 and out["threads"] == 2
    assert out["config"]["loss"] == "logistic" and out["config"]["lambda"] == 0.01
    assert len(out["result"]["theta_hat"]) == 4
    assert out["result"]["lambda"] == 0.01


def test_fit_auto_lambda_uses_formula(dataset, capsys):
    code, out, _ = run_json(capsys, ["fit", str(dataset)])
    data = read_dataset_csv(dataset)
    expected = lambda_hat(estimate_C_hat(data, make_linear_basis(4)), 1.0, 60, 4, 998.0)
    assert code == 0
    assert out["lambda"] == pytest.approx(expected)
    # the formula lambda exceeds lambda_max here, so nothing is selected
    assert out["result"]["support"] == []


def test_fit_cv_defaults(dataset, capsys):
    code, out, _ = run_json(capsys, ["fit", str(dataset), "--loss", "logistic", "--lambda",
                                     "cv", "--threads", "3"])
    assert code == 0
    grid = [row["lambda"] for row in out["cv"]]
    assert len(grid) == 20
    assert max(grid) == pytest.approx(out["lambda_formula"])
    assert min(grid) == pytest.approx(out["lambda_formula"] / 1e4)
    assert all(len(row["fold_risks"]) == 5 for row in out["cv"])
    assert out["lambda"] in grid


def test_fit_cv_with_logspace_grid(dataset, capsys):
    code, out, _ = run_json(capsys, ["fit", str(dataset), "--loss", "logistic", "--lambda",
                                     "cv", "--cv-grid", "logspace(-3,-1,3)", "--cv-folds", "3"])
    assert code == 0
    np.testing.assert_allclose([r["lambda"] for r in out["cv"]], [1e-3, 1e-2, 1e-1])


def test_fit_replays_from_embedded_config(dataset, tmp_path, capsys):
    first = tmp_path / "first.json"
    assert main(["fit", str(dataset), "--loss", "logistic", "--lambda", "cv",
                 "--cv-grid", "0.001,0.01", "--cv-folds", "3", "--seed", "5",
                 "--out", str(first)]) == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(json.loads(first.read_text())["config"]))
    second = tmp_path / "second.json"
    assert main(["fit", str(dataset), "--config", str(cfg), "--out", str(second)]) == 0
    assert first.read_text() == second.read_text()


def test_rank_labels_pairs(dataset, tmp_path, capsys):
    fit = tmp_path / "fit.json"
    assert main(["fit", str(dataset), "--loss", "logistic", "--lambda", "0.001",
                 "--out", str(fit)]) == 0
    theta = json.loads(fit.read_text())["result"]["theta_hat"]
    pairs = tmp_path / "pairs.csv"
    pairs.write_text("x1,x2,x3,x4,xp1,xp2,xp3,xp4\n1,1,0,0,0,0,0,0\n0,0,0,0,1,1,0,0\n"
                     "1,1,1,1,1,1,1,1\n")
    table = tmp_path / "ranked.csv"
    code, out, _ = run_json(capsys, ["rank", str(fit), str(pairs), "--csv", str(table)])
    assert code == 0
    assert [r["label"] for r in out["rows"]] == ["first", "second", "tie"]
    assert out["rows"][0]["score"] == pytest.approx(theta[0] + theta[1])
    assert out["fit_config"]["loss"] == "logistic"
    rows = list(csv.reader(table.open()))
    assert rows[0] == ["score", "label"] and len(rows) == 4


def test_tune_reports_constants(dataset, capsys):
    code, out, _ = run_json(capsys, ["tune", str(dataset), "--lambda-grid", "0.01,0.1",
                                     "--loss", "logistic", "--cv-folds", "3"])
    assert code == 0
    rep = out["report"]
    assert max(rep["weights"]) == rep["C_hat"]
    assert out["cv"]["best_lambda"] in (0.01, 0.1)


def test_diagnose_report(capsys):
    code, out, _ = run_json(capsys, ["diagnose", "--theta0", "1,0", "--m", "3", "--sigma",
                                     str(math.sqrt(0.5)), "--seed", "1"])
    assert code == 0
    rep = out["report"]
    assert rep["gram_model"]["sigma"] == (2 * np.eye(3)).tolist()
    assert rep["compatibility"][0]["model"]["cone"] == pytest.approx(math.sqrt(2), rel=1e-6)
    assert rep["margin_constant"]["sup_global"] == pytest.approx(2.0, rel=1e-6)
    assert rep["margin_check"]["violations"] == 0
    assert "epsilon_star" in rep["oracle"]


def test_rates_writes_plot_ready_files(tmp_path):
    out_dir = tmp_path / "rates"
    cfg = tmp_path / "rates.json"
    cfg.write_text(json.dumps({"theta0": [1, 1], "loss": "logistic", "n_grid": [40, 80],
                               "m_grid": [3], "replications": 2, "mc_pairs": 4000,
                               "cv_folds": 2, "cv_grid_size": 3, "oracle_max_support": 1}))
    assert main(["rates", "--config", str(cfg), "--out-dir", str(out_dir)]) == 0
    summary = json.loads((out_dir / "summary.json").read_text())
    assert summary["config"]["n_grid"] == [40, 80] and summary["seed"] == 0
    medians = list(csv.reader((out_dir / "medians.csv").open()))
    assert medians[0] == ["m", "n", "median_excess", "fitted"] and len(medians) == 3
    assert len(list(csv.reader((out_dir / "records.csv").open()))) == 5


def test_oracle_inequality_command(capsys):
    code, out, _ = run_json(capsys, ["oracle-inequality", "--n", "60", "--m", "3", "--replications", "2"])
    assert code == 0
    assert len(out["report"]["replicates"]) == 2


def test_unknown_config_field_names_the_field(dataset, tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"lamda": 0.1}))
    code, _, err = run_json(capsys, ["fit", str(dataset), "--config", str(cfg)])
    assert code == 2
    assert "lamda" in err


@pytest.mark.parametrize("field,value", [("loss", "squared"), ("cv_folds", 1),
                                         ("lambda", -1), ("tol", 0), ("seed", 1.5),
                                         ("weights", "l2")])
def test_invalid_config_values_exit_2(dataset, tmp_path, capsys, field, value):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({field: value}))
    code, _, err = run_json(capsys, ["fit", str(dataset), "--config", str(cfg)])
    assert code == 2
    assert f"'{field}'" in err


def test_data_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("x1,y\n1,2\n1,x\n")
    code, _, err = run_json(capsys, ["fit", str(bad)])
    assert code == 2 and "line 3" in err
    code, _, _ = run_json(capsys, ["fit", str(tmp_path / "missing.csv")])
    assert code == 2


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["fit"])
    assert info.value.code == 2


def test_size_limit_exits_3(capsys):
    code, _, err = run_json(capsys, ["diagnose", "--theta0", "1", "--m", "31"])
    assert code == 3 and "m <= 30" in err


def test_precedence_flags_over_file_over_defaults():
    out = resolve_config("fit", {"loss": "logistic", "tol": 1e-6}, {"tol": 1e-9, "seed": None})
    assert out["loss"] == "logistic" and out["tol"] == 1e-9 and out["seed"] == 0
    with pytest.raises(ConfigError) as info:
        resolve_config("fit", {"bogus": 1}, {})
    assert info.value.field == "bogus"


def test_every_schema_field_has_a_valid_default():
    for command, schema in SCHEMAS.items():
        for name, (check, default) in schema.items():
            if default is not None:
                assert check(name, default) == default, (command, name)


def test_module_entry_point(dataset):
    proc = subprocess.run([sys.executable, "-m", "pairlasso", "fit", str(dataset),
                           "--lambda", "0.05"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["config"]["lambda"] == 0.05
