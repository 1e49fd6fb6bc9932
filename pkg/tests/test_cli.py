import json
import subprocess
import sys

import pandas as pd
import pytest

from jmhet.cli import main
from jmhet.io import ColumnMap, load_config, load_dataset, load_fit

SIM = """
[simulate]
n = {n}

[model]
quad_points = 6
"""


def _write(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def simdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    cfg = _write(d / "sim.toml", SIM.format(n=150))
    assert main(["simulate", "--config", cfg, "--seed", "3", "--out", str(d)]) == 0
    return d


def test_simulate_deterministic(tmp_path):
    cfg = _write(tmp_path / "sim.toml", SIM.format(n=80))
    for sub in ("a", "b"):
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / sub)]) == 0
    for f in ("longitudinal.csv", "survival.csv", "fit.toml"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_simulated_csv_reingests(simdir):
    cfg = load_config(simdir / "fit.toml")
    cm = ColumnMap.from_config(cfg["columns"])
    data = load_dataset(simdir / "longitudinal.csv", simdir / "survival.csv", cm)
    assert data.n == 150 and data.K == 2


@pytest.mark.parametrize("mode,rows", [("heterogeneous", 23), ("homogeneous", 15)])
def test_fit_writes_artifacts(simdir, tmp_path, mode, rows):
    code = main(["fit", "--config", str(simdir / "fit.toml"), "--variance-mode", mode,
                 "--quad-points", "6", "--out", str(tmp_path)])
    assert code == 0
    tab = pd.read_csv(tmp_path / "se_table.csv")
    assert len(tab) == rows and tab["se"].notna().all()
    trace = pd.read_csv(tmp_path / "loglik_trace.csv")
    assert list(trace.columns) == ["iteration", "loglik"]
    fit, cm = load_fit(tmp_path / "fit.json")
    assert fit.spec.variance_mode == mode and cm is not None


def test_fit_not_converged_exit_2(simdir, tmp_path):
    cfg = _write(tmp_path / "c.toml", (simdir / "fit.toml").read_text()
                 .replace('"longitudinal.csv"', f'"{simdir / "longitudinal.csv"}"')
                 .replace('"survival.csv"', f'"{simdir / "survival.csv"}"')
                 + "\n[model]\nmax_iter = 1\nquad_points = 4\n")
    assert main(["fit", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert json.loads((tmp_path / "fit.json").read_text())["converged"] is False


def test_missing_column_exit_1(simdir, tmp_path, capsys):
    long = pd.read_csv(simdir / "longitudinal.csv").drop(columns="x2")
    long.to_csv(tmp_path / "long.csv", index=False)
    code = main(["fit", "--config", str(simdir / "fit.toml"), "--long",
                 str(tmp_path / "long.csv"), "--out", str(tmp_path)])
    assert code == 1
    assert "missing column 'x2'" in capsys.readouterr().err


def test_non_numeric_cell_exit_1(simdir, tmp_path, capsys):
    long = pd.read_csv(simdir / "longitudinal.csv")
    long["y"] = long["y"].astype(object)
    long.loc[4, "y"] = "abc"
    long.to_csv(tmp_path / "long.csv", index=False)
    code = main(["fit", "--config", str(simdir / "fit.toml"), "--long",
                 str(tmp_path / "long.csv"), "--out", str(tmp_path)])
    assert code == 1
    assert "long.csv:6: column 'y'" in capsys.readouterr().err


def test_bad_toml_exit_1(tmp_path, capsys):
    cfg = _write(tmp_path / "bad.toml", "[simulate]\nn = = 3\n")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "line 2" in capsys.readouterr().err


def test_unknown_key_exit_1(tmp_path):
    cfg = _write(tmp_path / "bad.toml", "[simulate]\nsize = 3\n")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 1


def test_fit_predict_roundtrip(simdir, tmp_path):
    fit_dir = tmp_path / "fit"
    assert main(["fit", "--config", str(simdir / "fit.toml"), "--quad-points", "6",
                 "--out", str(fit_dir)]) == 0
    outs = []
    for sub in ("p1", "p2"):
        assert main(["predict", "--model", str(fit_dir / "fit.json"), "--history",
                     str(simdir / "longitudinal.csv"), "--landmark", "2",
                     "--horizons", "3", "5", "--out", str(tmp_path / sub)]) == 0
        outs.append((tmp_path / sub / "predictions.csv").read_bytes())
    assert outs[0] == outs[1]
    pred = pd.read_csv(tmp_path / "p1" / "predictions.csv")
    assert list(pred.columns) == ["subject_id", "risk", "s", "u", "cif", "flags"]
    assert pred["cif"].between(0, 1).all()
    n_hist = pd.read_csv(simdir / "longitudinal.csv")["id"].nunique()
    assert len(pred) == n_hist * 2 * 2


def test_mc_smoke(tmp_path):
    cfg = _write(tmp_path / "mc.toml", "[simulate]\nn = 200\n\n[mc]\nreps = 5\n"
                 "configs = [\"homogeneous\"]\n\n[model]\nquad_points = 6\n")
    assert main(["mc", "--config", cfg, "--out", str(tmp_path)]) == 0
    tab = pd.read_csv(tmp_path / "mc_table.csv")
    assert (tab["n_ok"] == 5).all()
    assert (tmp_path / "mc_table.txt").read_text().startswith("Monte Carlo replicates: 5")


def test_bench(tmp_path):
    cfg = _write(tmp_path / "b.toml", "[bench]\nsizes = [500, 1000]\nrepeats = 1\n")
    assert main(["bench", "--config", cfg, "--out", str(tmp_path)]) == 0
    df = pd.read_csv(tmp_path / "bench.csv")
    assert set(df.kernel) == {"fast", "naive"} and len(df) == 4


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "jmhet", "--version"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and out.stdout.startswith("jmhet ")


def test_crossval(tmp_path):
    cfg = _write(tmp_path / "cv.toml", "[simulate]\nn = 300\n\n[crossval]\nfolds = 2\n"
                 "horizons = [4.0, 6.0]\nconfigs = [\"homogeneous\"]\n\n"
                 "[model]\nquad_points = 6\n")
    assert main(["crossval", "--config", cfg, "--out", str(tmp_path)]) == 0
    tab = pd.read_csv(tmp_path / "mape.csv")
    assert len(tab) == 2 * 2 and set(tab.config) == {"homogeneous"}
    assert len(pd.read_csv(tmp_path / "mape_folds.csv")) == 2 * 2 * 2
