import csv
import json
import time
from pathlib import Path

import pytest

from kpgmrf.cli import main

ROOT = Path(__file__).resolve().parents[1]
TOY = ROOT / "data" / "toy"
SMALL = ["--chains", "2", "--draws", "20", "--thin", "1", "--prior", "laplace:0.5"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _manifest(d):
    return json.loads((Path(d) / "manifest.json").read_text())


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    sim, fit = base / "sim", base / "fit"
    assert main(["simulate", "--seed", "3", "--n-countries", "12", "--out", str(sim)]) == 0
    assert main(["fit", str(sim / "panel.csv"), "--countries", str(sim / "countries.csv"),
                 "--seed", "4", "--threads", "1", *SMALL, "--out", str(fit)]) == 0
    return sim, fit


def test_simulate_outputs(fitted):
    sim, _ = fitted
    for name in ("panel.csv", "countries.csv", "scenario.ini", "truth_params.csv", "truth_cells.csv",
                 "manifest.json"):
        assert (sim / name).is_file()
    assert len(_rows(sim / "truth_params.csv")) == 33
    assert len(_rows(sim / "truth_cells.csv")) == 12 * 33


def test_fit_outputs_and_manifest(fitted):
    _, fit = fitted
    for name in ("draws.csv", "panel.csv", "countries.csv", "diagnostics.csv", "manifest.json"):
        assert (fit / name).is_file()
    m = _manifest(fit)
    assert m["subcommand"] == "fit"
    assert m["model"]["prior"] == "laplace:0.5"
    assert m["seeds"]["seed"] == 4 and "sampled" not in m["seeds"]
    assert m["config"]["sampler"]["chains"] == 2
    assert all(len(h) == 64 for h in m["inputs"].values())
    assert set(m["outputs"]) == {"draws.csv", "panel.csv", "countries.csv", "diagnostics.csv"}
    assert isinstance(m["nonconvergence"], bool)


def test_fit_is_bit_identical(fitted, tmp_path):
    sim, fit = fitted
    assert main(["fit", str(sim / "panel.csv"), "--countries", str(sim / "countries.csv"),
                 "--seed", "4", "--threads", "2", *SMALL, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "draws.csv").read_bytes() == (fit / "draws.csv").read_bytes()


def test_report(fitted, tmp_path):
    _, fit = fitted
    assert main(["report", str(fit), "--seed", "5", "--ratio-up", "2.0", "--sweeps", "2",
                 "--out", str(tmp_path)]) == 0
    classes = {r["class"] for r in _rows(tmp_path / "changes.csv")}
    assert classes <= {"increase", "decrease", "no_change"}
    corr = _rows(tmp_path / "correlations.csv")
    assert len(corr) == 6
    assert [r["kind"] for r in corr] == ["temporal"] * 3 + ["cross"] * 3
    est = _rows(tmp_path / "estimates.csv")
    assert len(est) == 12 * 33
    assert _manifest(tmp_path)["config"]["contrast"]["ratio_up"] == 2.0


def test_predict_contrast_diagnose(fitted, tmp_path):
    _, fit = fitted
    pred = tmp_path / "pred"
    assert main(["predict", str(fit), "--seed", "6", "--sweeps", "1", "--out", str(pred)]) == 0
    assert (pred / "cells.npz").is_file() and (pred / "estimates.csv").is_file()
    con = tmp_path / "con"
    assert main(["contrast", str(pred), "--prob", "0.9", "--out", str(con)]) == 0
    assert len(_rows(con / "changes.csv")) == 12 * 3
    dia = tmp_path / "dia"
    assert main(["diagnose", str(fit / "draws.csv"), "--out", str(dia)]) == 0
    assert len(_rows(dia / "diagnostics.csv")) == 34


def test_ingest(tmp_path):
    assert main(["ingest", str(TOY / "panel.csv"), "--countries", str(TOY / "countries.csv"),
                 "--out", str(tmp_path)]) == 0
    prof = _rows(tmp_path / "sparsity.csv")
    assert [r["population"] for r in prof] == ["MSM", "FSW", "PWID"]
    assert all(sum(int(r[k]) for k in ("n_zero", "n_1_4", "n_5_plus")) == 20 for r in prof)


def test_missing_panel_leaves_nothing(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["fit", str(tmp_path / "nope.csv"), "--seed", "1", "--out", str(out)]) == 2
    err = capsys.readouterr()
    assert err.err.startswith("error IoError:") and err.err.count("\n") == 1
    assert err.out == ""
    assert not out.exists()


def test_report_without_fit(tmp_path, capsys):
    assert main(["report", str(tmp_path), "--out", str(tmp_path / "r")]) == 8
    assert "error MissingArtifact" in capsys.readouterr().err


def test_config_errors(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[sampler]\nchain = 3\n")
    assert main(["cv", str(TOY / "panel.csv"), "--config", str(cfg), "--out", str(tmp_path)]) == 9
    assert main(["fit", str(TOY / "panel.csv"), "--countries", str(TOY / "countries.csv"), "--fix", "bogus=1",
                 "--out", str(tmp_path)]) == 9
    assert main(["fit"]) == 9
    assert "error ConfigError" in capsys.readouterr().err


def test_config_file_values_used(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[run]\nseed = 77\n[cv]\nfolds = 3\n")
    out = tmp_path / "cv"
    assert main(["cv", str(TOY / "panel.csv"), "--countries", str(TOY / "countries.csv"), "--model", "baseline",
                 "--config", str(cfg), "--out", str(out)]) == 0
    m = _manifest(out)
    assert m["seeds"]["seed"] == 77 and m["config"]["cv"]["folds"] == 3
    assert len(_rows(out / "cv.csv")) == 4


def test_seed_sampled_when_omitted(tmp_path):
    assert main(["simulate", "--n-countries", "3", "--out", str(tmp_path)]) in (0, 4)
    if (tmp_path / "manifest.json").exists():
        seeds = _manifest(tmp_path)["seeds"]
        assert seeds["sampled"] is True and isinstance(seeds["seed"], int)


def test_fix_and_ablation_recorded(tmp_path):
    assert main(["fit", str(TOY / "panel.csv"), "--countries", str(TOY / "countries.csv"), "--seed", "2",
                 "--threads", "1", *SMALL, "--ablation", "no_time", "--fix", "rho_MSM_FSW=0",
                 "--out", str(tmp_path)]) == 0
    m = _manifest(tmp_path)
    assert m["model"]["tag"] == "no_time"
    assert [30, 0.0] in m["model"]["fixed"] and [27, 0.0] in m["model"]["fixed"]


def test_cv_threads_do_not_change_mse(tmp_path):
    args = ["cv", str(TOY / "panel.csv"), "--countries", str(TOY / "countries.csv"), "--seed", "9",
            "--folds", "3", *SMALL]
    assert main([*args, "--threads", "1", "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--threads", "3", "--out", str(tmp_path / "b")]) == 0
    a = _manifest(tmp_path / "a")["cv_mse"]["full"]
    b = _manifest(tmp_path / "b")["cv_mse"]["full"]
    assert a == b
    assert (tmp_path / "a" / "cv.csv").read_bytes() == (tmp_path / "b" / "cv.csv").read_bytes()


def test_toy_fit_budget(tmp_path):
    t0 = time.perf_counter()
    assert main(["fit", str(TOY / "panel.csv"), "--countries", str(TOY / "countries.csv"), "--seed", "1",
                 "--threads", "1", "--chains", "4", "--draws", "500", "--out", str(tmp_path)]) == 0
    assert time.perf_counter() - t0 < 300
    for name in ("draws.csv", "diagnostics.csv", "manifest.json"):
        assert (tmp_path / name).is_file()
