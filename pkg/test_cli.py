"""
Tests CLI - Sous-commandes et codes de sortie
=============================================
"""

import os

import pandas as pd
import pytest

from main import EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, main

ROOT = os.path.dirname(os.path.abspath(__file__))
SPECS = os.path.join(ROOT, "sandbox", "specs")


@pytest.fixture(autouse=True)
def isolated(tmp_path, monkeypatch):
    monkeypatch.setenv("SPINRES_LOG_FILE", str(tmp_path / "logs" / "experiment_data.json"))
    monkeypatch.setenv("SPINRES_OUTPUT_DIR", str(tmp_path / "outputs"))
    monkeypatch.setenv("SPINRES_THREADS", "1")


def spec(name):
    return os.path.join(SPECS, name)


# ============================================================
# CODES DE SORTIE
# ============================================================

def test_validate_exit_codes(capsys):
    assert main(["validate", "--spec", spec("deer_retuned.json")]) == EXIT_OK
    assert main(["validate", "--spec", spec("bad.json")]) == EXIT_VALIDATION
    assert "t < t_min (6 μs)" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["deer"],
    ["fit"],
    ["deer", "--spec", "x.json", "--threads", "0"],
    ["fieldmap", "--power", "loud"],
])
def test_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


def test_unreadable_spec_is_a_validation_failure(tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text('{"kind": "deer",\n "parameters": }')
    assert main(["deer", "--spec", str(broken)]) == EXIT_VALIDATION
    assert main(["deer", "--spec", str(tmp_path / "missing.json")]) == EXIT_VALIDATION


def test_kind_must_match_subcommand():
    assert main(["deer", "--spec", spec("tune_step.json")]) == EXIT_VALIDATION


def test_invalid_override_is_reported():
    assert main(["deer", "--spec", spec("deer_retuned.json"), "--set", "parameters.t_start=4us"]) == EXIT_VALIDATION


# ============================================================
# FICHIERS PRODUITS
# ============================================================

def test_fit_from_csv_writes_outputs(tmp_path):
    out = tmp_path / "fit"
    data = os.path.join(ROOT, "sandbox", "data", "tuning_4um_digitized.csv")
    assert main(["fit", "--data", data, "--f0", "7636.6MHz", "--out", str(out)]) == EXIT_OK
    for ext in ("csv", "json", "svg"):
        assert (out / f"fit.{ext}").is_file()
    frame = pd.read_csv(out / "fit.csv")
    assert list(frame.columns) == ["current_ma", "delta_f_mhz", "delta_f_fit_mhz"]


def test_fieldmap_and_plot(tmp_path):
    out = tmp_path / "maps"
    assert main(["fieldmap", "--ny", "6", "--nz", "4", "--out", str(out)]) == EXIT_OK
    csv_path = out / "fieldmap_4um.csv"
    assert len(pd.read_csv(csv_path)) == 24

    replot = tmp_path / "replot"
    assert main(["plot", str(csv_path), "--out", str(replot)]) == EXIT_OK
    assert (replot / "fieldmap_4um.svg").is_file()
    assert main(["plot", str(tmp_path / "nothing.csv")]) == EXIT_USAGE


def test_results_do_not_depend_on_thread_count(tmp_path):
    """--threads 1 et --threads 4: CSV identiques octet par octet."""
    common = ["deer", "--spec", spec("deer_retuned.json"), "--set", "parameters.n_observers=500"]
    assert main(common + ["--threads", "1", "--out", str(tmp_path / "one")]) == EXIT_OK
    assert main(common + ["--threads", "4", "--out", str(tmp_path / "four")]) == EXIT_OK
    one = (tmp_path / "one" / "deer_retuned.csv").read_bytes()
    four = (tmp_path / "four" / "deer_retuned.csv").read_bytes()
    assert one == four


def test_svg_rendering_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["tune", "--spec", spec("tune_step.json"), "--out", str(tmp_path / name)]) == EXIT_OK
    assert (tmp_path / "a" / "tune_step.svg").read_bytes() == (tmp_path / "b" / "tune_step.svg").read_bytes()
