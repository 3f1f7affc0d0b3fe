"""
Tests utils - Unités, flux aléatoires, fichiers, journal et rendu
=================================================================
"""

import json
import math

import numpy as np
import pandas as pd
import pytest

from src.errors import OutputPathError, ParseError
from src.utils.data_validator import get_logs_summary, validate_all_logs, validate_entry, validate_result_csv
from src.utils.file_tools import get_output_root, read_mapping, validate_output_path, write_csv, write_json
from src.utils.log_helpers import log_fit, log_io, log_validation
from src.utils.logger import ActionType, log_experiment
from src.utils.plotting import render_csv_svg
from src.utils.rng import stream
from src.utils.units import parse_quantity


# ============================================================
# UNITÉS
# ============================================================

@pytest.mark.parametrize("text, expected", [
    ("3.9mA", 3.9e-3),
    ("7636.6MHz", 7636.6e6),
    ("34us", 34e-6),
    ("34μs", 34e-6),
    ("273.72mT", 0.27372),
    ("400 ns", 400e-9),
    ("5e22", 5e22),
    ("-31.2MHz", -31.2e6),
    ("-32dBm", -32.0),
    ("2m", 2.0),
])
def test_parse_quantity(text, expected):
    assert parse_quantity(text) == expected


def test_parse_quantity_degrees():
    assert parse_quantity("4.7deg") == pytest.approx(math.radians(4.7))


@pytest.mark.parametrize("text", ["", "fast", "3.9 mX", "5k", "1..2Hz"])
def test_parse_quantity_rejects(text):
    with pytest.raises(ValueError):
        parse_quantity(text)


# ============================================================
# FLUX ALÉATOIRES
# ============================================================

def test_streams_are_reproducible_and_independent():
    a = stream(0, "deer", 5).random(4)
    np.testing.assert_array_equal(a, stream(0, "deer", 5).random(4))
    assert not np.array_equal(a, stream(0, "deer", 6).random(4))
    assert not np.array_equal(a, stream(1, "deer", 5).random(4))
    assert not np.array_equal(a, stream(0, "spinsim", 5).random(4))


# ============================================================
# FICHIERS
# ============================================================

def test_output_guard(tmp_path):
    root = get_output_root(str(tmp_path / "out"))
    assert validate_output_path("runs/deer_retuned.csv", root) == root / "runs" / "deer_retuned"
    with pytest.raises(OutputPathError):
        validate_output_path("../deer_retuned", root)
    with pytest.raises(OutputPathError):
        validate_output_path(".", root)


def test_read_mapping_reports_positions(tmp_path):
    good = tmp_path / "spec.yaml"
    good.write_text("kind: deer\nseed: 3\n")
    assert read_mapping(str(good)) == {"kind": "deer", "seed": 3}

    bad_yaml = tmp_path / "bad.yaml"
    bad_yaml.write_text("kind: deer\nseed: [3\n")
    with pytest.raises(ParseError) as info:
        read_mapping(str(bad_yaml))
    assert info.value.line is not None

    not_object = tmp_path / "list.json"
    not_object.write_text("[1, 2]")
    with pytest.raises(ParseError):
        read_mapping(str(not_object))
    with pytest.raises(FileNotFoundError):
        read_mapping(str(tmp_path / "missing.json"))


def test_writers_are_deterministic(tmp_path):
    frame = pd.DataFrame({"t_us": [6.0, 8.0], "echo_norm_on_res": [0.95, 1 / 3]})
    first = write_csv(frame, tmp_path / "a.csv", "%.10g")
    second = write_csv(frame, tmp_path / "b.csv", "%.10g")
    assert open(first, encoding="utf-8").read() == open(second, encoding="utf-8").read()
    assert open(first, encoding="utf-8").read().splitlines()[2] == "8,0.3333333333"

    path = write_json({"b": np.arange(2), "a": 1}, tmp_path / "side.json")
    assert json.loads(open(path, encoding="utf-8").read()) == {"a": 1, "b": [0, 1]}


# ============================================================
# JOURNAL
# ============================================================

@pytest.fixture
def ledger(tmp_path, monkeypatch):
    path = tmp_path / "logs" / "experiment_data.json"
    monkeypatch.setenv("SPINRES_LOG_FILE", str(path))
    return path


def test_ledger_entries_are_appended_and_valid(ledger):
    log_fit("kinet", "4um", {"points": 12}, {"i2_star_ma": 62.5})
    log_validation("bad.json", "4um", ["parameters.t_start: t < t_min (6 μs)"])
    log_io("outputs/deer_retuned.csv")

    entries = json.loads(ledger.read_text(encoding="utf-8"))
    assert [e["action"] for e in entries] == ["FIT", "VALIDATION", "IO"]
    report = validate_all_logs(str(ledger))
    assert report["is_valid"]
    assert report["valid_entries"] == 3
    assert get_logs_summary(str(ledger))["action"] == {"FIT": 1, "VALIDATION": 1, "IO": 1}


def test_ledger_rejects_incomplete_details(ledger):
    with pytest.raises(ValueError):
        log_experiment("kinet", "4um", ActionType.FIT, {"parameters": {}}, "SUCCESS")
    with pytest.raises(ValueError):
        log_experiment("kinet", "4um", "GUESS", {}, "INFO")
    assert not ledger.exists()


def test_corrupted_ledger_is_replaced(ledger):
    ledger.parent.mkdir(parents=True)
    ledger.write_text("{not json")
    log_io("outputs/x.csv")
    assert len(json.loads(ledger.read_text(encoding="utf-8"))) == 1


def test_entry_validation_flags_bad_fields():
    ok, errors = validate_entry({"action": "FIT", "status": "MAYBE", "details": {}}, 0)
    assert not ok
    assert any("Status invalide" in e for e in errors)
    assert any("details.parameters" in e for e in errors)


# ============================================================
# CSV ET RENDU
# ============================================================

def test_result_csv_headers(tmp_path):
    path = tmp_path / "deer_retuned.csv"
    pd.DataFrame({"t_us": [6.0], "echo_norm_on_res": [0.9], "echo_norm_off_res": [1.0]}).to_csv(path, index=False)
    assert validate_result_csv(str(path), "deer", expected_rows=1) == []
    assert validate_result_csv(str(path), "t2_decay") != []
    assert validate_result_csv(str(path), "deer", expected_rows=3) == ["1 lignes au lieu de 3"]


def test_svg_is_deterministic(tmp_path):
    path = tmp_path / "curve.csv"
    pd.DataFrame({"current_ma": [0, 1, 2], "delta_f_mhz": [0, -1.9, -7.8]}).to_csv(path, index=False)
    first = render_csv_svg(str(path), str(tmp_path / "a.svg"), title="curve")
    second = render_csv_svg(str(path), str(tmp_path / "b.svg"), title="curve")
    assert open(first, "rb").read() == open(second, "rb").read()

    single = tmp_path / "single.csv"
    pd.DataFrame({"x": [1, 2]}).to_csv(single, index=False)
    with pytest.raises(ValueError):
        render_csv_svg(str(single))
