"""
Tests protocol - Spécifications, graphe validate → execute → persist
====================================================================
"""

import json
import math
import os

import pandas as pd
import pytest

from src.errors import ExperimentError, ParseError, SpecValidationError, TimingViolation
from src import protocol
from src.protocol import (
    ExperimentSpec,
    apply_overrides,
    collect_violations,
    load_spec,
    resolve_parameters,
    run,
    run_experiment,
    validate,
)

ROOT = os.path.dirname(os.path.abspath(__file__))
SPECS = os.path.join(ROOT, "sandbox", "specs")


def spec_path(name):
    return os.path.join(SPECS, name)


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    """Journal et dossier de sortie isolés."""
    log_file = tmp_path / "logs" / "experiment_data.json"
    out = tmp_path / "outputs"
    monkeypatch.setenv("SPINRES_LOG_FILE", str(log_file))
    monkeypatch.setenv("SPINRES_OUTPUT_DIR", str(out))
    return {"log": log_file, "out": out}


def tuning_spec(**parameters):
    return {"kind": "fit_tuning", "device_ref": "4um", "output_path": "curve",
            "parameters": {"i_max": "5mA", "points": 11, **parameters}}


# ============================================================
# CHARGEMENT ET OVERRIDES
# ============================================================

def test_yaml_and_json_specs_load():
    assert load_spec(spec_path("tuning_4um.json"))["kind"] == "fit_tuning"
    assert load_spec(spec_path("tuning_fit.yaml"))["kind"] == "fit_tuning"


def test_overrides_are_applied_on_a_copy():
    raw = load_spec(spec_path("fieldsweep_4ma.json"))
    patched = apply_overrides(raw, ["parameters.bias_current=4.9mA", "seed=7", "parameters.extra.depth=2"])
    assert patched["parameters"]["bias_current"] == "4.9mA"
    assert patched["seed"] == 7
    assert patched["parameters"]["extra"] == {"depth": 2}
    assert "extra" not in raw["parameters"]
    assert "bias_current" not in raw["parameters"] or raw["parameters"]["bias_current"] != "4.9mA"


@pytest.mark.parametrize("item", ["seed", "=3", "parameters..x=1", "kind.sub=1"])
def test_malformed_overrides(item):
    with pytest.raises(ParseError):
        apply_overrides(tuning_spec(), [item])


# ============================================================
# VALIDATION
# ============================================================

def test_shipped_specs_are_valid():
    for name in sorted(os.listdir(SPECS)):
        if name.startswith("bad"):
            continue
        assert validate(load_spec(spec_path(name)), SPECS) == [], name


def test_deer_start_before_t_min():
    assert validate(load_spec(spec_path("bad.json")), SPECS) == ["parameters.t_start: t < t_min (6 μs)"]


def test_bias_above_critical_current():
    assert validate(load_spec(spec_path("bad_bias.json")), SPECS) == [
        "parameters.bias_current: 6 mA dépasse i_critical 5.014 mA"
    ]


def test_unknown_keys_are_rejected():
    violations = validate(tuning_spec(colour="blue"))
    assert violations == ["parameters.colour: clé inconnue pour fit_tuning"]
    top_level = collect_violations({**tuning_spec(), "owner": "lab"})
    assert [name for name, _ in top_level] == ["owner"]


def test_bad_values_are_reported_per_field():
    names = [name for name, _ in collect_violations(tuning_spec(points="many", f0="fast"))]
    assert names == ["parameters.f0", "parameters.points"]


def test_missing_device_is_a_violation():
    violations = collect_violations({**tuning_spec(), "device_ref": "no_such_device"})
    assert violations[0][0] == "device_ref"


def test_output_path_must_stay_in_output_dir(tmp_path):
    spec = {**tuning_spec(), "output_path": "../escape"}
    assert validate(spec, output_dir=str(tmp_path / "out")) == [
        f"output_path: hors du dossier de sortie {tmp_path / 'out'}"
    ]
    assert validate(spec) == []


def test_parameters_are_coerced_to_si():
    spec = ExperimentSpec.model_validate({
        "kind": "field_sweep", "output_path": "x",
        "parameters": {"field_start": "273.3mT", "field_stop": 0.2741, "theta": 4.7, "points": "41"},
    })
    params, violations = resolve_parameters(spec)
    assert violations == []
    assert params["field_start"] == pytest.approx(0.2733)
    assert params["theta"] == pytest.approx(math.radians(4.7))
    assert params["points"] == 41
    assert params["style"] == "adiabatic"


def test_full_deer_checks_resonator_return():
    raw = apply_overrides(load_spec(spec_path("deer_retuned.json")), ["parameters.mode=full", "parameters.t_stop=33us"])
    violations = validate(raw, SPECS)
    assert len(violations) == 1
    assert violations[0].startswith("parameters.t_stop: attente 1 μs:")


def test_violation_messages_are_in_french():
    raw = apply_overrides(load_spec(spec_path("tune_step.json")), ["parameters.target_delta_f=-200MHz"])
    assert validate(raw, SPECS)[0].startswith("parameters.target_delta_f: -200 MHz dépasse le décalage maximal")
    late = apply_overrides(load_spec(spec_path("deer_retuned.json")), ["parameters.t_stop=33.8us"])
    assert validate(late, SPECS) == ["parameters.t_stop: t > tau - durée de pompe (33.6 μs)"]


# ============================================================
# EXÉCUTION
# ============================================================

def test_run_writes_csv_sidecar_and_one_ledger_entry(workspace):
    result = run(tuning_spec())
    csv_path = workspace["out"] / "curve.csv"
    sidecar = json.loads((workspace["out"] / "curve.json").read_text(encoding="utf-8"))
    frame = pd.read_csv(csv_path)
    assert list(frame.columns) == ["current_ma", "delta_f_mhz"]
    assert len(frame) == 11
    assert sidecar["rows"] == 11
    assert sidecar["metadata"]["kind"] == "fit_tuning"
    assert result.metadata["device"] == "4um"

    entries = json.loads(workspace["log"].read_text(encoding="utf-8"))
    assert len(entries) == 1
    assert entries[0]["action"] == "FIT"
    assert entries[0]["status"] == "SUCCESS"


def test_invalid_spec_raises_with_violations(workspace):
    with pytest.raises(SpecValidationError) as info:
        run(load_spec(spec_path("bad.json")), spec_path("bad.json"))
    assert info.value.violations == ["parameters.t_start: t < t_min (6 μs)"]
    assert not (workspace["out"] / "bad.csv").exists()


def test_runtime_errors_carry_experiment_context(workspace, monkeypatch):
    def failing(params, dev, spec, verbose):
        raise TimingViolation("pompe trop tardive")

    monkeypatch.setitem(protocol.RUNNERS, "fit_tuning", failing)
    with pytest.raises(ExperimentError) as info:
        run(tuning_spec(), "inline.json")
    assert info.value.kind == "fit_tuning"
    assert isinstance(info.value.cause, TimingViolation)
    assert "inline.json" in str(info.value)

    entries = json.loads(workspace["log"].read_text(encoding="utf-8"))
    assert entries[-1]["status"] == "FAILURE"


def test_run_experiment_summary(workspace):
    summary = run_experiment(spec_path("tuning_4um.json"), ["parameters.points=5"])
    assert summary["success"]
    assert summary["violations"] == []
    assert set(summary["paths"]) == {"csv", "json"}
    assert len(summary["result"].rows) == 5

    failed = run_experiment(spec_path("bad.json"))
    assert not failed["success"]
    assert failed["violations"]


def test_seed_override_takes_precedence(workspace):
    summary = run_experiment(spec_path("tuning_4um.json"), seed=11)
    assert summary["result"].metadata["seed"] == 11


def test_output_is_deterministic(workspace, tmp_path):
    first = run_experiment(spec_path("tune_step.json"), output_dir=str(tmp_path / "a"))
    second = run_experiment(spec_path("tune_step.json"), output_dir=str(tmp_path / "b"))
    with open(first["paths"]["csv"], encoding="utf-8") as a, open(second["paths"]["csv"], encoding="utf-8") as b:
        assert a.read() == b.read()


def test_step_at_probe_reports_tuning_time(workspace):
    """Créneau de 3.9 mA, sonde à -31.2 MHz: temps d'accord ≈ 270 ns."""
    summary = run_experiment(spec_path("tune_step.json"))
    assert summary["result"].metadata["tuning_time_ns"] == pytest.approx(270.0, abs=30.0)


def test_flip_fraction_calibration_is_logged(workspace):
    summary = run_experiment(spec_path("deer_retuned.json"),
                             ["parameters.points=3", "parameters.n_observers=200"])
    assert summary["success"]
    entries = json.loads(workspace["log"].read_text(encoding="utf-8"))
    calibrations = [e for e in entries if e["action"] == "CALIBRATION"]
    assert len(calibrations) == 1
    assert calibrations[0]["component"] == "deer"
    assert calibrations[0]["details"]["outcome"]["flip_fraction"] == pytest.approx(
        summary["result"].metadata["flip_fraction"])
    assert entries[-1]["action"] == "SIMULATION"
