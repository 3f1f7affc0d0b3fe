"""
Tests kinet - Loi d'accord par inductance cinétique
===================================================
Évaluation de δf(i), inversion, ajustement (I2*, I4*), exigences de Q et
plafonds de puissance.
"""

import json
import os
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src.errors import CriticalCurrentExceeded, ParseError, PowerCapExceeded, TargetUnreachable
from src.physics.kinet import (
    TuningDataset,
    check_power,
    delta_f,
    fit_tuning_params,
    invert_delta_f,
    load_device,
    max_shift,
    q_requirement,
    sensitivity_penalty,
    tuning_curve,
)
from src.utils.rng import stream

ROOT = os.path.dirname(os.path.abspath(__file__))
DEVICES = {"1p5um": (28.9e-3, 13.9e-3), "2p5um": (50.1e-3, 26.3e-3), "4um": (62.5e-3, 35.7e-3)}


@pytest.fixture(scope="module")
def dev4():
    return load_device("4um")


def _synthetic(dev, points=81, noise=0.0, seed=0):
    currents = np.linspace(0.0, 0.99 * dev.i_critical, points)
    shifts = np.asarray(delta_f(currents, dev))
    if noise:
        shifts = shifts * (1.0 + noise * stream(seed, "test_kinet").standard_normal(points))
    return TuningDataset(tuple(zip(currents, shifts)))


# ============================================================
# LOI D'ACCORD
# ============================================================

def test_shift_at_5ma_matches_measured_endpoint(dev4):
    """4 μm, 5 mA: δf = -51.8 ± 0.5 MHz."""
    assert delta_f(5e-3, dev4) == pytest.approx(-51.8e6, abs=0.5e6)


def test_narrow_device_reaches_95_mhz():
    """1.5 μm: décalage maximal 95 ± 3 MHz avant i_critical."""
    assert max_shift(load_device("1p5um")) == pytest.approx(95e6, abs=3e6)


def test_shift_is_zero_at_zero_current_and_even(dev4):
    assert delta_f(0.0, dev4) == 0.0
    assert delta_f(-3e-3, dev4) == delta_f(3e-3, dev4)


def test_critical_current_raises(dev4):
    with pytest.raises(CriticalCurrentExceeded):
        delta_f(dev4.i_critical, dev4)
    with pytest.raises(CriticalCurrentExceeded):
        delta_f(np.array([0.0, 1e-3, 6e-3]), dev4)


@given(fraction=st.floats(min_value=0.0, max_value=0.99))
def test_shift_is_monotone_in_current(fraction):
    """δf décroît strictement avec |i| sur [0, i_critical)."""
    dev = load_device("4um")
    i = fraction * dev.i_critical
    assert delta_f(i + 1e-6, dev) < delta_f(i, dev) <= 0.0


@given(fraction=st.floats(min_value=0.01, max_value=0.99))
@settings(max_examples=50)
def test_inversion_recovers_current(fraction):
    dev = load_device("4um")
    i = fraction * dev.i_critical
    assert invert_delta_f(delta_f(i, dev), dev) == pytest.approx(i, rel=1e-9)


def test_inversion_rejects_unreachable_targets(dev4):
    with pytest.raises(TargetUnreachable):
        invert_delta_f(1e6, dev4)
    with pytest.raises(TargetUnreachable):
        invert_delta_f(-1.01 * max_shift(dev4), dev4)


def test_tuning_curve_columns(dev4):
    frame = tuning_curve(dev4, np.linspace(0, 4e-3, 5))
    assert list(frame.columns) == ["current_ma", "delta_f_mhz"]
    assert frame["current_ma"].iloc[-1] == pytest.approx(4.0)


def test_invalid_device_constants(dev4):
    with pytest.raises(ValueError):
        replace(dev4, i_critical=dev4.i2_star * 2)
    with pytest.raises(ValueError):
        replace(dev4, max_power_biased=0.0)


# ============================================================
# AJUSTEMENT
# ============================================================

@pytest.mark.parametrize("name", sorted(DEVICES))
def test_fit_recovers_noiseless_constants(name):
    """Courbe synthétique sans bruit: I2*, I4* à 0.5 %."""
    dev = load_device(name)
    fit = fit_tuning_params(_synthetic(dev), dev.f0)
    i2, i4 = DEVICES[name]
    assert fit.i2_star == pytest.approx(i2, rel=5e-3)
    assert fit.i4_star == pytest.approx(i4, rel=5e-3)
    assert fit.residual_rms < 1.0


@pytest.mark.parametrize("name", sorted(DEVICES))
def test_fit_with_one_percent_noise(name):
    """Bruit relatif de 1 %, 100 graines: médianes à 5 %."""
    dev = load_device(name)
    fits = [fit_tuning_params(_synthetic(dev, noise=0.01, seed=seed), dev.f0) for seed in range(100)]
    i2, i4 = DEVICES[name]
    assert np.median([f.i2_star for f in fits]) == pytest.approx(i2, rel=0.05)
    assert np.median([f.i4_star for f in fits]) == pytest.approx(i4, rel=0.05)


def test_fit_on_digitized_curve():
    data = TuningDataset.from_csv(os.path.join(ROOT, "sandbox", "data", "tuning_4um_digitized.csv"))
    fit = fit_tuning_params(data, 7636.6e6)
    assert fit.i2_star == pytest.approx(62.5e-3, rel=0.05)
    assert fit.to_dict()["n_points"] == len(data.points)


def test_fit_needs_four_points(dev4):
    with pytest.raises(ValueError):
        fit_tuning_params(_synthetic(dev4, points=3), dev4.f0)


def test_dataset_rejects_positive_shift():
    with pytest.raises(ValueError):
        TuningDataset(((0.0, 0.0), (1e-3, 5.0)))


def test_dataset_csv_missing_column(tmp_path):
    path = tmp_path / "curve.csv"
    path.write_text("current_ma,shift\n0,0\n")
    with pytest.raises(ParseError):
        TuningDataset.from_csv(str(path))


# ============================================================
# Q ET PUISSANCE
# ============================================================

def test_fixed_resonator_q_requirement():
    """7.6 GHz, 33 MHz: Q ≈ 230."""
    assert q_requirement(7.6e9, 33e6) == pytest.approx(230, abs=5)
    assert q_requirement(7600e6, 2.53e6) == pytest.approx(3000, rel=0.01)


def test_sensitivity_penalty_scales_with_q():
    signal, averaging = sensitivity_penalty(3000, 230)
    assert signal == pytest.approx(3000 / 230)
    assert averaging == pytest.approx(signal ** 2)


def test_power_cap_warns_without_failing(dev4):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert check_power(-15.0, dev4, biased=False)
        assert check_power(-32.0, dev4, biased=True)
    with pytest.warns(PowerCapExceeded):
        assert not check_power(-20.0, dev4, biased=True)


# ============================================================
# FICHIERS DISPOSITIF
# ============================================================

def test_shipped_devices_load():
    for name in DEVICES:
        dev = load_device(name)
        assert dev.name == name
        assert 0 < dev.i_critical < dev.i2_star


def test_shipped_lag_is_calibrated(dev4):
    """Retard 4 μm: valeur calibrée sur le temps d'accord de 270 ns."""
    assert dev4.lag_time_constant == pytest.approx(74.8e-9)
    assert "lag_time_constant_ns" in dev4.calibrated
    assert "lag_time_constant_ns" not in dev4.approximate


def test_missing_device_file():
    with pytest.raises(FileNotFoundError):
        load_device("no_such_device")


def test_malformed_device_file(tmp_path):
    path = tmp_path / "dev.json"
    path.write_text('{"name": "x",\n  "f0_hz": }')
    with pytest.raises(ParseError) as info:
        load_device(str(path))
    assert info.value.line == 2


def test_unknown_device_key(tmp_path):
    with open(os.path.join(ROOT, "src", "data", "devices", "4um.json"), encoding="utf-8") as f:
        raw = json.load(f)
    raw["colour"] = "blue"
    path = tmp_path / "dev.json"
    path.write_text(json.dumps(raw))
    with pytest.raises(ParseError):
        load_device(str(path))


def test_field_cannot_be_both_approximate_and_calibrated(tmp_path):
    with open(os.path.join(ROOT, "src", "data", "devices", "4um.json"), encoding="utf-8") as f:
        raw = json.load(f)
    raw["approximate"] = ["lag_time_constant_ns"]
    path = tmp_path / "dev.json"
    path.write_text(json.dumps(raw))
    with pytest.raises(ParseError):
        load_device(str(path))
