"""
Tests spinsim - Propagation de Bloch, séquences et expériences simulées
=======================================================================
Inversion et conservation de la norme, robustesse des impulsions
adiabatiques, balayages en champ, décroissance T2 et compensation de phase.
"""

import math

import numpy as np
import pytest

from src.errors import FitDiverged, PowerCapExceeded, StepTooLarge, TimingViolation
from src.physics.biasdyn import BiasSchedule
from src.physics.fieldmap import compensation_residual, compensation_schedule
from src.physics.kinet import load_device
from src.physics.spinsim import (
    OMEGA1_REFERENCE,
    Ensemble,
    PulseElement,
    SpinPacket,
    build_ensemble,
    calibrated_gamma,
    default_spin_config,
    echo_response_table,
    field_sweep,
    fit_t2,
    hahn_sequence,
    inversion_efficiency,
    peak_position,
    phase_cycle,
    power_for_amplitude,
    propagate,
    rect_amplitude_for_power,
    run_sequence,
    sequence_timing,
    t2_decay,
    waveform,
)
from src.results import ExperimentResult

PI_DURATION = 400e-9
OMEGA_PI = math.pi / PI_DURATION
ZERO_BIAS_FIELDS = np.linspace(274.38e-3, 275.18e-3, 81)
BIASED_FIELDS = np.linspace(273.32e-3, 274.12e-3, 81)


@pytest.fixture(scope="module")
def cfg():
    return default_spin_config()


def rect_pi(amplitude=OMEGA_PI):
    return PulseElement("rect", PI_DURATION, amplitude)


# ============================================================
# PROPAGATION
# ============================================================

def test_on_resonance_rect_pi_inverts():
    dt = PI_DURATION / 1000
    out = propagate(SpinPacket([0.0, 0.0, 1.0]), waveform(rect_pi(), dt), None, dt)
    assert out.m[2] == pytest.approx(-1.0, abs=1e-6)


def test_step_halving_is_self_consistent():
    """Pulse désaccordée sous courant filtré: écart < 1e-5 entre dt et dt/2."""
    packet = SpinPacket([0.0, 0.0, 1.0], detuning0=2 * math.pi * 0.3e6, bias_shift=2 * math.pi * 1e6 / 4e-3)
    sched = BiasSchedule(((0.0, 1e-6, 4e-3),), 75e-9)
    coarse_dt = PI_DURATION / 1000
    fine_dt = coarse_dt / 2
    coarse = propagate(packet, waveform(rect_pi(), coarse_dt), sched, coarse_dt)
    fine = propagate(packet, waveform(rect_pi(), fine_dt), sched, fine_dt)
    assert np.max(np.abs(coarse.m - fine.m)) < 1e-5


def test_norm_is_conserved_over_many_steps():
    dt = 1e-9
    pulse = PulseElement("rect", 10e-6, 2 * math.pi * 1e6, phase=0.3)
    assert len(waveform(pulse, dt)) == 10_000
    packet = SpinPacket([0.6, 0.0, 0.8], detuning0=2 * math.pi * 2.5e6)
    out = propagate(packet, waveform(pulse, dt), None, dt)
    assert abs(np.linalg.norm(out.m) - 1.0) < 1e-6


def test_oversized_step_is_rejected():
    pulse = rect_pi()
    dt = PI_DURATION / 50
    with pytest.raises(StepTooLarge):
        propagate(SpinPacket([0, 0, 1], detuning0=2 * math.pi * 1e9), waveform(pulse, dt), None, dt)
    with pytest.raises(ValueError):
        waveform(pulse, PI_DURATION / 10)


def test_packet_validation():
    with pytest.raises(ValueError):
        SpinPacket([1.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        SpinPacket([0, 0, 1], species="H1")
    with pytest.raises(ValueError):
        PulseElement("bir4_wurst20", 10e-6, 1e6)


def test_ensemble_helpers():
    ens = Ensemble.uniform([0.0, 1e6, 2e6], b1_scale=0.9)
    assert ens.size == 3
    assert ens.weight.sum() == pytest.approx(1.0)
    assert ens.subset(slice(1, 3)).size == 2
    assert ens.packet(2).detuning0 == 2e6
    assert np.all(ens.with_detuning([5.0, 6.0, 7.0]).detuning0 == [5.0, 6.0, 7.0])


def test_tiled_ensemble_keeps_total_weight():
    ens = Ensemble.uniform([0.0, 1e6], b1_scale=[0.9, 1.1])
    ens.dipolar[:] = [3.0, -3.0]
    tiled = ens.tiled(3)
    assert tiled.size == 6
    assert tiled.weight.sum() == pytest.approx(1.0)
    np.testing.assert_array_equal(tiled.dipolar, [3.0, -3.0] * 3)
    np.testing.assert_array_equal(tiled.b1_scale, [0.9, 1.1] * 3)


# ============================================================
# IMPULSIONS
# ============================================================

def test_power_calibration():
    assert rect_amplitude_for_power(-29.0) == pytest.approx(OMEGA1_REFERENCE)
    assert rect_amplitude_for_power(-9.0) == pytest.approx(10 * OMEGA1_REFERENCE)
    assert power_for_amplitude(rect_amplitude_for_power(-32.0)) == pytest.approx(-32.0)


def test_adiabatic_inversion_is_robust_to_b1():
    """BIR-4 WURST-20 (10 μs, ±2 MHz): inversion ≥ 0.98 de 0.7 à 1.3 × B1."""
    pulse = PulseElement("bir4_wurst20", 10e-6, 2 * math.pi * 10e6, flip_angle=math.pi, chirp_halfwidth=2e6)
    efficiency = inversion_efficiency(pulse, b1_scale=np.linspace(0.7, 1.3, 7))
    assert np.all(efficiency >= 0.98)


def test_adiabatic_inversion_is_robust_to_b1_and_offset():
    """Grille B1 × désaccord: 0.7-1.3 × B1 et ±0.5 MHz, inversion ≥ 0.98 partout."""
    pulse = PulseElement("bir4_wurst20", 10e-6, 2 * math.pi * 10e6, flip_angle=math.pi, chirp_halfwidth=2e6)
    b1, offset = np.meshgrid(np.linspace(0.7, 1.3, 7), 2 * math.pi * np.linspace(-0.5e6, 0.5e6, 5))
    efficiency = inversion_efficiency(pulse, b1_scale=b1, detuning=offset)
    assert efficiency.shape == (5, 7)
    assert efficiency.min() >= 0.98


def test_adiabatic_sweep_spans_twice_the_halfwidth():
    pulse = PulseElement("bir4_wurst20", 10e-6, 2 * math.pi * 1e6, flip_angle=math.pi, chirp_halfwidth=2e6)
    samples = waveform(pulse, 10e-9)
    assert np.max(np.abs(samples[:, 2])) == pytest.approx(2 * math.pi * 4e6, rel=1e-2)
    assert samples[0, 0] == pytest.approx(2 * math.pi * 1e6, rel=1e-3)
    assert samples[len(samples) // 4 - 1, 0] < 1e-3 * 2 * math.pi * 1e6


def test_rect_inversion_is_not_robust_to_b1():
    efficiency = inversion_efficiency(rect_pi(), b1_scale=0.7)
    assert float(efficiency[0]) <= 0.9
    assert float(inversion_efficiency(rect_pi(), b1_scale=1.0)[0]) == pytest.approx(1.0, abs=1e-6)


def test_hahn_sequence_timing():
    seq = hahn_sequence(60e-6, "rect")
    assert [p.kind for p in seq] == ["rect", "delay", "rect", "delay", "acquire"]
    timing = sequence_timing(seq)
    assert timing.tau == pytest.approx(60e-6)
    assert timing.echo_time == pytest.approx(100e-9 + 120e-6)
    with pytest.raises(TimingViolation):
        hahn_sequence(5e-6, "adiabatic")
    with pytest.raises(ValueError):
        hahn_sequence(60e-6, "gaussian")


def test_ideal_hahn_echo_has_unit_amplitude():
    cfg = default_spin_config(t2=math.inf)
    echo = run_sequence(Ensemble.uniform([0.0]), hahn_sequence(60e-6, "rect"), None, cfg)
    assert echo.amplitude == pytest.approx(1.0, abs=1e-3)


def test_static_dephasing_is_refocused():
    """Écart gaussien ≫ 1/τ: l'écho à 2τ retrouve l'amplitude complète."""
    cfg = default_spin_config(t2=math.inf)
    nodes, weights = np.polynomial.hermite_e.hermegauss(16)
    sigma = 2 * math.pi * 20e3
    ens = Ensemble(np.tile([0.0, 0.0, 1.0], (16, 1)), sigma * nodes, 1.0, 0.0, weights / weights.sum())
    echo = run_sequence(ens, hahn_sequence(60e-6, "rect"), None, cfg)
    assert echo.amplitude == pytest.approx(1.0, abs=1e-2)


def test_sequence_must_end_with_acquisition():
    seq = hahn_sequence(20e-6, "rect")
    with pytest.raises(ValueError):
        run_sequence(Ensemble.uniform([0.0]), seq[:-1])


def test_adiabatic_echo_forms_at_two_tau():
    seq = hahn_sequence(60e-6, "adiabatic")
    timing = sequence_timing(seq)
    assert timing.adiabatic
    assert timing.echo_time == pytest.approx(120e-6)
    acquisition_center = sum(p.duration for p in seq[:-1]) + seq[-1].duration / 2
    assert acquisition_center == pytest.approx(120e-6)


def test_adiabatic_echo_refocuses_static_dephasing():
    """σ = 30 kHz: l'écho BIR-4 garde ≥ 95 % de l'écho d'un paquet à résonance."""
    cfg = default_spin_config(t2=math.inf)
    seq = hahn_sequence(60e-6, "adiabatic")
    nodes, weights = np.polynomial.hermite_e.hermegauss(16)
    sigma = 2 * math.pi * 30e3
    ens = Ensemble(np.tile([0.0, 0.0, 1.0], (16, 1)), sigma * nodes, 1.0, 0.0, weights / weights.sum())
    single = run_sequence(Ensemble.uniform([0.0]), seq, None, cfg)
    spread = run_sequence(ens, seq, None, cfg)
    assert single.amplitude > 0.5
    assert spread.amplitude >= 0.95 * single.amplitude


def test_phase_cycle_steps():
    seq = hahn_sequence(20e-6, "rect")
    steps = phase_cycle(seq)
    assert len(steps) == 4
    assert sum(sign for _, sign in steps) == 0
    assert [s[0].phase for s, _ in steps] == pytest.approx([0.0, math.pi, 0.0, math.pi])
    assert [s[2].phase for s, _ in steps] == pytest.approx([math.pi / 2, math.pi / 2, math.pi, math.pi])
    assert all(s[1] == seq[1] and s[4] == seq[4] for s, _ in steps)
    assert phase_cycle(seq[2:]) == [(seq[2:], 1.0)]


@pytest.mark.parametrize("silent", [0, 2])
def test_phase_cycle_cancels_free_induction(silent):
    """Une impulsion éteinte: seule une FID subsiste, supprimée par le cycle."""
    cfg = default_spin_config(t2=math.inf)
    seq = hahn_sequence(20e-6, "rect")
    pi2 = seq[0]
    if silent == 0:
        seq[2] = PulseElement("rect", pi2.duration, pi2.amplitude, seq[2].phase)
    seq[silent] = PulseElement("rect", seq[silent].duration, 0.0)
    ens = Ensemble.uniform([0.0])
    raw = run_sequence(ens, seq, None, cfg, cycle=False)
    cycled = run_sequence(ens, seq, None, cfg)
    assert raw.amplitude == pytest.approx(1.0, abs=1e-3)
    assert cycled.amplitude < 1e-9


def test_partner_flip_modulates_echo():
    """Paire ±D retournée à 80 μs: écho × |cos(D·(t_écho - t_flip))|."""
    cfg = default_spin_config(t2=math.inf)
    seq = hahn_sequence(60e-6, "rect")
    echo_time = sequence_timing(seq).echo_time
    coupling = 2 * math.pi * 5e3
    flip = 80.1e-6
    pair = Ensemble(np.tile([0.0, 0.0, 1.0], (2, 1)), 0.0, 1.0, 0.0, [0.5, 0.5],
                    dipolar=[coupling, -coupling])
    reference = run_sequence(pair, seq, None, cfg)
    flipped = run_sequence(pair, seq, None, cfg, partner_flip=flip)
    expected = abs(math.cos(coupling * (echo_time - flip)))
    assert reference.amplitude == pytest.approx(1.0, abs=1e-3)
    assert flipped.amplitude == pytest.approx(expected * reference.amplitude, abs=5e-3)


# ============================================================
# ENSEMBLE ET CALIBRATION
# ============================================================

def test_calibrated_gamma_is_near_free_electron_slope():
    gamma = calibrated_gamma()
    assert 28e9 < gamma < 32e9


def test_built_ensemble_weights(cfg):
    ens = build_ensemble(cfg, n_detuning=8, grid=(8, 4))
    assert ens.size == 8 * 32
    assert ens.weight.sum() == pytest.approx(1.0)
    assert np.sum(ens.weight * ens.b1_scale) == pytest.approx(1.0)
    assert abs(np.sum(ens.weight * ens.detuning0)) < 1e-6 * np.max(np.abs(ens.detuning0))


def test_monte_carlo_ensemble_is_seeded(cfg):
    first = build_ensemble(cfg, n_detuning=4, grid=(4, 4), mode="monte_carlo", seed=3)
    again = build_ensemble(cfg, n_detuning=4, grid=(4, 4), mode="monte_carlo", seed=3)
    other = build_ensemble(cfg, n_detuning=4, grid=(4, 4), mode="monte_carlo", seed=4)
    np.testing.assert_array_equal(first.detuning0, again.detuning0)
    assert not np.array_equal(first.detuning0, other.detuning0)


def test_results_do_not_depend_on_threads(cfg):
    ens = build_ensemble(cfg, n_detuning=8, grid=(32, 32))
    assert ens.size > 4096
    seq = hahn_sequence(20e-6, "rect")
    serial = run_sequence(ens, seq, None, cfg, threads=1)
    pooled = run_sequence(ens, seq, None, cfg, threads=4)
    assert serial.amplitude == pooled.amplitude
    assert serial.phase == pooled.phase


def test_power_cap_warning_during_biased_run(cfg):
    dev = load_device("4um")
    sched = BiasSchedule(((1e-6, 2e-6, 4e-3),), 75e-9)
    with pytest.warns(PowerCapExceeded):
        run_sequence(Ensemble.uniform([0.0]), hahn_sequence(20e-6, "rect"), sched, cfg, dev=dev)


# ============================================================
# BALAYAGES EN CHAMP
# ============================================================

@pytest.fixture(scope="module")
def sweeps(cfg):
    return {
        ("adiabatic", 0): field_sweep(cfg, 0.0, "adiabatic", ZERO_BIAS_FIELDS),
        ("adiabatic", 4): field_sweep(cfg, 4e-3, "adiabatic", BIASED_FIELDS),
        ("rect", 0): field_sweep(cfg, 0.0, "rect", ZERO_BIAS_FIELDS),
        ("rect", 4): field_sweep(cfg, 4e-3, "rect", BIASED_FIELDS),
    }


@pytest.mark.slow
def test_zero_bias_peak_on_line_center(sweeps):
    assert sweeps[("adiabatic", 0)].metadata["peak_field_mt"] == pytest.approx(274.78, abs=0.005)


@pytest.mark.slow
def test_biased_peak_follows_resonator_shift(sweeps):
    assert sweeps[("adiabatic", 4)].metadata["peak_field_mt"] == pytest.approx(273.72, abs=0.02)


@pytest.mark.slow
def test_adiabatic_pulses_recover_biased_signal(sweeps):
    """Adiabatique: ≥ 90 % du signal sans courant; rectangulaire plafonné: moins."""
    def ratio(style):
        return (sweeps[(style, 4)].metadata["integrated_intensity"]
                / sweeps[(style, 0)].metadata["integrated_intensity"])

    assert ratio("adiabatic") >= 0.9
    assert ratio("rect") < 0.9
    assert sweeps[("rect", 4)].metadata["power_dbm"] == -32.0


def test_response_table_vanishes_at_its_edges(cfg):
    """Paquets à ±8 MHz: contribution filtrée par la fenêtre d'acquisition."""
    edges = 2 * math.pi * np.array([-8e6, 8e6])
    for style in ("rect", "adiabatic"):
        table = echo_response_table(hahn_sequence(60e-6, style), edges, np.array([1.0]), cfg)
        assert np.all(np.abs(table) < 0.03)


def test_peak_position_refines_parabola():
    x = np.linspace(-1.0, 1.0, 21)
    assert peak_position(x, -(x - 0.033) ** 2) == pytest.approx(0.033, abs=1e-12)
    assert peak_position(x, x) == 1.0


# ============================================================
# T2 ET COMPENSATION
# ============================================================

def _taus():
    return np.linspace(20e-6, 400e-6, 12)


def test_t2_is_recovered(cfg):
    """T2 = 448 μs simulé puis ajusté à ±10 μs."""
    t2, stderr = fit_t2(t2_decay(cfg, _taus()))
    assert t2 == pytest.approx(448e-6, abs=10e-6)
    assert stderr < 10e-6


@pytest.mark.slow
def test_compensated_bias_keeps_coherence(cfg):
    reference, _ = fit_t2(t2_decay(cfg, _taus()))
    biased, stderr = fit_t2(t2_decay(cfg, _taus(), bias_current=4.9e-3, compensation="symmetric_pair"))
    assert biased == pytest.approx(reference, abs=max(10e-6, 2 * stderr))


def test_echo_is_flat_without_relaxation():
    decay = t2_decay(default_spin_config(t2=math.inf), _taus())
    amplitudes = np.array(decay.column("echo_amp"))
    assert np.ptp(amplitudes) < 1e-6 * amplitudes.mean()


def test_fit_t2_needs_a_decay():
    flat = ExperimentResult.from_columns("two_tau_us", np.arange(8.0), {"echo_amp": np.ones(8)})
    with pytest.raises(FitDiverged):
        fit_t2(flat)
    short = ExperimentResult.from_columns("two_tau_us", np.arange(4.0), {"echo_amp": np.exp(-np.arange(4.0))})
    with pytest.raises(ValueError):
        fit_t2(short)


def _echo_phase(cfg, sched, bias_shift):
    seq = hahn_sequence(60e-6, "rect")
    ens = Ensemble.uniform([0.0], bias_shift=bias_shift)
    return run_sequence(ens, seq, sched, cfg).phase


def test_uncompensated_bias_leaves_echo_phase(cfg):
    """Lobe unique de 4 mA: phase d'écho mesurable (> 0.1 rad)."""
    timing = sequence_timing(hahn_sequence(60e-6, "rect"))
    single = compensation_schedule("single", timing, 4e-3, lag=75e-9)
    shift = 1.0 / compensation_residual(single, timing)
    reference = _echo_phase(cfg, None, shift)
    delta = abs(np.angle(np.exp(1j * (_echo_phase(cfg, single, shift) - reference))))
    assert delta > 0.1


@pytest.mark.parametrize("kind", ["symmetric_pair", "bipolar"])
def test_compensated_bias_leaves_no_echo_phase(cfg, kind):
    timing = sequence_timing(hahn_sequence(60e-6, "rect"))
    shift = 1.0 / compensation_residual(compensation_schedule("single", timing, 4e-3, lag=75e-9), timing)
    sched = compensation_schedule(kind, timing, 4e-3, lag=75e-9)
    reference = _echo_phase(cfg, None, shift)
    delta = abs(np.angle(np.exp(1j * (_echo_phase(cfg, sched, shift) - reference))))
    assert delta < 1e-3


def test_compensated_ensemble_matches_unbiased_echo(cfg):
    ens = build_ensemble(cfg, n_detuning=4, grid=(4, 2))
    seq = hahn_sequence(60e-6, "rect")
    sched = compensation_schedule("symmetric_pair", sequence_timing(seq), 4e-3, lag=75e-9)
    plain = run_sequence(ens, seq, None, cfg)
    biased = run_sequence(ens, seq, sched, cfg)
    assert biased.amplitude == pytest.approx(plain.amplitude, rel=1e-6)
