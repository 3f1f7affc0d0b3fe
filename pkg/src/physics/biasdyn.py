"""
Biasdyn - Dynamique du courant de polarisation et de la cavité
==============================================================
Programmes de courant (créneaux filtrés par le retard du premier ordre du
circuit de polarisation), réponse temporelle de la cavité monomode à
fréquence variable, temps d'accord et programmes de suivi de chirp.
"""

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import optimize

from src.config import (
    TUNING_OVERSHOOT_RATIO,
    TUNING_OVERSHOOT_LINEWIDTHS,
    TUNING_TIME_TARGET,
    TUNING_CALIBRATION_DELTA_F,
    CURRENT_HEADROOM,
    LAG_SEARCH_BOUNDS,
    CAVITY_STEPS_PER_LIFETIME,
    CHIRP_PRE_HOLD,
)
from src.errors import TargetUnreachable, SlewTooFast, CriticalCurrentExceeded, ParseError
from src.physics.kinet import DeviceTuningParams, delta_f, invert_delta_f, max_shift


# ============================================================
# TYPES
# ============================================================

@dataclass(frozen=True)
class BiasSchedule:
    """
    Créneaux de courant idéaux (t_start, t_end, amplitude) et constante de
    temps du circuit de polarisation.
    """
    elements: Tuple[Tuple[float, float, float], ...] = ()
    lag_time_constant: float = 0.0

    def __post_init__(self):
        elements = tuple((float(a), float(b), float(c)) for a, b, c in self.elements)
        object.__setattr__(self, "elements", elements)
        if self.lag_time_constant < 0:
            raise ValueError("lag_time_constant doit être ≥ 0")
        previous_end = -math.inf
        for t_start, t_end, _ in elements:
            if not t_end > t_start:
                raise ValueError(f"créneau vide ou inversé: [{t_start}, {t_end}]")
            if t_start < previous_end - 1e-15:
                raise ValueError("créneaux non ordonnés ou chevauchants")
            previous_end = t_end

    @property
    def end_time(self) -> float:
        return self.elements[-1][1] if self.elements else 0.0

    @property
    def peak_current(self) -> float:
        return max((abs(a) for _, _, a in self.elements), default=0.0)

    def check_device(self, dev: DeviceTuningParams) -> None:
        """Lève CriticalCurrentExceeded si un créneau dépasse i_critical."""
        if self.peak_current >= dev.i_critical:
            raise CriticalCurrentExceeded(self.peak_current, dev.i_critical)

    def shifted(self, offset: float) -> "BiasSchedule":
        return replace(self, elements=tuple((a + offset, b + offset, c) for a, b, c in self.elements))

    def merged(self, other: "BiasSchedule") -> "BiasSchedule":
        """Réunion de deux programmes de même constante de temps."""
        return replace(self, elements=tuple(sorted(self.elements + other.elements)))

    def to_dict(self) -> dict:
        return {
            "lag_ns": self.lag_time_constant * 1e9,
            "elements": [{"t_start": a, "t_end": b, "amplitude": c} for a, b, c in self.elements],
        }


@dataclass(frozen=True)
class CavityTrace:
    times: np.ndarray = field(repr=False)
    transmitted_amplitude: np.ndarray = field(repr=False)
    f_res_of_t: np.ndarray = field(repr=False)

    def to_frame(self, dev: DeviceTuningParams) -> pd.DataFrame:
        """Format CSV du CLI `tune` (time_ns, f_res_mhz, transmitted_amp)."""
        return pd.DataFrame({
            "time_ns": self.times * 1e9,
            "f_res_mhz": (self.f_res_of_t - dev.f0) / 1e6,
            "transmitted_amp": self.transmitted_amplitude,
        })


# ============================================================
# COURANT FILTRÉ
# ============================================================

def _step_response(t: np.ndarray, lag: float) -> np.ndarray:
    if lag == 0:
        return (t > 0).astype(float)
    return np.where(t > 0, -np.expm1(-np.maximum(t, 0.0) / lag), 0.0)


def _step_integral(t: np.ndarray, lag: float) -> np.ndarray:
    """∫₀ᵗ h(s) ds pour la réponse indicielle h."""
    tp = np.maximum(t, 0.0)
    if lag == 0:
        return tp
    return tp + lag * np.expm1(-tp / lag)


def current_at(sched: BiasSchedule, t):
    """
    Courant effectif à l'instant t: somme des créneaux filtrés par
    1 - exp(-t/τ).

    Args:
        sched: Programme de courant
        t: Instant(s) en secondes (≥ 0)

    Returns:
        Courant (A), scalaire ou tableau
    """
    times = np.asarray(t, dtype=float)
    total = np.zeros_like(times)
    lag = sched.lag_time_constant
    for t_start, t_end, amplitude in sched.elements:
        total = total + amplitude * (_step_response(times - t_start, lag) - _step_response(times - t_end, lag))
    return float(total) if np.ndim(total) == 0 else total


def bias_phase_integral(sched: BiasSchedule, t0: float, t1: float) -> float:
    """∫_{t0}^{t1} i(t) dt en forme fermée (A·s)."""
    lag = sched.lag_time_constant
    total = 0.0
    for t_start, t_end, amplitude in sched.elements:
        upper = _step_integral(np.array([t1 - t_start, t1 - t_end]), lag)
        lower = _step_integral(np.array([t0 - t_start, t0 - t_end]), lag)
        total += amplitude * float((upper[0] - upper[1]) - (lower[0] - lower[1]))
    return total


# ============================================================
# CAVITÉ MONOMODE
# ============================================================

def static_transmission(dev: DeviceTuningParams, detuning: float) -> float:
    """Amplitude transmise normalisée d'un pôle unique désaccordé de detuning (Hz)."""
    return 1.0 / math.sqrt(1.0 + (2.0 * dev.q_loaded * detuning / dev.f0) ** 2)


def _time_step(dev: DeviceTuningParams, sched: BiasSchedule, max_detuning: float) -> float:
    kappa = 2 * math.pi * dev.f0 / dev.q_loaded
    candidates = [1.0 / (kappa * CAVITY_STEPS_PER_LIFETIME),
                  max(sched.lag_time_constant / CAVITY_STEPS_PER_LIFETIME, 0.05e-9)]
    if max_detuning > 0:
        candidates.append(0.1 / max_detuning)
    return min(candidates)


def cavity_trace(
    probe_f: float,
    sched: BiasSchedule,
    dev: DeviceTuningParams,
    duration: float,
    dt: Optional[float] = None,
) -> CavityTrace:
    """
    Amplitude transmise à probe_f pendant le programme de courant.

    da/dt = -(κ/2 + iΔ(t))·a + κ/2, Δ = 2π(f_res(t) - probe_f), κ = 2πf0/Q,
    RK4 à pas fixe depuis l'état stationnaire à t = 0. |a| = 1 à résonance.

    Raises:
        CriticalCurrentExceeded: propagée depuis kinet
    """
    sched.check_device(dev)
    kappa = 2 * math.pi * dev.f0 / dev.q_loaded

    coarse = np.linspace(0.0, duration, 2001)
    f_coarse = dev.f0 + np.asarray(delta_f(current_at(sched, coarse), dev))
    max_detuning = 2 * math.pi * float(np.max(np.abs(f_coarse - probe_f)))
    if dt is None:
        dt = _time_step(dev, sched, max_detuning)

    n_steps = int(math.ceil(duration / dt))
    times = np.arange(n_steps + 1) * dt
    half_times = times[:-1] + 0.5 * dt
    f_res = dev.f0 + np.asarray(delta_f(current_at(sched, times), dev))
    f_half = dev.f0 + np.asarray(delta_f(current_at(sched, half_times), dev))
    z_full = kappa / 2 + 1j * 2 * math.pi * (f_res - probe_f)
    z_half = kappa / 2 + 1j * 2 * math.pi * (f_half - probe_f)

    drive = kappa / 2
    amp = np.empty(n_steps + 1, dtype=complex)
    a = drive / z_full[0]
    amp[0] = a
    for n in range(n_steps):
        z0, zh, z1 = z_full[n], z_half[n], z_full[n + 1]
        k1 = drive - z0 * a
        k2 = drive - zh * (a + 0.5 * dt * k1)
        k3 = drive - zh * (a + 0.5 * dt * k2)
        k4 = drive - z1 * (a + dt * k3)
        a = a + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        amp[n + 1] = a

    return CavityTrace(times=times, transmitted_amplitude=np.abs(amp), f_res_of_t=f_res)


# ============================================================
# TEMPS D'ACCORD
# ============================================================

def tuning_step(
    dev: DeviceTuningParams,
    target_delta_f: float,
    overshoot_ratio: float = TUNING_OVERSHOOT_RATIO,
    overshoot_linewidths: float = TUNING_OVERSHOOT_LINEWIDTHS,
    t_start: float = 0.0,
    hold: float = 2e-6,
    lag: Optional[float] = None,
) -> BiasSchedule:
    """
    Créneau qui fait traverser la fréquence sonde par la résonance.

    Le courant vise target·(1 + ratio) moins n largeurs de raie, borné sous
    i_critical: la résonance dépasse la sonde et la transmission présente
    un pic au passage.

    Raises:
        TargetUnreachable: cible au-delà du décalage maximal
    """
    if not target_delta_f < 0:
        raise TargetUnreachable("la cible doit être un décalage négatif")
    invert_delta_f(target_delta_f, dev)
    aim = target_delta_f * (1 + overshoot_ratio) - overshoot_linewidths * dev.linewidth
    limit = CURRENT_HEADROOM * dev.i_critical
    current = limit if -aim >= max_shift(dev) else min(invert_delta_f(aim, dev), limit)
    return BiasSchedule(
        elements=((t_start, t_start + hold, current),),
        lag_time_constant=dev.lag_time_constant if lag is None else lag,
    )


def _parabolic_peak(times: np.ndarray, values: np.ndarray, k: int) -> float:
    y0, y1, y2 = values[k - 1], values[k], values[k + 1]
    denom = y0 - 2 * y1 + y2
    if denom == 0:
        return float(times[k])
    offset = 0.5 * (y0 - y2) / denom
    return float(times[k] + offset * (times[1] - times[0]))


def tuning_time(
    sched: BiasSchedule,
    dev: DeviceTuningParams,
    target_delta_f: float,
    duration: Optional[float] = None,
) -> float:
    """
    Temps d'accord vers la sonde f0 + target_delta_f.

    Deux régimes selon l'état stationnaire δf(i_final):
    - à moins d'une largeur de raie de la sonde: premier instant où la
      résonance instantanée entre dans cette largeur de raie;
    - au-delà de la sonde: maximum de transmission au passage.

    Raises:
        TargetUnreachable: état stationnaire à plus d'une largeur de raie
            en deçà de la sonde, ou pic absent
    """
    steady = delta_f(sched.peak_current, dev)
    if steady - target_delta_f > dev.linewidth:
        raise TargetUnreachable(
            f"le programme plafonne à {steady / 1e6:.2f} MHz "
            f"(cible {target_delta_f / 1e6:.2f} MHz)"
        )
    kappa = 2 * math.pi * dev.f0 / dev.q_loaded
    t_first = sched.elements[0][0]
    if duration is None:
        duration = t_first + 10 * sched.lag_time_constant + 40 / kappa

    if abs(steady - target_delta_f) <= dev.linewidth:
        times = np.linspace(t_first, duration, 20001)
        inside = np.abs(np.asarray(delta_f(current_at(sched, times), dev)) - target_delta_f) <= dev.linewidth
        if not inside.any():
            raise TargetUnreachable("résonance hors de la largeur de raie dans la fenêtre")
        k = int(np.argmax(inside))
        if k == 0:
            return 0.0
        return _linewidth_crossing(sched, dev, target_delta_f, times[k - 1], times[k]) - t_first

    trace = cavity_trace(dev.f0 + target_delta_f, sched, dev, duration)
    amp = trace.transmitted_amplitude
    k = int(np.argmax(amp))
    if k == 0 or k == len(amp) - 1:
        raise TargetUnreachable("aucun pic de transmission dans la fenêtre")
    return _parabolic_peak(trace.times, amp, k) - t_first


def _linewidth_crossing(sched: BiasSchedule, dev: DeviceTuningParams, target: float, lo: float, hi: float) -> float:
    def gap(t: float) -> float:
        return abs(delta_f(current_at(sched, t), dev) - target) - dev.linewidth

    return optimize.brentq(gap, lo, hi, xtol=1e-13)


def calibrate_lag(
    dev: DeviceTuningParams,
    target_delta_f: float = TUNING_CALIBRATION_DELTA_F,
    tuning_time_target: float = TUNING_TIME_TARGET,
    bounds: Tuple[float, float] = LAG_SEARCH_BOUNDS,
) -> float:
    """
    Constante de temps du circuit telle que le temps d'accord vers
    target_delta_f vaille tuning_time_target.

    Returns:
        lag_time_constant (s)
    """
    def error(lag: float) -> float:
        sched = tuning_step(dev, target_delta_f, lag=lag)
        return tuning_time(sched, dev, target_delta_f) - tuning_time_target

    return optimize.brentq(error, bounds[0], bounds[1], xtol=1e-11)


# ============================================================
# SUIVI DE CHIRP
# ============================================================

def chirp_tracking_schedule(
    chirp: Tuple[float, float, float],
    dev: DeviceTuningParams,
    t_start: float = CHIRP_PRE_HOLD,
    segments: Optional[int] = None,
) -> BiasSchedule:
    """
    Programme de courant qui fait suivre au résonateur un chirp linéaire.

    Maintien de i*(f_start) jusqu'à t_start, puis créneaux pré-accentués
    u = i* + τ·di*/dt (compensation du premier ordre du retard).

    Args:
        chirp: (f_start, f_end, duration) en fréquences absolues sous f0
        dev: Dispositif (lag_time_constant utilisé)
        t_start: Début du chirp
        segments: Nombre de créneaux (défaut: pas ≤ τ/2)

    Raises:
        TargetUnreachable: extrémité hors de portée ou au-dessus de f0
        SlewTooFast: courant pré-accentué hors de [0, i_critical)
    """
    f_start, f_end, duration = chirp
    if f_start > dev.f0 or f_end > dev.f0:
        raise TargetUnreachable("les extrémités du chirp doivent être sous f0")
    i_begin = invert_delta_f(f_start - dev.f0, dev)
    i_finish = invert_delta_f(f_end - dev.f0, dev)
    lag = dev.lag_time_constant

    if duration <= 0 or f_start == f_end:
        return BiasSchedule(((0.0, t_start + max(duration, 0.0), i_begin),), lag)

    if segments is None:
        step = min(lag / 2, duration / 50) if lag > 0 else duration / 50
        segments = max(int(math.ceil(duration / step)), 1)
    edges = t_start + np.linspace(0.0, duration, segments + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    rate = (f_end - f_start) / duration

    def ideal(t):
        return np.array([invert_delta_f(f_start + rate * (tt - t_start) - dev.f0, dev) for tt in np.atleast_1d(t)])

    h = duration / (20 * segments)
    slope = (ideal(mids + h) - ideal(mids - h)) / (2 * h)
    drive = ideal(mids) + lag * slope
    if np.any(drive < 0) or np.any(drive >= dev.i_critical):
        raise SlewTooFast(
            f"pente {rate / 1e6 * 1e-6:.3g} MHz/μs: courant pré-accentué hors de [0, {dev.i_critical * 1e3:.3f} mA)"
        )

    elements = [(0.0, t_start, i_begin)]
    elements += [(float(a), float(b), float(u)) for a, b, u in zip(edges[:-1], edges[1:], drive)]
    elements.append((float(edges[-1]), float(edges[-1]) + 5 * lag + 1e-9, i_finish))
    return BiasSchedule(tuple(elements), lag)


def tracking_error(
    chirp: Tuple[float, float, float],
    sched: BiasSchedule,
    dev: DeviceTuningParams,
    t_start: float = CHIRP_PRE_HOLD,
    samples: int = 2001,
) -> float:
    """Écart maximal |f_res(t) - f_chirp(t)| pendant le chirp (Hz)."""
    f_start, f_end, duration = chirp
    times = t_start + np.linspace(0.0, max(duration, 0.0), samples)
    f_res = dev.f0 + np.asarray(delta_f(current_at(sched, times), dev))
    f_chirp = f_start + (f_end - f_start) * (times - t_start) / duration if duration > 0 else np.full_like(times, f_start)
    return float(np.max(np.abs(f_res - f_chirp)))


# ============================================================
# FICHIERS PROGRAMME (JSON)
# ============================================================

def schedule_from_dict(data: dict) -> BiasSchedule:
    """{"lag_ns": ..., "elements": [{"t_start", "t_end", "amplitude"}, ...]} en unités SI (lag en ns)."""
    elements = tuple((e["t_start"], e["t_end"], e["amplitude"]) for e in data.get("elements", []))
    return BiasSchedule(elements, float(data.get("lag_ns", 0.0)) * 1e-9)


def load_schedule(path: str) -> BiasSchedule:
    """
    Charge un programme de courant.

    Raises:
        ParseError: JSON invalide (avec ligne/colonne) ou clé manquante
    """
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        return schedule_from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, exc.lineno, exc.colno) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"programme invalide: {exc}", path) from exc
