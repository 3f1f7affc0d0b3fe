"""
Netmodel - Modèle ABCD du résonateur à bande interdite photonique
=================================================================
Cascade de tronçons de ligne (matrices ABCD), conversion en S21 entre
ports d'impédance Z0, extraction de la résonance (fréquence, Q chargé,
coefficient de couplage) et calibration de la cavité.

Convention de couplage: β = Q_interne / Q_externe (Q_externe total des
deux ports), de sorte que |S21| au pic = β / (1 + β).
"""

import json
import math
from dataclasses import dataclass, replace, asdict
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import optimize
from scipy.constants import c as SPEED_OF_LIGHT

from src.config import (
    PORT_IMPEDANCE,
    MIRROR_Z_LOW,
    MIRROR_Z_HIGH,
    MIRROR_PERIODS,
    LAUNCH_IMPEDANCE,
    CAVITY_IMPEDANCE,
    PHASE_VELOCITY,
    SWEEP_POINTS_PER_LINEWIDTH,
    RESONANCE_XTOL_HZ,
)
from src.errors import CalibrationFailed, NoPeakFound, MultiplePeaks, ParseError


# ============================================================
# TYPES
# ============================================================

@dataclass(frozen=True)
class LineSegment:
    """
    Tronçon de ligne de transmission.

    z0 et v_phase sont les valeurs géométriques; la fraction cinétique
    augmente l'inductance linéique d'un facteur 1/(1 - kinetic_fraction).
    """
    length: float
    z0: float
    v_phase: float
    kinetic_fraction: float = 0.0
    cavity: bool = False

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError(f"length doit être > 0 (reçu {self.length})")
        if not self.z0 > 0:
            raise ValueError(f"z0 doit être > 0 (reçu {self.z0})")
        if not 0 < self.v_phase <= SPEED_OF_LIGHT:
            raise ValueError(f"v_phase hors de (0, c] (reçu {self.v_phase})")
        if not 0 <= self.kinetic_fraction < 1:
            raise ValueError(f"kinetic_fraction hors de [0, 1) (reçu {self.kinetic_fraction})")

    @property
    def effective_v_phase(self) -> float:
        return self.v_phase * math.sqrt(1.0 - self.kinetic_fraction)

    @property
    def effective_z0(self) -> float:
        return self.z0 / math.sqrt(1.0 - self.kinetic_fraction)


@dataclass(frozen=True)
class NetworkSpec:
    """Cascade ordonnée de tronçons entre deux ports."""
    segments: Tuple[LineSegment, ...]
    port_impedance: float = PORT_IMPEDANCE
    internal_q: float = math.inf

    def __post_init__(self):
        if len(self.segments) == 0:
            raise ValueError("NetworkSpec sans tronçon")
        if not self.port_impedance > 0:
            raise ValueError("port_impedance doit être > 0")
        if not self.internal_q > 0:
            raise ValueError("internal_q doit être > 0")
        object.__setattr__(self, "segments", tuple(self.segments))

    def with_internal_q(self, internal_q: float) -> "NetworkSpec":
        return replace(self, internal_q=internal_q)


@dataclass(frozen=True)
class ResonanceSummary:
    f_res: float
    q_loaded: float
    coupling: float
    peak_s21_mag: float
    fwhm: float = 0.0

    def __post_init__(self):
        if not self.q_loaded > 0:
            raise ValueError("q_loaded doit être > 0")
        if not 0 < self.peak_s21_mag <= 1 + 1e-9:
            raise ValueError(f"peak_s21_mag hors de (0, 1] (reçu {self.peak_s21_mag})")


# ============================================================
# MATRICES ABCD
# ============================================================

def abcd_segment(seg: LineSegment, f, internal_q: float = math.inf) -> np.ndarray:
    """
    Matrice ABCD d'un tronçon, vectorisée sur f.

    Ligne à constante de propagation γ = α + jβ, β = 2πf/v; α = β/(2Q) pour
    la cavité (pertes internes), 0 sinon.

    Args:
        seg: Tronçon
        f: Fréquence(s) en Hz (> 0)
        internal_q: Q interne appliqué si seg.cavity

    Returns:
        np.ndarray de forme f.shape + (2, 2), complexe
    """
    f = np.asarray(f, dtype=float)
    if np.any(f <= 0):
        raise ValueError("f doit être > 0")

    beta = 2 * np.pi * f / seg.effective_v_phase
    alpha = beta / (2 * internal_q) if (seg.cavity and math.isfinite(internal_q)) else 0.0 * beta
    gl = (alpha + 1j * beta) * seg.length
    z = seg.effective_z0

    out = np.empty(f.shape + (2, 2), dtype=complex)
    ch, sh = np.cosh(gl), np.sinh(gl)
    out[..., 0, 0] = ch
    out[..., 0, 1] = z * sh
    out[..., 1, 0] = sh / z
    out[..., 1, 1] = ch
    return out


def cascade(net: NetworkSpec, f) -> np.ndarray:
    """Produit ordonné des matrices ABCD du réseau."""
    total = None
    for seg in net.segments:
        m = abcd_segment(seg, f, net.internal_q)
        total = m if total is None else total @ m
    return total


def _denominator(abcd: np.ndarray, z0: float) -> np.ndarray:
    a, b, c, d = abcd[..., 0, 0], abcd[..., 0, 1], abcd[..., 1, 0], abcd[..., 1, 1]
    return a + b / z0 + c * z0 + d


def s21(net: NetworkSpec, f):
    """
    Transmission S21 du réseau entre ports d'impédance net.port_impedance.

    Returns:
        complexe (ou tableau complexe si f est un tableau)
    """
    abcd = cascade(net, f)
    result = 2.0 / _denominator(abcd, net.port_impedance)
    return result if np.ndim(result) else complex(result)


def s12(net: NetworkSpec, f):
    """Transmission inverse S12 = 2(AD - BC) / (A + B/Z0 + C·Z0 + D)."""
    abcd = cascade(net, f)
    det = abcd[..., 0, 0] * abcd[..., 1, 1] - abcd[..., 0, 1] * abcd[..., 1, 0]
    result = 2.0 * det / _denominator(abcd, net.port_impedance)
    return result if np.ndim(result) else complex(result)


def is_mirror_symmetric(net: NetworkSpec, rtol: float = 1e-12) -> bool:
    """Vrai si la séquence de tronçons se lit identiquement dans les deux sens."""
    segs = net.segments
    for left, right in zip(segs, reversed(segs)):
        if not (math.isclose(left.length, right.length, rel_tol=rtol)
                and math.isclose(left.z0, right.z0, rel_tol=rtol)
                and math.isclose(left.v_phase, right.v_phase, rel_tol=rtol)
                and math.isclose(left.kinetic_fraction, right.kinetic_fraction, rel_tol=rtol, abs_tol=rtol)):
            return False
    return True


def s21_sweep(net: NetworkSpec, freqs: Sequence[float]) -> pd.DataFrame:
    """Balayage en fréquence au format CSV (freq_hz, s21_re, s21_im, s21_mag_db)."""
    freqs = np.asarray(freqs, dtype=float)
    s = np.asarray(s21(net, freqs))
    return pd.DataFrame({
        "freq_hz": freqs,
        "s21_re": s.real,
        "s21_im": s.imag,
        "s21_mag_db": 20 * np.log10(np.abs(s)),
    })


# ============================================================
# CONSTRUCTION DU RÉSONATEUR PBG
# ============================================================

def build_pbg_network(
    f_design: float,
    cavity_length: Optional[float] = None,
    periods: int = MIRROR_PERIODS,
    z_low: float = MIRROR_Z_LOW,
    z_high: float = MIRROR_Z_HIGH,
    z_cavity: float = CAVITY_IMPEDANCE,
    v_phase: float = PHASE_VELOCITY,
    internal_q: float = math.inf,
    port_impedance: float = PORT_IMPEDANCE,
    z_launch: Optional[float] = LAUNCH_IMPEDANCE,
) -> NetworkSpec:
    """
    Port | (bas, haut)×periods | cavité λ/2 | (haut, bas)×periods | port.

    Les sections des miroirs sont quart d'onde à f_design; la cavité est
    demi-onde sauf si cavity_length est imposée. Le premier tronçon bas de
    chaque miroir (côté port) prend l'impédance z_launch: c'est lui qui fixe
    le Q externe. z_launch=None donne le miroir régulier (Q externe ≈ 64 000
    pour 35/137 Ω et quatre périodes).
    """
    quarter = v_phase / (4 * f_design)
    low = LineSegment(quarter, z_low, v_phase)
    high = LineSegment(quarter, z_high, v_phase)
    launch = LineSegment(quarter, z_launch, v_phase) if z_launch else low
    cavity = LineSegment(cavity_length or 2 * quarter, z_cavity, v_phase, cavity=True)
    left = [launch, high] + [low, high] * (periods - 1)
    return NetworkSpec(tuple(left + [cavity] + left[::-1]), port_impedance, internal_q)


def _cavity_index(net: NetworkSpec) -> int:
    for i, seg in enumerate(net.segments):
        if seg.cavity:
            return i
    raise ValueError("aucun tronçon cavité dans le réseau")


def with_cavity_length(net: NetworkSpec, length: float) -> NetworkSpec:
    idx = _cavity_index(net)
    segs = list(net.segments)
    segs[idx] = replace(segs[idx], length=length)
    return replace(net, segments=tuple(segs))


# ============================================================
# EXTRACTION DE LA RÉSONANCE
# ============================================================

def extract_resonance(
    magnitude: Callable[[np.ndarray], np.ndarray],
    band: Tuple[float, float],
    q_expected: float = 3000.0,
) -> Tuple[float, float, float]:
    """
    Pic unique d'une réponse |S21|(f) dans une bande.

    Grille grossière de pas f/(20·Q_attendu), raffinement borné du maximum
    (tolérance 1 Hz), puis points à mi-puissance par recherche de racine.

    Args:
        magnitude: f (tableau, Hz) -> |S21|
        band: (f_min, f_max)
        q_expected: Q attendu, fixe la finesse de la grille

    Returns:
        (f_res, peak, fwhm)

    Raises:
        NoPeakFound: réponse plate ou sans maximum intérieur
        MultiplePeaks: plus d'un maximum au-dessus de la moitié du pic global
    """
    f_lo, f_hi = band
    if not 0 < f_lo < f_hi:
        raise ValueError(f"bande invalide: {band}")

    step = 0.5 * (f_lo + f_hi) / (SWEEP_POINTS_PER_LINEWIDTH * q_expected)
    grid = np.arange(f_lo, f_hi + step, step)
    grid = grid[grid <= f_hi]
    mags = np.asarray(magnitude(grid), dtype=float)

    top = float(mags.max())
    if top - float(mags.min()) < 1e-6 * top:
        raise NoPeakFound(f"réponse plate dans [{f_lo:.6g}, {f_hi:.6g}] Hz")

    interior = np.flatnonzero((mags[1:-1] > mags[:-2]) & (mags[1:-1] >= mags[2:])) + 1
    strong = [i for i in interior if mags[i] > 0.5 * top]
    if not strong:
        raise NoPeakFound(f"aucun maximum local dans [{f_lo:.6g}, {f_hi:.6g}] Hz")
    if len(strong) > 1:
        raise MultiplePeaks([float(grid[i]) for i in strong])

    i0 = strong[0]
    lo, hi = grid[i0 - 1], grid[i0 + 1]
    scalar = lambda f: float(np.asarray(magnitude(np.array([f])))[0])
    refined = optimize.minimize_scalar(
        lambda f: -scalar(f), bounds=(lo, hi), method="bounded",
        options={"xatol": RESONANCE_XTOL_HZ}
    )
    f_res = float(refined.x)
    peak = scalar(f_res)

    half_power = lambda f: scalar(f) ** 2 - 0.5 * peak ** 2

    def edge(direction: int) -> float:
        inner = f_res
        outer = f_res + direction * step
        while half_power(outer) > 0:
            inner, outer = outer, outer + direction * step
            if not f_lo - 10 * step <= outer <= f_hi + 10 * step:
                raise NoPeakFound("point à mi-puissance hors de la bande")
        return optimize.brentq(half_power, min(inner, outer), max(inner, outer), xtol=1e-3)

    fwhm = edge(+1) - edge(-1)
    return f_res, peak, fwhm


def find_resonance(
    net: NetworkSpec,
    band: Tuple[float, float],
    loss_q_internal: float,
    q_expected: float = 3000.0,
) -> ResonanceSummary:
    """
    Résonance du réseau avec un Q interne donné.

    Q chargé = f_res / FWHM de |S21|²; couplage β = S/(1 - S) avec S le pic
    de |S21| (pertes d'insertion), soit Q_interne / Q_externe.

    Raises:
        NoPeakFound, MultiplePeaks: voir extract_resonance
    """
    if not loss_q_internal > 0:
        raise ValueError("loss_q_internal doit être > 0")
    lossy = net.with_internal_q(loss_q_internal)
    f_res, peak, fwhm = extract_resonance(lambda f: np.abs(s21(lossy, f)), band, q_expected)
    peak = min(peak, 1.0)
    coupling = peak / (1.0 - peak) if peak < 1.0 else math.inf
    return ResonanceSummary(f_res=f_res, q_loaded=f_res / fwhm, coupling=coupling,
                            peak_s21_mag=peak, fwhm=fwhm)


def _bracket_root(
    func: Callable[[float], float],
    x0: float,
    factor: float,
    increasing: bool,
    max_steps: int = 16,
) -> Tuple[float, float]:
    """
    Encadre la racine d'une fonction monotone par pas multiplicatifs depuis x0.

    Raises:
        CalibrationFailed: pas de changement de signe après max_steps pas
    """
    y0 = func(x0)
    if y0 == 0:
        return x0, x0
    # y0 > 0 sur une fonction croissante: la racine est en dessous de x0
    exponent = -1 if (y0 > 0) == increasing else 1
    a = x0
    for _ in range(max_steps):
        b = a * factor ** exponent
        if (func(b) > 0) != (y0 > 0):
            return min(a, b), max(a, b)
        a = b
    raise CalibrationFailed(
        f"aucun changement de signe entre {x0:.6g} et {a:.6g} (facteur {factor}, {max_steps} pas)"
    )


def calibrate_cavity(
    net: NetworkSpec,
    f_target: float,
    q_target: float,
    band_halfwidth: float = 20e6,
) -> Tuple[NetworkSpec, ResonanceSummary]:
    """
    Ajuste le Q interne (Q chargé = q_target) puis la longueur de cavité
    (f_res = f_target).

    L'estimation 1/Q_L = 1/Q_int + 1/Q_ext ne sert que de point de départ:
    les pertes ne portent que sur la cavité alors que les miroirs stockent
    aussi de l'énergie, d'où l'élargissement de l'intervalle de recherche.

    Returns:
        (réseau calibré, résumé de résonance)

    Raises:
        CalibrationFailed: Q externe ≤ Q visé, ou racine introuvable
    """
    band = (f_target - band_halfwidth, f_target + band_halfwidth)
    base_length = net.segments[_cavity_index(net)].length

    lossless = find_resonance(net, band, loss_q_internal=1e12, q_expected=q_target * 10)
    q_ext = lossless.q_loaded
    if q_ext <= q_target:
        raise CalibrationFailed(f"Q externe {q_ext:.0f} ≤ Q visé {q_target:.0f}: couplage trop fort")

    def q_error(q_int: float) -> float:
        return find_resonance(net, band, q_int, q_target).q_loaded - q_target

    q_guess = 1.0 / (1.0 / q_target - 1.0 / q_ext)
    lo, hi = _bracket_root(q_error, q_guess, 1.5, increasing=True)
    q_int = lo if lo == hi else optimize.brentq(q_error, lo, hi, xtol=1e-4 * q_guess)

    def f_error(scale: float) -> float:
        trial = with_cavity_length(net, base_length * scale)
        return find_resonance(trial, band, q_int, q_target).f_res - f_target

    # un pas de 5e-4 sur la longueur déplace f_res d'environ 2.5 MHz à 7.6 GHz
    lo, hi = _bracket_root(f_error, 1.0, 1.0005, increasing=False)
    scale = lo if lo == hi else optimize.brentq(f_error, lo, hi, xtol=1e-10)
    calibrated = with_cavity_length(net, base_length * scale).with_internal_q(q_int)
    return calibrated, find_resonance(calibrated, band, q_int, q_target)


# ============================================================
# FICHIERS RÉSEAU (JSON)
# ============================================================

def network_to_dict(net: NetworkSpec) -> dict:
    return {
        "port_impedance": net.port_impedance,
        "internal_q": net.internal_q if math.isfinite(net.internal_q) else None,
        "segments": [asdict(seg) for seg in net.segments],
    }


def network_from_dict(data: dict) -> NetworkSpec:
    segments = tuple(LineSegment(**seg) for seg in data["segments"])
    internal_q = data.get("internal_q")
    return NetworkSpec(
        segments=segments,
        port_impedance=float(data.get("port_impedance", PORT_IMPEDANCE)),
        internal_q=math.inf if internal_q is None else float(internal_q),
    )


def load_network(path: str) -> NetworkSpec:
    """
    Charge un réseau depuis un fichier JSON (segments[], port_impedance, internal_q).

    Raises:
        ParseError: JSON invalide (avec ligne/colonne)
    """
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, exc.lineno, exc.colno) from exc
    return network_from_dict(data)


def save_network(net: NetworkSpec, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(network_to_dict(net), f, indent=2)
