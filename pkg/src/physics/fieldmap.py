"""
Fieldmap - Champs statiques et micro-ondes dans la section du CPW
=================================================================
Biot-Savart analytique de rubans minces (densité de courant uniforme),
cartes de B1, élargissement dû au désalignement de B0 et programmes de
courant qui compensent la phase accumulée par les spins.

Repère de la section: y transverse dans le plan du film, z vertical
(film entre z = -épaisseur et z = 0, échantillon au-dessus). Le courant et
B0 sont selon x; un désalignement theta incline B0 vers y.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.constants import mu_0

from src.config import (
    EPI_THICKNESS,
    IMPLANT_DEPTH,
    SAMPLE_STANDOFF,
    FILM_THICKNESS,
    GROUND_WIDTH_RATIO,
    FILM_SUBSHEETS,
    DETECTION_LAYER_DEPTHS,
    B1_ANCHOR_POWER,
    B1_ANCHOR_TESLA,
    FIELDMAP_GRID,
    ACQUIRE_WINDOW,
    DEER_SETTLE,
    COMPENSATION_TAIL_LAGS,
)
from src.errors import DoesNotFit
from src.physics.biasdyn import BiasSchedule, bias_phase_integral
from src.physics.kinet import DeviceTuningParams

REGIONS = ("above_pin", "above_gap", "pin_and_gaps")
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


# ============================================================
# TYPES
# ============================================================

@dataclass(frozen=True)
class CpwGeometry:
    center_width: float
    gap: float
    ground_width: float
    film_thickness: float = FILM_THICKNESS
    sample_standoff: float = SAMPLE_STANDOFF
    epi_thickness: float = EPI_THICKNESS
    implant_depth: float = IMPLANT_DEPTH

    def __post_init__(self):
        for name in ("center_width", "gap", "ground_width", "film_thickness",
                     "sample_standoff", "epi_thickness", "implant_depth"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} doit être > 0")

    @property
    def strips(self) -> Tuple[Tuple[float, float, float], ...]:
        """(y_min, y_max, fraction du courant) du conducteur central et des masses."""
        half = self.center_width / 2
        inner = half + self.gap
        outer = inner + self.ground_width
        return ((-half, half, 1.0), (inner, outer, -0.5), (-outer, -inner, -0.5))

    @property
    def reference_point(self) -> Tuple[float, float]:
        """Mi-hauteur de la couche épitaxiée au-dessus du centre du conducteur."""
        return 0.0, self.sample_standoff + self.epi_thickness / 2

    @property
    def detection_layer(self) -> Tuple[float, float]:
        z0 = self.sample_standoff
        return z0, z0 + DETECTION_LAYER_DEPTHS * self.implant_depth


@dataclass(frozen=True)
class FieldSample:
    position: Tuple[float, float]
    b_bias_per_amp: Tuple[float, float]
    b1_per_sqrt_watt: float


@dataclass(frozen=True)
class BroadeningEstimate:
    fwhm: float
    mean_shift: float
    rms: float


@dataclass(frozen=True)
class EchoTiming:
    """
    Chronologie d'un écho de Hahn: π/2 sur [0, pi2], π centré à pi2/2 + tau,
    écho centré à pi2/2 + 2·tau (2·tau pour des impulsions BIR-4, sans
    précession nette pendant l'impulsion).
    """
    tau: float
    pi2_duration: float
    pi_duration: float
    settle_time: float = DEER_SETTLE
    acquire_window: float = ACQUIRE_WINDOW
    adiabatic: bool = False

    @property
    def pi_center(self) -> float:
        return self.pi2_duration / 2 + self.tau

    @property
    def echo_time(self) -> float:
        if self.adiabatic:
            return 2 * self.tau
        return self.pi2_duration / 2 + 2 * self.tau

    @property
    def first_window(self) -> Tuple[float, float]:
        return (self.pi2_duration + self.settle_time,
                self.pi_center - self.pi_duration / 2 - self.settle_time)

    @property
    def second_window(self) -> Tuple[float, float]:
        return (self.pi_center + self.pi_duration / 2 + self.settle_time,
                self.echo_time - self.acquire_window / 2 - self.settle_time)


def geometry_for_device(dev: DeviceTuningParams) -> CpwGeometry:
    """Géométrie par défaut: gap = largeur du conducteur, masses 10× plus larges."""
    width = dev.center_pin_width
    return CpwGeometry(
        center_width=width,
        gap=dev.gap if dev.gap is not None else width,
        ground_width=GROUND_WIDTH_RATIO * width,
    )


def device_b1_anchor(dev: DeviceTuningParams) -> Tuple[float, float]:
    """(puissance dBm, B1 tesla) du dispositif, ou l'ancrage du 4 μm."""
    if dev.b1_anchor_power is None or dev.b1_anchor_tesla is None:
        return B1_ANCHOR_POWER, B1_ANCHOR_TESLA
    return dev.b1_anchor_power, dev.b1_anchor_tesla


# ============================================================
# BIOT-SAVART
# ============================================================

def sheet_field(a: float, b: float, z_sheet: float, y, z) -> Tuple[np.ndarray, np.ndarray]:
    """
    Champ (B_y, B_z) par ampère d'une nappe de courant uniforme selon +x
    occupant [a, b] à la hauteur z_sheet.
    """
    y = np.asarray(y, dtype=float)
    h = np.asarray(z, dtype=float) - z_sheet
    k = mu_0 / (b - a)
    side = np.where(h < 0, -1.0, 1.0)
    height = np.abs(h)
    b_y = -(k / (2 * math.pi)) * (np.arctan2(side * (y - a), height) - np.arctan2(side * (y - b), height))
    b_z = (k / (4 * math.pi)) * np.log(((y - a) ** 2 + h ** 2) / ((y - b) ** 2 + h ** 2))
    return b_y, b_z


def isolated_strip_field(a: float, b: float, thickness: float, y, z,
                         subsheets: int = FILM_SUBSHEETS) -> Tuple[np.ndarray, np.ndarray]:
    """Ruban d'épaisseur finie centré sur z = -thickness/2 (quadrature de Gauss-Legendre)."""
    nodes, weights = np.polynomial.legendre.leggauss(subsheets)
    b_y = np.zeros(np.broadcast(np.asarray(y), np.asarray(z)).shape)
    b_z = np.zeros_like(b_y)
    for node, weight in zip(nodes, weights):
        z_sheet = -thickness / 2 + node * thickness / 2
        sy, sz = sheet_field(a, b, z_sheet, y, z)
        b_y = b_y + 0.5 * weight * sy
        b_z = b_z + 0.5 * weight * sz
    return b_y, b_z


def strip_field(geom: CpwGeometry, y, z) -> Tuple[np.ndarray, np.ndarray]:
    """
    Champ statique par ampère du CPW: +I dans le conducteur central, -I/2
    dans chaque plan de masse.

    Args:
        geom: Géométrie du CPW
        y, z: Position(s) dans la section (m), hors du film

    Returns:
        (B_y, B_z) en T/A

    Raises:
        ValueError: point à l'intérieur d'un conducteur
    """
    y_arr = np.asarray(y, dtype=float)
    z_arr = np.asarray(z, dtype=float)
    inside_film = (z_arr <= 0) & (z_arr >= -geom.film_thickness)
    if np.any(inside_film):
        for a, b, _ in geom.strips:
            if np.any(inside_film & (y_arr >= a) & (y_arr <= b)):
                raise ValueError("point à l'intérieur d'un conducteur")

    b_y = np.zeros(np.broadcast(y_arr, z_arr).shape)
    b_z = np.zeros_like(b_y)
    for a, b, fraction in geom.strips:
        sy, sz = isolated_strip_field(a, b, geom.film_thickness, y_arr, z_arr)
        b_y = b_y + fraction * sy
        b_z = b_z + fraction * sz
    return b_y, b_z


def quadrature_shift(geom: CpwGeometry, i: float, b0: float, y, z) -> np.ndarray:
    """|B0 + B_i| - B0 à theta = 0 (pair en i)."""
    b_y, b_z = strip_field(geom, y, z)
    return np.sqrt(b0 ** 2 + (i * b_y) ** 2 + (i * b_z) ** 2) - b0


# ============================================================
# RÉGIONS ET CARTES
# ============================================================

def region_intervals(geom: CpwGeometry, region: str) -> List[Tuple[float, float]]:
    """
    Intervalles en y d'une région.

    above_pin: |y| ≤ w/2; above_gap: moitié centrale de chaque gap;
    pin_and_gaps: |y| ≤ w/2 + g.
    """
    half, gap = geom.center_width / 2, geom.gap
    if region == "above_pin":
        return [(-half, half)]
    if region == "above_gap":
        inner, outer = half + gap / 4, half + 3 * gap / 4
        return [(-outer, -inner), (inner, outer)]
    if region == "pin_and_gaps":
        return [(-half - gap, half + gap)]
    raise ValueError(f"région inconnue '{region}' (attendu: {', '.join(REGIONS)})")


def region_samples(geom: CpwGeometry, region: str,
                   ny: int = FIELDMAP_GRID[0], nz: int = FIELDMAP_GRID[1]) -> Tuple[np.ndarray, np.ndarray]:
    """Points (y, z) de la couche détectée au centre de cellules régulières."""
    intervals = region_intervals(geom, region)
    per_interval = max(ny // len(intervals), 1)
    y = np.concatenate([lo + (np.arange(per_interval) + 0.5) * (hi - lo) / per_interval
                        for lo, hi in intervals])
    z_lo, z_hi = geom.detection_layer
    z = z_lo + (np.arange(nz) + 0.5) * (z_hi - z_lo) / nz
    yy, zz = np.meshgrid(y, z, indexing="ij")
    return yy.ravel(), zz.ravel()


def random_region_samples(geom: CpwGeometry, region: str, count: int,
                          rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Tirage uniforme de count points dans une région."""
    intervals = region_intervals(geom, region)
    lengths = np.array([hi - lo for lo, hi in intervals])
    which = rng.choice(len(intervals), size=count, p=lengths / lengths.sum())
    lows = np.array([lo for lo, _ in intervals])[which]
    y = lows + rng.random(count) * lengths[which]
    z_lo, z_hi = geom.detection_layer
    z = z_lo + rng.random(count) * (z_hi - z_lo)
    return y, z


def b1_per_amp(geom: CpwGeometry, y, z) -> np.ndarray:
    """Module du champ micro-onde par ampère (même distribution de courant que la polarisation)."""
    b_y, b_z = strip_field(geom, y, z)
    return np.hypot(b_y, b_z)


def b1_amplitude(geom: CpwGeometry, power: float, y, z,
                 anchor: Tuple[float, float] = (B1_ANCHOR_POWER, B1_ANCHOR_TESLA)) -> np.ndarray:
    """
    B1 (T) aux points demandés pour une puissance en dBm.

    L'amplitude suit 10^(P/20) et vaut anchor[1] au point de référence à
    anchor[0] dBm.
    """
    anchor_power, anchor_b1 = anchor
    ref = float(b1_per_amp(geom, *geom.reference_point))
    scale = anchor_b1 * 10 ** ((power - anchor_power) / 20.0) / ref
    return scale * b1_per_amp(geom, y, z)


def b1_map(geom: CpwGeometry, power: float,
           anchor: Tuple[float, float] = (B1_ANCHOR_POWER, B1_ANCHOR_TESLA),
           ny: int = 32, nz: int = 32) -> List[FieldSample]:
    """
    Carte de B1 sur la section de la couche épitaxiée.

    Example:
        >>> geom = geometry_for_device(load_device("4um"))
        >>> samples = b1_map(geom, -15.0)
    """
    y, z = _cross_section_grid(geom, ny, nz)
    b_y, b_z = strip_field(geom, y, z)
    b1 = b1_amplitude(geom, power, y, z, anchor)
    watts = 1e-3 * 10 ** (power / 10.0)
    return [
        FieldSample(position=(float(yy), float(zz)), b_bias_per_amp=(float(by), float(bz)),
                    b1_per_sqrt_watt=float(b) / math.sqrt(watts))
        for yy, zz, by, bz, b in zip(y, z, b_y, b_z, b1)
    ]


def _cross_section_grid(geom: CpwGeometry, ny: int, nz: int) -> Tuple[np.ndarray, np.ndarray]:
    span = geom.center_width / 2 + geom.gap + geom.center_width / 2
    y = np.linspace(-span, span, ny)
    z = np.linspace(geom.sample_standoff, geom.sample_standoff + geom.epi_thickness, nz)
    yy, zz = np.meshgrid(y, z, indexing="ij")
    return yy.ravel(), zz.ravel()


def field_map(geom: CpwGeometry, power: float,
              anchor: Tuple[float, float] = (B1_ANCHOR_POWER, B1_ANCHOR_TESLA),
              ny: int = 32, nz: int = 32) -> pd.DataFrame:
    """
    Carte CSV: y_um, z_um, bbias_x_uT_per_mA (composante transverse dans le
    plan), bbias_y_uT_per_mA (composante verticale), b1_uT.
    """
    y, z = _cross_section_grid(geom, ny, nz)
    b_y, b_z = strip_field(geom, y, z)
    # T/A -> μT/mA: facteur 1e6 * 1e-3
    return pd.DataFrame({
        "y_um": y * 1e6,
        "z_um": z * 1e6,
        "bbias_x_uT_per_mA": b_y * 1e3,
        "bbias_y_uT_per_mA": b_z * 1e3,
        "b1_uT": b1_amplitude(geom, power, y, z, anchor) * 1e6,
    })


# ============================================================
# DÉSALIGNEMENT
# ============================================================

def parallel_component(geom: CpwGeometry, theta: float, y, z) -> np.ndarray:
    """B_i·B̂0 par ampère pour B0 incliné de theta vers y."""
    b_y, _ = strip_field(geom, y, z)
    return math.sin(theta) * b_y


def bias_shift_per_amp(geom: CpwGeometry, y, z, theta: float, gamma_eff: float) -> np.ndarray:
    """Décalage de Larmor local par ampère (rad/s/A) pour gamma_eff en Hz/T."""
    return 2 * math.pi * gamma_eff * parallel_component(geom, theta, y, z)


def broadening_profile(geom: CpwGeometry, i: float, theta: float, region: str,
                       ny: int = FIELDMAP_GRID[0], nz: int = FIELDMAP_GRID[1]) -> BroadeningEstimate:
    """
    Distribution de B_i·B̂0 sur une région, pondérée par B1².

    La largeur est 2√(2 ln 2) fois l'écart quadratique autour de zéro, avec
    le signe du décalage moyen.
    """
    if not abs(theta) < 0.2:
        raise ValueError("|theta| doit rester < 0.2 rad")
    y, z = region_samples(geom, region, ny, nz)
    weights = b1_per_amp(geom, y, z) ** 2
    weights = weights / weights.sum()
    b_par = i * parallel_component(geom, theta, y, z)

    mean = float(np.sum(weights * b_par))
    rms = float(math.sqrt(np.sum(weights * b_par ** 2)))
    return BroadeningEstimate(fwhm=math.copysign(FWHM_PER_SIGMA * rms, mean) if mean else 0.0,
                              mean_shift=mean, rms=rms)


def broadening_vs_misalignment(geom: CpwGeometry, i: float, theta: float, region: str) -> float:
    """Largeur (T) de la distribution de la composante parallèle."""
    return broadening_profile(geom, i, theta, region).fwhm


# ============================================================
# COMPENSATION DE PHASE
# ============================================================

def compensation_residual(sched: BiasSchedule, timing: EchoTiming) -> float:
    """Phase du premier ordre par unité de décalage (A·s), signe inversé après le π."""
    before = bias_phase_integral(sched, 0.0, timing.pi_center)
    after = bias_phase_integral(sched, timing.pi_center, timing.echo_time)
    return before - after


def compensation_schedule(
    kind: str,
    timing: EchoTiming,
    i: float,
    lobe_duration: Optional[float] = None,
    lag: float = 0.0,
    lobe: Optional[Tuple[float, float]] = None,
) -> BiasSchedule:
    """
    Impulsions de courant dont la phase accumulée se compense à l'écho.

    symmetric_pair: deux lobes de même aire placés en miroir autour du π;
    bipolar: +i puis -i avant le π; single: un lobe sans compensation.
    L'amplitude du lobe de compensation est résolue sur l'intégrale exacte
    du courant filtré. lobe impose (début, fin) du premier lobe
    (symmetric_pair et single), par exemple le réaccord d'une pompe DEER.

    Chaque lobe finit au moins COMPENSATION_TAIL_LAGS·lag avant l'impulsion
    ou l'acquisition suivante: la queue exponentielle du courant est
    éteinte pendant les impulsions.

    Raises:
        DoesNotFit: lobes (queue comprise) plus longs que les fenêtres
            d'évolution libre
    """
    tail = max(COMPENSATION_TAIL_LAGS * lag - timing.settle_time, 0.0)
    w1_start, w1_end = timing.first_window
    w2_start, w2_end = timing.second_window
    w1_end, w2_end = w1_end - tail, w2_end - tail
    width1, width2 = w1_end - w1_start, w2_end - w2_start
    if width1 <= 0 or width2 <= 0:
        raise DoesNotFit("fenêtres d'évolution libre vides (tau trop court)")

    if kind in ("symmetric_pair", "single") and lobe is not None:
        start, end = lobe
        if start < w1_start or end > w1_end or 2 * timing.pi_center - start > w2_end:
            raise DoesNotFit(
                f"lobe [{start * 1e6:.2f}, {end * 1e6:.2f}] μs et sa queue hors des fenêtres d'évolution libre"
            )
        first = (start, end, i)
        if kind == "single":
            return BiasSchedule((first,), lag)
        mirror = (2 * timing.pi_center - end, 2 * timing.pi_center - start)
        unit = BiasSchedule(((mirror[0], mirror[1], 1.0),), lag)
    elif kind in ("symmetric_pair", "single"):
        length = lobe_duration if lobe_duration is not None else min(width1, width2) / 2
        if length > min(width1, width2):
            raise DoesNotFit(f"lobe de {length * 1e6:.2f} μs > fenêtre de {min(width1, width2) * 1e6:.2f} μs")
        first = (w1_end - length, w1_end, i)
        if kind == "single":
            return BiasSchedule((first,), lag)
        mirror = (2 * timing.pi_center - w1_end, 2 * timing.pi_center - w1_end + length)
        if mirror[1] > w2_end:
            raise DoesNotFit(f"lobe miroir de {length * 1e6:.2f} μs: queue dans l'acquisition")
        unit = BiasSchedule(((mirror[0], mirror[1], 1.0),), lag)
    elif kind == "bipolar":
        length = lobe_duration if lobe_duration is not None else width1 / 4
        if 2 * length > width1:
            raise DoesNotFit(f"deux lobes de {length * 1e6:.2f} μs > fenêtre de {width1 * 1e6:.2f} μs")
        first = (w1_end - 2 * length, w1_end - length, i)
        unit = BiasSchedule(((w1_end - length, w1_end, 1.0),), lag)
    else:
        raise ValueError(f"type de compensation inconnu: '{kind}'")

    leading = BiasSchedule((first,), lag)
    amplitude = -compensation_residual(leading, timing) / compensation_residual(unit, timing)
    start, end, _ = unit.elements[0]
    return BiasSchedule((first, (start, end, amplitude)), lag)
