"""
Kinet - Loi d'accord par inductance cinétique
=============================================
δf(i)/f0 = -[(i/I2*)² + (i/I4*)⁴] : évaluation, inversion exacte,
ajustement moindres carrés de (I2*, I4*), exigences de Q et plafonds de
puissance micro-onde.
"""

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator
from scipy import optimize

from src.config import get_device_path
from src.errors import (
    CriticalCurrentExceeded,
    TargetUnreachable,
    FitDiverged,
    IllConditioned,
    ParseError,
    PowerCapExceeded,
)


# ============================================================
# TYPES
# ============================================================

@dataclass(frozen=True)
class DeviceTuningParams:
    """
    Constantes d'un dispositif (une entrée de src/data/devices/).

    Les champs au-delà de ceux de la loi d'accord (retard du circuit de
    polarisation, géométrie, ancrage B1) servent à biasdyn et fieldmap.
    """
    f0: float
    i2_star: float
    i4_star: float
    i_critical: float
    q_loaded: float
    coupling: float
    max_power_no_bias: float
    max_power_biased: float
    center_pin_width: float
    name: str = "custom"
    lag_time_constant: float = 74.8e-9
    b1_anchor_power: Optional[float] = None
    b1_anchor_tesla: Optional[float] = None
    gap: Optional[float] = None
    approximate: Tuple[str, ...] = ()
    calibrated: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.f0 > 0:
            raise ValueError("f0 doit être > 0")
        if not 0 < self.i_critical < self.i2_star:
            raise ValueError("il faut 0 < i_critical < i2_star")
        if not self.i4_star > 0:
            raise ValueError("i4_star doit être > 0")
        if self.max_power_biased > self.max_power_no_bias:
            raise ValueError("max_power_biased doit être ≤ max_power_no_bias")

    @property
    def linewidth(self) -> float:
        """Largeur à mi-hauteur du résonateur, f0/Q (Hz)."""
        return self.f0 / self.q_loaded


@dataclass(frozen=True)
class TuningDataset:
    points: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        currents = [p[0] for p in self.points]
        if len(set(currents)) != len(currents):
            raise ValueError("courants non distincts")
        if any(i < 0 for i in currents):
            raise ValueError("courants négatifs")
        if any(df > 0 for _, df in self.points):
            raise ValueError("δf doit être ≤ 0")
        object.__setattr__(self, "points", tuple((float(i), float(df)) for i, df in self.points))

    @property
    def currents(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def shifts(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    @classmethod
    def from_csv(cls, path: str) -> "TuningDataset":
        """Lit un CSV (current_ma, delta_f_mhz)."""
        df = pd.read_csv(path)
        missing = {"current_ma", "delta_f_mhz"} - set(df.columns)
        if missing:
            raise ParseError(f"colonnes manquantes: {sorted(missing)}", path)
        return cls(tuple(zip(df["current_ma"] * 1e-3, df["delta_f_mhz"] * 1e6)))


@dataclass(frozen=True)
class FitResult:
    i2_star: float
    i4_star: float
    covariance: np.ndarray = field(repr=False)
    residual_rms: float = 0.0
    n_points: int = 0

    def to_dict(self) -> Dict:
        return {
            "i2_star_ma": self.i2_star * 1e3,
            "i4_star_ma": self.i4_star * 1e3 if math.isfinite(self.i4_star) else None,
            "covariance_ma2": (self.covariance * 1e6).tolist(),
            "residual_rms_hz": self.residual_rms,
            "n_points": self.n_points,
        }


# ============================================================
# LOI D'ACCORD
# ============================================================

def delta_f(i, p: DeviceTuningParams):
    """
    Décalage de fréquence de résonance (Hz, ≤ 0).

    Args:
        i: Courant (A), scalaire ou tableau
        p: Paramètres du dispositif

    Raises:
        CriticalCurrentExceeded: si |i| ≥ i_critical
    """
    arr = np.asarray(i, dtype=float)
    worst = float(np.max(np.abs(arr))) if arr.size else 0.0
    if worst >= p.i_critical:
        raise CriticalCurrentExceeded(worst, p.i_critical)
    shift = -p.f0 * ((arr / p.i2_star) ** 2 + (arr / p.i4_star) ** 4)
    return float(shift) if np.ndim(shift) == 0 else shift


def max_shift(p: DeviceTuningParams) -> float:
    """|δf| atteint juste sous le courant critique (Hz)."""
    x = p.i_critical
    return p.f0 * ((x / p.i2_star) ** 2 + (x / p.i4_star) ** 4)


def invert_delta_f(target: float, p: DeviceTuningParams) -> float:
    """
    Courant ≥ 0 produisant le décalage target (≤ 0).

    Racine positive de b·x² + a·x - c = 0 en x = i², écrite sous forme
    stable 2c / (a + √(a² + 4bc)).

    Raises:
        TargetUnreachable: si |target| > décalage maximal avant i_critical
    """
    if target > 0:
        raise TargetUnreachable(f"δf = {target / 1e6:.3f} MHz > 0: la réponse est toujours négative")
    reach = max_shift(p)
    if -target >= reach:
        raise TargetUnreachable(
            f"|δf| = {-target / 1e6:.3f} MHz au-delà du maximum {reach / 1e6:.3f} MHz ({p.name})"
        )
    a = 1.0 / p.i2_star ** 2
    b = 1.0 / p.i4_star ** 4
    c = -target / p.f0
    x = 2.0 * c / (a + math.sqrt(a * a + 4.0 * b * c))
    return min(math.sqrt(x), math.nextafter(p.i_critical, 0.0))


def tuning_curve(p: DeviceTuningParams, currents: Sequence[float]) -> pd.DataFrame:
    """Courbe δf(i) au format CSV (current_ma, delta_f_mhz)."""
    currents = np.asarray(currents, dtype=float)
    return pd.DataFrame({
        "current_ma": currents * 1e3,
        "delta_f_mhz": np.asarray(delta_f(currents, p)) / 1e6,
    })


# ============================================================
# AJUSTEMENT
# ============================================================

def fit_tuning_params(data: TuningDataset, f0: float) -> FitResult:
    """
    Ajuste I2*, I4* sur des mesures (i, δf) à f0 fixé.

    Le modèle est linéaire en (a, b) = (1/I2*², 1/I4*⁴): y = a·x + b·x²
    avec x = i², y = -δf/f0. Levenberg-Marquardt sur les paramètres
    réduits (colonnes normalisées), départ en (0, 0).

    Returns:
        FitResult (i4_star = inf si b ≤ 0)

    Raises:
        ValueError: moins de 4 points
        FitDiverged: résidu non réduit
        IllConditioned: JᵀJ singulière
    """
    if len(data.points) < 4:
        raise ValueError("au moins 4 points sont requis")

    x = data.currents ** 2
    y = -data.shifts / f0
    x_scale = float(x.max())
    if x_scale == 0:
        raise IllConditioned("tous les courants sont nuls")
    u = x / x_scale

    jac = np.column_stack([u, u ** 2])
    residuals = lambda q: jac @ q - y

    start = np.zeros(2)
    initial_cost = 0.5 * float(residuals(start) @ residuals(start))
    result = optimize.least_squares(residuals, start, jac=lambda q: jac, method="lm")
    if not result.success or (initial_cost > 0 and result.cost >= initial_cost):
        raise FitDiverged(f"résidu non réduit ({result.message})")

    jtj = jac.T @ jac
    if np.linalg.cond(jtj) > 1e14:
        raise IllConditioned("JᵀJ singulière: données insuffisantes pour séparer I2* et I4*")

    dof = max(len(y) - 2, 1)
    sigma2 = 2.0 * result.cost / dof
    cov_q = sigma2 * np.linalg.inv(jtj)

    a = result.x[0] / x_scale
    b = result.x[1] / x_scale ** 2
    if a <= 0:
        raise FitDiverged("terme quadratique non positif")
    i2 = 1.0 / math.sqrt(a)
    i4 = b ** -0.25 if b > 0 else math.inf

    # Jacobien (q1, q2) -> (i2, i4)
    d_i2 = -0.5 * a ** -1.5 / x_scale
    d_i4 = -0.25 * b ** -1.25 / x_scale ** 2 if b > 0 else math.inf
    transform = np.diag([d_i2, d_i4])
    with np.errstate(invalid="ignore"):
        covariance = transform @ cov_q @ transform.T
    if not math.isfinite(i4):
        covariance[1, :] = covariance[:, 1] = math.inf

    rms = math.sqrt(2.0 * result.cost / len(y)) * f0
    return FitResult(i2_star=i2, i4_star=i4, covariance=covariance, residual_rms=rms, n_points=len(y))


# ============================================================
# EXIGENCES DE Q ET PUISSANCE
# ============================================================

def q_requirement(f_center: float, span: float) -> float:
    """Q d'un résonateur fixe couvrant deux fréquences distantes de span."""
    if not span > 0:
        raise ValueError("span doit être > 0")
    return f_center / span


def sensitivity_penalty(q_tunable: float, q_fixed: float) -> Tuple[float, float]:
    """
    Perte d'un résonateur fixe de bas Q face au résonateur accordable.

    Le signal d'écho suit Q à puissance fixe; le temps de moyennage à
    rapport signal/bruit égal suit son carré.

    Returns:
        (facteur de réduction du signal, facteur d'allongement du moyennage)
    """
    ratio = q_tunable / q_fixed
    return ratio, ratio ** 2


def check_power(power_dbm: float, p: DeviceTuningParams, biased: bool) -> bool:
    """
    Vérifie le plafond de puissance; avertit (PowerCapExceeded) au-delà.

    Returns:
        True si la puissance est sous le plafond
    """
    cap = p.max_power_biased if biased else p.max_power_no_bias
    if power_dbm > cap + 1e-9:
        warnings.warn(
            f"{power_dbm:.1f} dBm au-delà du plafond {cap:.1f} dBm ({p.name}, "
            f"{'avec' if biased else 'sans'} courant): distorsion de la raie",
            PowerCapExceeded,
            stacklevel=2,
        )
        return False
    return True


# ============================================================
# FICHIERS DISPOSITIF
# ============================================================

class _DeviceFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    f0_hz: float
    i2_star_ma: float
    i4_star_ma: float
    i_critical_ma: float
    q_loaded: float
    coupling: float
    max_power_no_bias_dbm: float
    max_power_biased_dbm: float
    center_pin_width_um: float
    gap_um: Optional[float] = None
    lag_time_constant_ns: float = 74.8
    b1_anchor: Optional[Dict[str, float]] = None
    approximate: Tuple[str, ...] = ()
    calibrated: Tuple[str, ...] = ()
    notes: str = ""

    @model_validator(mode="after")
    def _anchor_keys(self):
        if self.b1_anchor is not None and set(self.b1_anchor) != {"power_dbm", "b1_ut"}:
            raise ValueError("b1_anchor attend les clés power_dbm et b1_ut")
        return self

    @model_validator(mode="after")
    def _provenance(self):
        both = set(self.approximate) & set(self.calibrated)
        if both:
            raise ValueError(f"champs à la fois approximatifs et calibrés: {sorted(both)}")
        return self


def load_device(name_or_path: str) -> DeviceTuningParams:
    """
    Charge un dispositif livré ('4um', '2p5um', '1p5um') ou un fichier JSON.

    Raises:
        FileNotFoundError: fichier absent
        ParseError: JSON invalide ou schéma non respecté
    """
    path = name_or_path if os.path.exists(name_or_path) else get_device_path(name_or_path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"Dispositif introuvable: {name_or_path}")

    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        raw = json.loads(text)
        spec = _DeviceFile(**raw)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, exc.lineno, exc.colno) from exc
    except ValidationError as exc:
        raise ParseError(str(exc), path) from exc

    anchor = spec.b1_anchor or {}
    return DeviceTuningParams(
        f0=spec.f0_hz,
        i2_star=spec.i2_star_ma * 1e-3,
        i4_star=spec.i4_star_ma * 1e-3,
        i_critical=spec.i_critical_ma * 1e-3,
        q_loaded=spec.q_loaded,
        coupling=spec.coupling,
        max_power_no_bias=spec.max_power_no_bias_dbm,
        max_power_biased=spec.max_power_biased_dbm,
        center_pin_width=spec.center_pin_width_um * 1e-6,
        name=spec.name,
        lag_time_constant=spec.lag_time_constant_ns * 1e-9,
        b1_anchor_power=anchor.get("power_dbm"),
        b1_anchor_tesla=anchor["b1_ut"] * 1e-6 if "b1_ut" in anchor else None,
        gap=spec.gap_um * 1e-6 if spec.gap_um is not None else None,
        approximate=tuple(spec.approximate),
        calibrated=tuple(spec.calibrated),
    )
