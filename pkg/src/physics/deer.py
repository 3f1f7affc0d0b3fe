"""
DEER - Double résonance électron-électron ³¹P / ⁷⁵As
====================================================
Partenaires ⁷⁵As tirés aléatoirement autour de chaque observateur ³¹P,
déphasage dipolaire induit par la pompe, courbes écho(t) et loi
exponentielle de diffusion instantanée.

Mode analytique: pompe instantanée et parfaite, écho = moyenne sur les
observateurs de Π cos(D_k·t) sur les partenaires retournés.
Mode complet: spinsim propage les observateurs avec le champ dipolaire de
leurs partenaires, retourné au centre de la pompe, sous le programme de
réaccord (attente, pompe, retour, lobe de compensation). La fraction
retournée suit l'efficacité de la pompe propagée sur la raie ⁷⁵As et
chaque branche est rapportée à son écho sans pompe au même réaccord.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.constants import hbar, mu_0
from tqdm import tqdm

from src.config import (
    DEER_TAU,
    DEER_T_MIN,
    DEER_SETTLE,
    DEER_PUMP_OFFSET,
    DEER_PUMP_DURATION,
    AS_CONCENTRATION,
    DEER_TARGET_ECHO,
    DEER_TARGET_TIME,
    DEER_CUTOFF_FACTOR,
    DEER_OBSERVERS,
    DEER_OFF_RESONANCE_SHIFT,
    DEER_SLAB_THICKNESS,
    COMPENSATION_TAIL_LAGS,
    RECT_REFERENCE_POWER,
    MISALIGNMENT,
    get_threads,
)
from src.errors import TimingViolation
from src.physics.biasdyn import static_transmission
from src.physics.fieldmap import EchoTiming, compensation_schedule, geometry_for_device
from src.physics.kinet import DeviceTuningParams, invert_delta_f, load_device
from src.physics.spinsim import (
    Ensemble,
    PulseElement,
    SpinSystemConfig,
    build_ensemble,
    default_spin_config,
    hahn_sequence,
    inversion_efficiency,
    rect_amplitude_for_power,
    run_sequence,
    sequence_timing,
)
from src.results import ExperimentResult
from src.utils.rng import stream

ELECTRON_GAMMA = 2 * math.pi * 28.0e9                  # rad/s/T
DIPOLAR_CONSTANT = mu_0 * ELECTRON_GAMMA ** 2 * hbar / (4 * math.pi)   # rad·m³/s
ID_GEOMETRY_FACTOR = 8 * math.pi ** 2 / (9 * math.sqrt(3))
GEOMETRIES = ("sphere", "slab")


# ============================================================
# TYPES
# ============================================================

@dataclass(frozen=True)
class DeerConfig:
    tau: float = DEER_TAU
    t_min: float = DEER_T_MIN
    settle_time: float = DEER_SETTLE
    pump_offset: float = DEER_PUMP_OFFSET
    pump_duration: float = DEER_PUMP_DURATION
    as_concentration: float = AS_CONCENTRATION
    flip_fraction: Optional[float] = None
    cutoff_radius: Optional[float] = None
    seed: int = 0
    n_observers: int = DEER_OBSERVERS
    geometry: str = "sphere"
    slab_thickness: float = DEER_SLAB_THICKNESS

    def __post_init__(self):
        if self.t_min < self.settle_time:
            raise ValueError("t_min doit être ≥ settle_time")
        if not self.tau > self.t_min:
            raise ValueError("tau doit être > t_min")
        if self.as_concentration < 0:
            raise ValueError("as_concentration doit être ≥ 0")
        if self.flip_fraction is not None and not 0 <= self.flip_fraction <= 1:
            raise ValueError("flip_fraction doit être dans [0, 1]")
        if self.geometry not in GEOMETRIES:
            raise ValueError(f"géométrie inconnue: {self.geometry}")

    @property
    def radius(self) -> float:
        """Rayon de coupure: |D| = facteur/τ pour θ = 90°."""
        if self.cutoff_radius is not None:
            return self.cutoff_radius
        return (DIPOLAR_CONSTANT * self.tau / DEER_CUTOFF_FACTOR) ** (1.0 / 3.0)

    @property
    def fraction(self) -> float:
        return calibrate_flip_fraction(self) if self.flip_fraction is None else self.flip_fraction


@dataclass(frozen=True)
class PartnerSet:
    couplings: np.ndarray = field(repr=False)
    flipped: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return int(self.couplings.size)


# ============================================================
# COUPLAGE ET ÉCHANTILLONNAGE
# ============================================================

def dipolar_coupling(r, theta):
    """D = (μ0γ²ħ/4π)·(1 - 3cos²θ)/r³ en rad/s."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("r doit être > 0")
    value = DIPOLAR_CONSTANT * (1.0 - 3.0 * np.cos(theta) ** 2) / r ** 3
    return float(value) if np.ndim(value) == 0 else value


def _draw_partners(cfg: DeerConfig, observer_index: int, fraction: float) -> PartnerSet:
    rng = stream(cfg.seed, "deer", observer_index)
    radius = cfg.radius
    count = int(rng.poisson(cfg.as_concentration * 4.0 / 3.0 * math.pi * radius ** 3))
    r = radius * rng.random(count) ** (1.0 / 3.0)
    direction = rng.standard_normal((count, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    draws = rng.random(count)

    keep = np.ones(count, dtype=bool)
    if cfg.geometry == "slab":
        depth = rng.random() * cfg.slab_thickness
        partner_depth = depth + r * direction[:, 2]
        keep = (partner_depth >= 0) & (partner_depth <= cfg.slab_thickness)

    # B0 dans le plan, selon x
    cos_theta = direction[keep, 0]
    couplings = DIPOLAR_CONSTANT * (1.0 - 3.0 * cos_theta ** 2) / r[keep] ** 3
    return PartnerSet(couplings=couplings, flipped=draws[keep] < fraction)


def sample_partners(cfg: DeerConfig, observer_index: int) -> PartnerSet:
    """
    Partenaires ⁷⁵As d'un observateur: nombre de Poisson dans la sphère de
    coupure, positions uniformes, retournement Bernoulli(flip_fraction).

    Le tirage est déterministe pour (seed, observer_index); à seed fixée,
    l'ensemble retourné croît avec flip_fraction.
    """
    return _draw_partners(cfg, observer_index, cfg.fraction)


def sample_observers(cfg: DeerConfig, fraction: Optional[float] = None,
                     threads: Optional[int] = None) -> np.ndarray:
    """
    Couplages retournés de tous les observateurs, complétés par des zéros.

    Returns:
        Tableau (n_observers, max_partenaires) en rad/s
    """
    fraction = cfg.fraction if fraction is None else fraction
    indices = range(cfg.n_observers)
    workers = threads or get_threads()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            sets = list(pool.map(lambda k: _draw_partners(cfg, k, fraction), indices))
    else:
        sets = [_draw_partners(cfg, k, fraction) for k in indices]

    width = max((int(s.flipped.sum()) for s in sets), default=0)
    table = np.zeros((cfg.n_observers, max(width, 1)))
    for k, s in enumerate(sets):
        flipped = s.couplings[s.flipped]
        table[k, :flipped.size] = flipped
    return table


# ============================================================
# ÉCHO
# ============================================================

def observer_echo(partners: PartnerSet, t: float) -> float:
    """Π cos(D_k·t) sur les partenaires retournés."""
    return float(np.prod(np.cos(partners.couplings[partners.flipped] * t)))


def check_timing(t: float, cfg: DeerConfig) -> None:
    """
    Raises:
        TimingViolation: t < t_min ou pompe chevauchant le π observateur
    """
    if t < cfg.t_min:
        raise TimingViolation(f"t = {t * 1e6:.2f} μs < t_min ({cfg.t_min * 1e6:.0f} μs)")
    if t > cfg.tau - cfg.pump_duration:
        raise TimingViolation(
            f"t = {t * 1e6:.2f} μs > tau - durée de pompe ({(cfg.tau - cfg.pump_duration) * 1e6:.2f} μs)"
        )


def deer_echo(t: float, cfg: DeerConfig, flipped_couplings: Optional[np.ndarray] = None) -> float:
    """
    Écho normalisé moyenné sur les observateurs.

    Args:
        t: Instant de la pompe après le π/2 (s)
        cfg: Configuration DEER
        flipped_couplings: Sortie de sample_observers (recalculée sinon)

    Raises:
        TimingViolation: fenêtre de t non respectée
    """
    check_timing(t, cfg)
    table = sample_observers(cfg) if flipped_couplings is None else flipped_couplings
    return float(np.mean(np.prod(np.cos(table * t), axis=1)))


def calibrate_flip_fraction(cfg: DeerConfig, target_echo: float = DEER_TARGET_ECHO,
                            t: float = DEER_TARGET_TIME) -> float:
    """
    Fraction retournée telle que la loi exponentielle donne target_echo à t.

    -ln E = C·f·(8π²/9√3)·D0·t
    """
    if cfg.as_concentration == 0:
        return 0.0
    rate = cfg.as_concentration * ID_GEOMETRY_FACTOR * DIPOLAR_CONSTANT * t
    return min(-math.log(target_echo) / rate, 1.0)


def instantaneous_diffusion_echo(t, cfg: DeerConfig, fraction: Optional[float] = None):
    """exp(-C·f·(8π²/9√3)·D0·t) pour une distribution poissonienne infinie."""
    fraction = cfg.fraction if fraction is None else fraction
    return np.exp(-cfg.as_concentration * fraction * ID_GEOMETRY_FACTOR * DIPOLAR_CONSTANT * np.asarray(t))


# ============================================================
# MODE COMPLET (SPINSIM)
# ============================================================

@dataclass
class FullModeContext:
    """
    Paramètres du mode complet. n_detuning et grid discrétisent la raie
    ⁷⁵As pompée; observer_detuning et observer_grid le paquet ³¹P répliqué
    pour chaque observateur et ses partenaires.
    """
    dev: DeviceTuningParams
    spin_cfg: SpinSystemConfig
    pump_amplitude: float
    theta: float = math.radians(MISALIGNMENT)
    n_detuning: int = 16
    grid: Tuple[int, int] = (4, 4)
    observer_detuning: int = 1
    observer_grid: Tuple[int, int] = (1, 1)
    _cache: dict = field(default_factory=dict, repr=False)


def _as_ensemble(ctx: FullModeContext, line_offset: float):
    geom = geometry_for_device(ctx.dev)
    ens = build_ensemble(ctx.spin_cfg, geom, ctx.theta, ctx.n_detuning, ctx.grid, species="As75")
    return ens.with_detuning(ens.detuning0 + 2 * math.pi * line_offset)


def pump_efficiency(ctx: FullModeContext, carrier_offset: float, retuned: bool,
                    line_offset: float = DEER_PUMP_OFFSET) -> float:
    """
    Fraction inversée de la raie ⁷⁵As par la pompe rectangulaire.

    Sans réaccord, l'amplitude de pompe est filtrée par la lorentzienne du
    résonateur au désaccord carrier_offset.
    """
    key = ("eta", carrier_offset, retuned, line_offset)
    if key in ctx._cache:
        return ctx._cache[key]
    amplitude = ctx.pump_amplitude
    if not retuned:
        amplitude *= static_transmission(ctx.dev, carrier_offset)
    pulse = PulseElement("rect", DEER_PUMP_DURATION, amplitude, 0.0, carrier_offset=carrier_offset)
    ens = _as_ensemble(ctx, line_offset)
    inverted = inversion_efficiency(pulse, ens.b1_scale, ens.detuning0)
    eta = float(np.sum(ens.weight * inverted) / np.sum(ens.weight))
    ctx._cache[key] = eta
    return eta


def _observer_sequence(t: float, cfg: DeerConfig, pump: Optional[PulseElement]) -> List[PulseElement]:
    base = hahn_sequence(cfg.tau, "rect")
    if pump is None:
        return base
    pi2, first, pi = base[0], base[1], base[2]
    pump_start = pi2.duration / 2 + t - pump.duration / 2
    before = pump_start - pi2.duration
    after = first.duration - before - pump.duration
    if before <= 0 or after <= 0:
        raise TimingViolation(f"pompe à t = {t * 1e6:.2f} μs hors de la première évolution libre")
    return [pi2, PulseElement("delay", before), pump, PulseElement("delay", after), pi] + base[3:]


def retune_window(t: float, cfg: DeerConfig, lag: float = 0.0) -> Tuple[EchoTiming, float, float]:
    """
    Chronologie observateur et bornes (début, fin) de la pompe à l'instant t.

    Le retour à f0 doit laisser max(settle_time, COMPENSATION_TAIL_LAGS·lag)
    avant le π observateur.

    Raises:
        TimingViolation: retour du résonateur après le début du π
    """
    timing = replace(sequence_timing(hahn_sequence(cfg.tau, "rect")), settle_time=cfg.settle_time)
    pump_start = timing.pi2_duration / 2 + t - cfg.pump_duration / 2
    pump_end = pump_start + cfg.pump_duration
    guard = max(cfg.settle_time, COMPENSATION_TAIL_LAGS * lag)
    if pump_end + guard > timing.pi_center - timing.pi_duration / 2:
        raise TimingViolation(
            f"t = {t * 1e6:.2f} μs: le résonateur ne revient pas à f0 avant le π observateur"
        )
    return timing, pump_start, pump_end


def partner_ensemble(base: Ensemble, cfg: DeerConfig, fraction: float) -> Ensemble:
    """
    Observateurs ³¹P couplés à leurs partenaires ⁷⁵As retournés.

    L'observateur k reprend les partenaires de sample_observers et reçoit
    des signes ±1 tirés du flux (seed, "deer.state"); son champ dipolaire
    Σ s_j·D_j est répliqué avec le signe opposé. La moyenne sur cette paire
    et sur les observateurs estime sans biais la moyenne des Π cos(D_j·t).

    Returns:
        Ensemble de 2·n_observers·base.size paquets, poids de somme Σ base.weight
    """
    table = sample_observers(cfg, fraction)
    signs = stream(cfg.seed, "deer.state", 0).choice((-1.0, 1.0), size=table.shape)
    fields = np.sum(signs * table, axis=1)
    dipolar = np.column_stack([fields, -fields]).ravel()
    return replace(base.tiled(dipolar.size), dipolar=np.repeat(dipolar, base.size))


def _observer_base(ctx: FullModeContext) -> Ensemble:
    if "observers" not in ctx._cache:
        geom = geometry_for_device(ctx.dev)
        ctx._cache["observers"] = build_ensemble(ctx.spin_cfg, geom, ctx.theta, ctx.observer_detuning,
                                                 ctx.observer_grid)
    return ctx._cache["observers"]


def observer_echo_ratio(t: float, cfg: DeerConfig, ctx: FullModeContext, carrier_offset: float,
                        retuned: bool = True, fraction: float = 0.0) -> float:
    """
    Écho ³¹P avec pompe rapporté à l'écho sans pompe sous le même réaccord.

    Les deux échos partagent le programme de courant (réaccord, attente,
    retour, lobe de compensation). Avec fraction > 0, les partenaires
    retournés sont propagés: leur champ dipolaire change de signe au centre
    de la pompe.

    Raises:
        TimingViolation: retour du résonateur après le début du π
        DoesNotFit: lobe de réaccord hors des fenêtres
    """
    spin_cfg = ctx.spin_cfg
    base = _observer_base(ctx)

    amplitude = ctx.pump_amplitude if retuned else ctx.pump_amplitude * static_transmission(ctx.dev, carrier_offset)
    pump = PulseElement("rect", cfg.pump_duration, amplitude, 0.0, carrier_offset=carrier_offset)
    seq = _observer_sequence(t, cfg, pump)

    sched = None
    if retuned:
        timing, pump_start, pump_end = retune_window(t, cfg, ctx.dev.lag_time_constant)
        current = invert_delta_f(carrier_offset, ctx.dev)
        sched = compensation_schedule("symmetric_pair", timing, current, lag=ctx.dev.lag_time_constant,
                                      lobe=(pump_start - cfg.settle_time, pump_end))
        sched.check_device(ctx.dev)
    reference = run_sequence(base, _observer_sequence(t, cfg, None), sched, spin_cfg).amplitude

    if fraction > 0:
        key = ("partners", fraction)
        if key not in ctx._cache:
            ctx._cache[key] = partner_ensemble(base, cfg, fraction)
        flip = seq[0].duration / 2 + t
        echo = run_sequence(ctx._cache[key], seq, sched, spin_cfg, partner_flip=flip)
    else:
        echo = run_sequence(base, seq, sched, spin_cfg)
    return echo.amplitude / reference


def deer_curve(
    cfg: DeerConfig,
    t_grid: Sequence[float],
    mode: str = "analytic",
    dev: Optional[DeviceTuningParams] = None,
    spin_cfg: Optional[SpinSystemConfig] = None,
    retuned: bool = True,
    verbose: bool = False,
) -> ExperimentResult:
    """
    Courbes écho(t) pompe résonante / pompe hors résonance.

    Args:
        cfg: Configuration DEER
        t_grid: Instants de pompe (s)
        mode: "analytic" ou "full"
        retuned: Mode complet seulement; False laisse le résonateur à f0

    Returns:
        ExperimentResult (t_us, echo_norm_on_res, echo_norm_off_res)

    Raises:
        TimingViolation: instant hors de la fenêtre autorisée
    """
    for t in t_grid:
        check_timing(t, cfg)
    fraction = cfg.fraction
    metadata = {"mode": mode, "flip_fraction": fraction, "cutoff_radius_nm": cfg.radius * 1e9,
                "n_observers": cfg.n_observers, "geometry": cfg.geometry, "seed": cfg.seed}

    if mode == "analytic":
        table = sample_observers(cfg, fraction)
        on_res = [float(np.mean(np.prod(np.cos(table * t), axis=1)))
                  for t in tqdm(t_grid, desc="DEER", disable=not verbose)]
        off_res = [1.0] * len(on_res)
    elif mode == "full":
        dev = dev or load_device("4um")
        ctx = FullModeContext(dev=dev, spin_cfg=spin_cfg or default_spin_config(),
                              pump_amplitude=rect_amplitude_for_power(RECT_REFERENCE_POWER))
        eta_nominal = pump_efficiency(ctx, cfg.pump_offset, True)
        off_carrier = cfg.pump_offset + DEER_OFF_RESONANCE_SHIFT
        fractions = {carrier: min(fraction * pump_efficiency(ctx, carrier, retuned) / eta_nominal, 1.0)
                     for carrier in (cfg.pump_offset, off_carrier)}
        on_res, off_res = [], []
        for t in tqdm(t_grid, desc="DEER (full)", disable=not verbose):
            for carrier, out in ((cfg.pump_offset, on_res), (off_carrier, off_res)):
                out.append(observer_echo_ratio(t, cfg, ctx, carrier, retuned, fractions[carrier]))
        metadata["pump_efficiency"] = eta_nominal
        metadata["flip_fraction_off_res"] = fractions[off_carrier]
        metadata["retuned"] = retuned
    else:
        raise ValueError(f"mode inconnu: {mode}")

    t_us = [t * 1e6 for t in t_grid]
    return ExperimentResult.from_columns(
        "t_us", t_us, {"echo_norm_on_res": on_res, "echo_norm_off_res": off_res}, metadata=metadata
    )
