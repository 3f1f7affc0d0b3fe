"""
Spinsim - Propagation de Bloch d'ensembles de spins
===================================================
Référentiel tournant, impulsions rectangulaires et BIR-4 (demi-passages
WURST-20), séquences d'écho de Hahn, balayages en champ détectés par écho
et extraction de T2.

Convention: dm/dt = m × Ω avec Ω = (ω1·cos φ, ω1·sin φ, Δ). Une π/2(+x)
amène +z sur +y; l'écho d'une séquence π/2(+x)-τ-π(+y)-τ se forme sur +y.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import interpolate, optimize
from tqdm import tqdm

from src.config import (
    GH_NODES,
    SPATIAL_GRID,
    ACQUIRE_WINDOW,
    HAHN_TAU,
    RECT_PI2_DURATION,
    RECT_REFERENCE_POWER,
    RECT_BIASED_POWER,
    ADIABATIC_POWER,
    ADIABATIC_DURATION,
    ADIABATIC_CHIRP,
    LINE_CENTER_FIELD,
    BIASED_LINE_FIELD,
    FIELD_CALIBRATION_CURRENT,
    LINE_FWHM,
    T2_DEFAULT,
    MISALIGNMENT,
    MAX_ROTATION_PER_STEP,
    SPIN_REGION,
    AS_LINE_OFFSET,
    get_threads,
)
from src.errors import StepTooLarge, FitDiverged, TimingViolation
from src.physics.biasdyn import BiasSchedule, current_at, bias_phase_integral
from src.physics.fieldmap import (
    CpwGeometry,
    EchoTiming,
    FWHM_PER_SIGMA,
    b1_per_amp,
    broadening_profile,
    bias_shift_per_amp,
    compensation_schedule,
    geometry_for_device,
    random_region_samples,
    region_samples,
)
from src.physics.kinet import DeviceTuningParams, check_power, delta_f, load_device
from src.results import ExperimentResult
from src.utils.rng import stream

SPECIES = ("P31", "As75")
PULSE_KINDS = ("rect", "bir4_wurst20", "delay", "acquire")
OMEGA1_REFERENCE = (math.pi / 2) / RECT_PI2_DURATION    # rad/s à RECT_REFERENCE_POWER
ACQUIRE_SAMPLES = 41
CHUNK_SIZE = 4096
TABLE_DETUNING_SPAN = 2 * math.pi * 8e6                 # rad/s
TABLE_DETUNING_POINTS = 161
TABLE_B1_POINTS = 9
RESPONSE_OFFSET_SPAN = 2 * math.pi * 1e6                 # rad/s, recherche du maximum de réponse
# (phase ajoutée à la première impulsion, à la dernière, signe du récepteur)
PHASE_CYCLE = ((0.0, 0.0, 1.0), (math.pi, 0.0, -1.0), (0.0, math.pi / 2, -1.0), (math.pi, math.pi / 2, 1.0))

BiasInput = Union[None, BiasSchedule, Callable[[np.ndarray], np.ndarray]]


# ============================================================
# TYPES
# ============================================================

@dataclass
class SpinPacket:
    m: np.ndarray
    detuning0: float = 0.0
    b1_scale: float = 1.0
    bias_shift: float = 0.0
    weight: float = 1.0
    species: str = "P31"

    def __post_init__(self):
        self.m = np.array(self.m, dtype=float).reshape(3)
        if np.linalg.norm(self.m) > 1 + 1e-9:
            raise ValueError("|m| doit être ≤ 1")
        if self.weight < 0:
            raise ValueError("weight doit être ≥ 0")
        if self.species not in SPECIES:
            raise ValueError(f"espèce inconnue: {self.species}")


@dataclass
class Ensemble:
    """
    Paquets d'une même espèce, stockés en colonnes.

    dipolar est le champ local (rad/s) des partenaires retournés par une
    pompe: il vaut +dipolar/2 avant le retournement et -dipolar/2 après.
    """
    m: np.ndarray
    detuning0: np.ndarray
    b1_scale: np.ndarray
    bias_shift: np.ndarray
    weight: np.ndarray
    species: str = "P31"
    dipolar: Optional[np.ndarray] = None

    def __post_init__(self):
        self.m = np.array(self.m, dtype=float).reshape(-1, 3)
        n = self.m.shape[0]
        if self.dipolar is None:
            self.dipolar = 0.0
        for name in ("detuning0", "b1_scale", "bias_shift", "weight", "dipolar"):
            value = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (n,)).copy()
            setattr(self, name, value)
        if np.any(self.weight < 0):
            raise ValueError("poids négatif")
        if np.any(np.linalg.norm(self.m, axis=1) > 1 + 1e-9):
            raise ValueError("|m| doit être ≤ 1")

    @property
    def size(self) -> int:
        return self.m.shape[0]

    @classmethod
    def from_packets(cls, packets: Sequence[SpinPacket]) -> "Ensemble":
        species = {p.species for p in packets}
        if len(species) != 1:
            raise ValueError("un ensemble ne contient qu'une espèce")
        return cls(
            m=np.stack([p.m for p in packets]),
            detuning0=[p.detuning0 for p in packets],
            b1_scale=[p.b1_scale for p in packets],
            bias_shift=[p.bias_shift for p in packets],
            weight=[p.weight for p in packets],
            species=species.pop(),
        )

    @classmethod
    def uniform(cls, detuning0, b1_scale=1.0, bias_shift=0.0, species: str = "P31") -> "Ensemble":
        """Paquets à l'équilibre (+z), poids égaux de somme 1."""
        det = np.atleast_1d(np.asarray(detuning0, dtype=float))
        n = det.size
        m = np.tile([0.0, 0.0, 1.0], (n, 1))
        return cls(m, det, b1_scale, bias_shift, np.full(n, 1.0 / n), species)

    def packet(self, k: int) -> SpinPacket:
        return SpinPacket(self.m[k].copy(), self.detuning0[k], self.b1_scale[k],
                          self.bias_shift[k], self.weight[k], self.species)

    def subset(self, index) -> "Ensemble":
        return Ensemble(self.m[index], self.detuning0[index], self.b1_scale[index],
                        self.bias_shift[index], self.weight[index], self.species, self.dipolar[index])

    def scaled(self, factor: float) -> "Ensemble":
        return replace(self, weight=self.weight * factor)

    def with_detuning(self, detuning0: np.ndarray) -> "Ensemble":
        return replace(self, detuning0=np.asarray(detuning0, dtype=float), m=self.m.copy())

    def tiled(self, count: int) -> "Ensemble":
        """count copies consécutives des paquets, poids divisés par count."""
        return Ensemble(np.tile(self.m, (count, 1)), np.tile(self.detuning0, count),
                        np.tile(self.b1_scale, count), np.tile(self.bias_shift, count),
                        np.tile(self.weight, count) / count, self.species, np.tile(self.dipolar, count))


@dataclass(frozen=True)
class PulseElement:
    kind: str
    duration: float
    amplitude: float = 0.0
    phase: float = 0.0
    flip_angle: float = math.pi
    chirp_halfwidth: float = 0.0
    carrier_offset: float = 0.0

    def __post_init__(self):
        if self.kind not in PULSE_KINDS:
            raise ValueError(f"type d'impulsion inconnu: {self.kind}")
        if not self.duration > 0:
            raise ValueError(f"{self.kind}: duration doit être > 0")
        if self.kind == "bir4_wurst20" and not self.chirp_halfwidth > 0:
            raise ValueError("bir4_wurst20: chirp_halfwidth doit être > 0")

    @property
    def is_pulse(self) -> bool:
        return self.kind in ("rect", "bir4_wurst20")


@dataclass(frozen=True)
class SpinSystemConfig:
    gamma_eff: Dict[str, float]
    line_center_field: Dict[str, float]
    line_fwhm: float = LINE_FWHM
    t2: float = T2_DEFAULT
    t1: float = math.inf
    stretch: float = 1.0

    def __post_init__(self):
        if not (self.line_fwhm > 0 and self.t2 > 0 and self.t1 > 0 and self.stretch > 0):
            raise ValueError("largeurs et temps doivent être > 0")
        if any(g <= 0 for g in self.gamma_eff.values()):
            raise ValueError("gamma_eff doit être > 0")

    @property
    def line_sigma(self) -> float:
        return self.line_fwhm / FWHM_PER_SIGMA


@dataclass(frozen=True)
class EchoResult:
    amplitude: float
    phase: float
    times: np.ndarray = field(repr=False)
    trace: np.ndarray = field(repr=False)
    contributions: np.ndarray = field(repr=False)


def calibrated_gamma(calibration_device: str = "4um", theta: float = math.radians(MISALIGNMENT)) -> float:
    """
    Pente champ-fréquence (Hz/T) tirée du déplacement de raie mesuré à 4 mA.

    Le déplacement mesuré contient aussi la composante moyenne de B_i le
    long de B0 sur la région détectée; elle est retirée avant la division.
    """
    dev = load_device(calibration_device)
    b_par = broadening_profile(geometry_for_device(dev), FIELD_CALIBRATION_CURRENT, theta, SPIN_REGION).mean_shift
    return abs(delta_f(FIELD_CALIBRATION_CURRENT, dev)) / (LINE_CENTER_FIELD - BIASED_LINE_FIELD - b_par)


def default_spin_config(t2: float = T2_DEFAULT, t1: float = math.inf,
                        line_fwhm: float = LINE_FWHM, stretch: float = 1.0) -> SpinSystemConfig:
    gamma = calibrated_gamma()
    return SpinSystemConfig(
        gamma_eff={"P31": gamma, "As75": gamma},
        line_center_field={"P31": LINE_CENTER_FIELD, "As75": LINE_CENTER_FIELD - AS_LINE_OFFSET / gamma},
        line_fwhm=line_fwhm,
        t2=t2,
        t1=t1,
        stretch=stretch,
    )


# ============================================================
# CALIBRATION DE LA PUISSANCE
# ============================================================

def rect_amplitude_for_power(power_dbm: float) -> float:
    """ω1 (rad/s) pour une puissance; π/2 de 200 ns à -29 dBm."""
    return OMEGA1_REFERENCE * 10 ** ((power_dbm - RECT_REFERENCE_POWER) / 20.0)


def power_for_amplitude(omega1: float) -> float:
    return RECT_REFERENCE_POWER + 20.0 * math.log10(omega1 / OMEGA1_REFERENCE)


# ============================================================
# FORMES D'ONDE
# ============================================================

def wurst_envelope(x, order: int = 20):
    """Enveloppe WURST sur x ∈ [0, 1]: nulle aux bords, 1 au milieu."""
    return 1.0 - np.abs(np.cos(np.pi * np.asarray(x, dtype=float))) ** order


def _n_steps(duration: float, dt: float) -> int:
    return max(1, int(math.ceil(duration / dt - 1e-9)))


def waveform(p: PulseElement, dt: float) -> np.ndarray:
    """
    Échantillons (ω1, φ, décalage de fréquence en rad/s) au milieu de chaque pas.

    BIR-4: quatre demi-passages, chacun la moitié d'une cloche WURST-20 de
    durée 2·T/4, et sauts de phase ±(π + β/2) à T/4 et 3T/4. Chaque
    segment balaie linéairement une largeur ±chirp_halfwidth, soit
    2·chirp_halfwidth entre la résonance et son extrémité hors résonance;
    l'amplitude WURST-20 ne s'éteint qu'une fois B_eff rabattu sur z.
    """
    if dt > p.duration / 50:
        raise ValueError(f"dt = {dt:.3g} s > duration/50 pour {p.kind}")
    n = _n_steps(p.duration, dt)
    t = (np.arange(n) + 0.5) * (p.duration / n)
    carrier = 2 * math.pi * p.carrier_offset
    samples = np.zeros((n, 3))
    samples[:, 2] = carrier

    if p.kind == "rect":
        samples[:, 0] = p.amplitude
        samples[:, 1] = p.phase
    elif p.kind == "bir4_wurst20":
        t_seg = p.duration / 4
        seg = np.minimum((t // t_seg).astype(int), 3)
        x = t / t_seg - seg
        descending = seg % 2 == 0
        envelope = np.where(descending, wurst_envelope(0.5 + x / 2), wurst_envelope(x / 2))
        sweep = np.where(descending, x, -(1.0 - x)) * (2.0 * p.chirp_halfwidth)
        jump = math.pi + p.flip_angle / 2
        samples[:, 0] = p.amplitude * envelope
        samples[:, 1] = p.phase + np.where((seg == 1) | (seg == 2), jump, 0.0)
        samples[:, 2] = carrier + 2 * math.pi * sweep
    return samples


# ============================================================
# PROPAGATION
# ============================================================

def _bias_function(bias: BiasInput) -> Callable[[np.ndarray], np.ndarray]:
    if bias is None:
        return lambda t: np.zeros_like(np.asarray(t, dtype=float))
    if isinstance(bias, BiasSchedule):
        return lambda t: np.asarray(current_at(bias, np.asarray(t, dtype=float)), dtype=float)
    return lambda t: np.asarray(bias(np.asarray(t, dtype=float)), dtype=float)


def _bias_integral(bias: BiasInput, t0: float, t1: float) -> float:
    if bias is None:
        return 0.0
    if isinstance(bias, BiasSchedule):
        return bias_phase_integral(bias, t0, t1)
    grid = np.linspace(t0, t1, 2001)
    return float(np.trapz(_bias_function(bias)(grid), grid))


def _check_step(ens: Ensemble, wf: np.ndarray, currents: np.ndarray, dt: float) -> None:
    b1_max = float(np.max(np.abs(ens.b1_scale))) if ens.size else 0.0
    det_hi, det_lo = float(np.max(ens.detuning0)), float(np.min(ens.detuning0))
    shift_max = float(np.max(np.abs(ens.bias_shift)))
    dipolar_max = 0.5 * float(np.max(np.abs(ens.dipolar)))
    offsets = (np.maximum(np.abs(det_hi - wf[:, 2]), np.abs(det_lo - wf[:, 2]))
               + shift_max * np.abs(currents) + dipolar_max)
    worst = float(np.max(np.hypot(b1_max * np.abs(wf[:, 0]), offsets))) * dt
    if worst > MAX_ROTATION_PER_STEP:
        raise StepTooLarge(f"dt·max|Ω| = {worst:.3f} rad > {MAX_ROTATION_PER_STEP} rad")


def _rotate(mx, my, mz, ox, oy, oz, dt):
    norm = np.sqrt(ox * ox + oy * oy + oz * oz)
    safe = np.where(norm > 0, norm, 1.0)
    nx, ny, nz = ox / safe, oy / safe, oz / safe
    c, s = np.cos(norm * dt), np.sin(norm * dt)
    dot = (nx * mx + ny * my + nz * mz) * (1.0 - c)
    cx = ny * mz - nz * my
    cy = nz * mx - nx * mz
    cz = nx * my - ny * mx
    return (mx * c - cx * s + nx * dot,
            my * c - cy * s + ny * dot,
            mz * c - cz * s + nz * dot)


def _propagate_arrays(ens: Ensemble, wf: np.ndarray, currents: np.ndarray, dt: float,
                      t2: float = math.inf, t1: float = math.inf,
                      partner: Optional[np.ndarray] = None) -> np.ndarray:
    _check_step(ens, wf, currents, dt)
    mx, my, mz = ens.m[:, 0].copy(), ens.m[:, 1].copy(), ens.m[:, 2].copy()
    decay2 = math.exp(-dt / t2)
    decay1 = math.exp(-dt / t1)
    signs = np.zeros(len(wf)) if partner is None else partner
    for (omega1, phase, offset), current, sign in zip(wf, currents, signs):
        ox = ens.b1_scale * (omega1 * math.cos(phase))
        oy = ens.b1_scale * (omega1 * math.sin(phase))
        oz = ens.detuning0 + ens.bias_shift * current - offset
        if sign:
            oz = oz + ens.dipolar * sign
        mx, my, mz = _rotate(mx, my, mz, ox, oy, oz, dt)
        if decay2 != 1.0:
            mx, my = mx * decay2, my * decay2
        if decay1 != 1.0:
            mz = 1.0 - (1.0 - mz) * decay1

    # retour du référentiel de l'impulsion au référentiel de la séquence
    frame = float(np.sum(wf[:, 2])) * dt
    transverse = (mx + 1j * my) * np.exp(-1j * frame)
    return np.stack([transverse.real, transverse.imag, mz], axis=1)


def propagate(packet: Union[SpinPacket, Ensemble], wf: np.ndarray, bias_current_of_t: BiasInput,
              dt: float, t0: float = 0.0, t2: float = math.inf, t1: float = math.inf):
    """
    Propage un paquet (ou un ensemble) sur des échantillons de forme d'onde.

    Args:
        packet: SpinPacket ou Ensemble
        wf: Sortie de waveform() pour le même dt
        bias_current_of_t: BiasSchedule, fonction i(t) ou None
        dt: Pas (s)
        t0: Instant de début dans la séquence (pour le courant)

    Raises:
        StepTooLarge: dt·max|Ω| > 0.1 rad
    """
    single = isinstance(packet, SpinPacket)
    ens = Ensemble.from_packets([packet]) if single else packet
    times = t0 + (np.arange(len(wf)) + 0.5) * dt
    m = _propagate_arrays(ens, np.asarray(wf, dtype=float), _bias_function(bias_current_of_t)(times), dt, t2, t1)
    if single:
        return replace(packet, m=m[0])
    return replace(ens, m=m)


def _partner_sign(flip: Optional[float], times: np.ndarray) -> np.ndarray:
    """Facteur du champ dipolaire: +1/2 avant le retournement des partenaires, -1/2 après."""
    times = np.asarray(times, dtype=float)
    if flip is None:
        return np.zeros_like(times)
    return np.where(times < flip, 0.5, -0.5)


def _partner_integral(flip: Optional[float], t0: float, t1: float) -> float:
    if flip is None:
        return 0.0
    before = min(max(flip, t0), t1) - t0
    return 0.5 * before - 0.5 * (t1 - t0 - before)


def _free_evolution(m: np.ndarray, ens: Ensemble, bias: BiasInput, t0: float, t_end: float,
                    cfg: SpinSystemConfig, relax: bool, flip: Optional[float] = None) -> np.ndarray:
    span = t_end - t0
    phase = (ens.detuning0 * span + ens.bias_shift * _bias_integral(bias, t0, t_end)
             + ens.dipolar * _partner_integral(flip, t0, t_end))
    transverse = (m[:, 0] + 1j * m[:, 1]) * np.exp(-1j * phase)
    mz = m[:, 2]
    if relax:
        transverse = transverse * math.exp(-span / cfg.t2)
        mz = 1.0 - (1.0 - mz) * math.exp(-span / cfg.t1)
    return np.stack([transverse.real, transverse.imag, mz], axis=1)


def _pulse_step(p: PulseElement, ens: Ensemble, bias: BiasInput, t0: float) -> float:
    b1_max = float(np.max(np.abs(ens.b1_scale)))
    det = float(np.max(np.abs(ens.detuning0))) + 2 * math.pi * (abs(p.carrier_offset) + 2 * p.chirp_halfwidth)
    if bias is not None:
        probe = np.linspace(t0, t0 + p.duration, 201)
        det += float(np.max(np.abs(ens.bias_shift))) * float(np.max(np.abs(_bias_function(bias)(probe))))
    bound = math.hypot(b1_max * p.amplitude, det)
    dt = p.duration / 50
    if bound > 0:
        dt = min(dt, 0.5 * MAX_ROTATION_PER_STEP / bound)
    return p.duration / _n_steps(p.duration, dt)


def _simulate_chunk(ens: Ensemble, seq: Sequence[PulseElement], bias: BiasInput,
                    cfg: SpinSystemConfig, dt: Optional[float], flip: Optional[float] = None):
    relax_steps = cfg.stretch == 1.0
    t2 = cfg.t2 if relax_steps else math.inf
    m = ens.m.copy()
    t = 0.0
    for p in seq:
        if p.kind == "acquire":
            break
        if p.kind == "delay":
            m = _free_evolution(m, ens, bias, t, t + p.duration, cfg, relax_steps, flip)
        else:
            step = dt if dt is not None else _pulse_step(p, ens, bias, t)
            step = p.duration / _n_steps(p.duration, step)
            wf = waveform(p, step)
            times = t + (np.arange(len(wf)) + 0.5) * step
            m = _propagate_arrays(replace(ens, m=m), wf, _bias_function(bias)(times), step, t2, cfg.t1,
                                  _partner_sign(flip, times))
        t += p.duration

    window = seq[-1].duration
    offsets = np.linspace(0.0, window, ACQUIRE_SAMPLES)
    integrals = np.array([_bias_integral(bias, t, t + o) for o in offsets])
    partner = np.array([_partner_integral(flip, t, t + o) for o in offsets])
    phases = (np.outer(ens.detuning0, offsets) + np.outer(ens.bias_shift, integrals)
              + np.outer(ens.dipolar, partner))
    samples = (m[:, 0] + 1j * m[:, 1])[:, None] * np.exp(-1j * phases)
    if relax_steps:
        samples = samples * np.exp(-offsets / cfg.t2)[None, :]
    else:
        samples = samples * np.exp(-((t + offsets) / cfg.t2) ** cfg.stretch)[None, :]
    per_packet = np.trapz(samples, offsets, axis=1) / window
    trace = np.sum(ens.weight[:, None] * samples, axis=0)
    return per_packet, trace, t + offsets


def _check_sequence(seq: Sequence[PulseElement]) -> None:
    acquires = [k for k, p in enumerate(seq) if p.kind == "acquire"]
    if len(acquires) != 1:
        raise ValueError("la séquence doit contenir exactement une fenêtre d'acquisition")
    if acquires[0] != len(seq) - 1:
        raise ValueError("l'acquisition doit terminer la séquence")


def phase_cycle(seq: Sequence[PulseElement]) -> List[Tuple[List[PulseElement], float]]:
    """
    Pas du cycle de phase et signe du récepteur.

    (0, π) sur la première impulsion et (0, π/2) sur la dernière: la
    moyenne signée ne garde que les chemins où la première impulsion crée
    une cohérence que la dernière inverse. Les FID qui traversent le π et
    la FID du π s'annulent, quelle que soit la forme des impulsions. Une
    séquence à moins de deux impulsions n'est pas cyclée.
    """
    pulses = [k for k, p in enumerate(seq) if p.is_pulse]
    if len(pulses) < 2:
        return [(list(seq), 1.0)]
    first, last = pulses[0], pulses[-1]
    steps = []
    for first_shift, last_shift, sign in PHASE_CYCLE:
        cycled = list(seq)
        cycled[first] = replace(seq[first], phase=seq[first].phase + first_shift)
        cycled[last] = replace(seq[last], phase=seq[last].phase + last_shift)
        steps.append((cycled, sign))
    return steps


def run_sequence(
    ensemble: Ensemble,
    seq: Sequence[PulseElement],
    bias: BiasInput = None,
    cfg: Optional[SpinSystemConfig] = None,
    dt: Optional[float] = None,
    dev: Optional[DeviceTuningParams] = None,
    threads: Optional[int] = None,
    partner_flip: Optional[float] = None,
    cycle: bool = True,
) -> EchoResult:
    """
    Exécute une séquence sur un ensemble et intègre l'écho.

    L'amplitude est |Σ w·(m_x + i·m_y)| moyennée sur la fenêtre
    d'acquisition et sur les pas du cycle de phase (cycle=False pour le
    signal brut). Les paquets sont traités par blocs de taille fixe et
    réduits dans l'ordre des blocs: le résultat ne dépend pas du nombre de
    threads.

    Args:
        partner_flip: Instant (s) où la pompe retourne les partenaires;
            le champ dipolar de chaque paquet change alors de signe

    Raises:
        StepTooLarge: pas d'intégration trop grand
    """
    _check_sequence(seq)
    cfg = cfg or default_spin_config()
    if dev is not None:
        biased = isinstance(bias, BiasSchedule) and bias.peak_current > 0
        for p in seq:
            if p.is_pulse and p.amplitude > 0:
                check_power(power_for_amplitude(p.amplitude), dev, biased)

    steps = phase_cycle(seq) if cycle else [(list(seq), 1.0)]
    starts = list(range(0, ensemble.size, CHUNK_SIZE))
    chunks = [ensemble.subset(slice(s, s + CHUNK_SIZE)) for s in starts]
    tasks = [(chunk, step_seq) for step_seq, _ in steps for chunk in chunks]

    def simulate(task):
        chunk, step_seq = task
        return _simulate_chunk(chunk, step_seq, bias, cfg, dt, partner_flip)

    workers = threads or get_threads()
    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(simulate, tasks))
    else:
        outputs = [simulate(task) for task in tasks]

    contributions = np.zeros(ensemble.size, dtype=complex)
    trace = np.zeros(ACQUIRE_SAMPLES, dtype=complex)
    for k, (_, sign) in enumerate(steps):
        block = outputs[k * len(chunks):(k + 1) * len(chunks)]
        contributions = contributions + sign * np.concatenate([o[0] for o in block])
        for _, chunk_trace, _ in block:
            trace = trace + sign * chunk_trace
    contributions = contributions / len(steps)
    trace = trace / len(steps)
    echo = np.sum(ensemble.weight * contributions)
    return EchoResult(
        amplitude=float(abs(echo)),
        phase=float(np.angle(echo)),
        times=outputs[0][2],
        trace=trace,
        contributions=contributions,
    )


# ============================================================
# SÉQUENCES
# ============================================================

def hahn_sequence(
    tau: float = HAHN_TAU,
    style: str = "rect",
    power: Optional[float] = None,
    phases: Tuple[float, float] = (0.0, math.pi / 2),
    acquire: float = ACQUIRE_WINDOW,
    carrier_offset: float = 0.0,
) -> List[PulseElement]:
    """
    π/2(+x) - τ - π(+y) - τ - acquisition, délais mesurés de centre à centre.

    BIR-4: la rotation plane n'ajoute pas de précession nette pendant
    l'impulsion; l'écho se reforme une période libre après la fin du π,
    à 2τ du début de la séquence.

    Raises:
        TimingViolation: tau trop court pour les impulsions
    """
    if style == "rect":
        omega1 = rect_amplitude_for_power(RECT_REFERENCE_POWER if power is None else power)
        pi2 = PulseElement("rect", RECT_PI2_DURATION, omega1, phases[0], carrier_offset=carrier_offset)
        pi = PulseElement("rect", 2 * RECT_PI2_DURATION, omega1, phases[1], carrier_offset=carrier_offset)
    elif style == "adiabatic":
        omega1 = rect_amplitude_for_power(ADIABATIC_POWER if power is None else power)
        pi2 = PulseElement("bir4_wurst20", ADIABATIC_DURATION, omega1, phases[0], math.pi / 2,
                           ADIABATIC_CHIRP, carrier_offset)
        pi = PulseElement("bir4_wurst20", ADIABATIC_DURATION, omega1, phases[1], math.pi,
                          ADIABATIC_CHIRP, carrier_offset)
    else:
        raise ValueError(f"style inconnu: {style}")

    first = tau - pi2.duration / 2 - pi.duration / 2
    if style == "adiabatic":
        second = first - acquire / 2
    else:
        second = tau - pi.duration / 2 - acquire / 2
    if first <= 0 or second <= 0:
        raise TimingViolation(f"tau = {tau * 1e6:.2f} μs trop court pour des impulsions {style}")
    return [pi2, PulseElement("delay", first), pi, PulseElement("delay", second),
            PulseElement("acquire", acquire)]


def sequence_timing(seq: Sequence[PulseElement]) -> EchoTiming:
    """Chronologie d'une séquence produite par hahn_sequence."""
    pi2, first, pi = seq[0], seq[1], seq[2]
    tau = pi2.duration / 2 + first.duration + pi.duration / 2
    return EchoTiming(tau=tau, pi2_duration=pi2.duration, pi_duration=pi.duration,
                      acquire_window=seq[-1].duration, adiabatic=pi2.kind == "bir4_wurst20")


def inversion_efficiency(pulse: PulseElement, b1_scale=1.0, detuning=0.0,
                         dt: Optional[float] = None) -> np.ndarray:
    """(1 - m_z)/2 après l'impulsion, en partant de +z."""
    b1 = np.atleast_1d(np.asarray(b1_scale, dtype=float))
    det = np.atleast_1d(np.asarray(detuning, dtype=float))
    b1, det = np.broadcast_arrays(b1, det)
    ens = Ensemble.uniform(det.ravel(), b1.ravel())
    step = dt if dt is not None else _pulse_step(pulse, ens, None, 0.0)
    step = pulse.duration / _n_steps(pulse.duration, step)
    out = propagate(ens, waveform(pulse, step), None, step)
    return ((1.0 - out.m[:, 2]) / 2).reshape(b1.shape)


# ============================================================
# ENSEMBLES
# ============================================================

def build_ensemble(
    cfg: SpinSystemConfig,
    geom: Optional[CpwGeometry] = None,
    theta: float = math.radians(MISALIGNMENT),
    n_detuning: int = GH_NODES,
    grid: Tuple[int, int] = SPATIAL_GRID,
    region: str = SPIN_REGION,
    species: str = "P31",
    mode: str = "grid",
    seed: int = 0,
) -> Ensemble:
    """
    Ensemble raie × espace: nœuds de Gauss-Hermite sur la raie gaussienne,
    points de la couche détectée pondérés par B1², b1_scale normalisé à une
    moyenne pondérée de 1.

    detuning0 est l'écart au champ de centre de raie, pilote à f0.
    mode="monte_carlo" tire les écarts et positions avec le flux (seed, "spinsim").
    """
    geom = geom or geometry_for_device(load_device("4um"))
    gamma = cfg.gamma_eff[species]
    sigma = 2 * math.pi * gamma * cfg.line_sigma

    if mode == "grid":
        nodes, node_weights = np.polynomial.hermite_e.hermegauss(n_detuning)
        node_weights = node_weights / node_weights.sum()
        y, z = region_samples(geom, region, *grid)
    elif mode == "monte_carlo":
        rng = stream(seed, "spinsim", 0)
        nodes = rng.standard_normal(n_detuning)
        node_weights = np.full(n_detuning, 1.0 / n_detuning)
        y, z = random_region_samples(geom, region, grid[0] * grid[1], rng)
    else:
        raise ValueError(f"mode inconnu: {mode}")

    b1 = b1_per_amp(geom, y, z)
    spatial_weights = b1 ** 2 / np.sum(b1 ** 2)
    b1_scale = b1 / np.sum(spatial_weights * b1)
    shifts = bias_shift_per_amp(geom, y, z, theta, gamma)

    det = np.repeat(-sigma * nodes, y.size)
    weights = np.outer(node_weights, spatial_weights).ravel()
    n = det.size
    return Ensemble(
        m=np.tile([0.0, 0.0, 1.0], (n, 1)),
        detuning0=det,
        b1_scale=np.tile(b1_scale, nodes.size),
        bias_shift=np.tile(shifts, nodes.size),
        weight=weights,
        species=species,
    )


# ============================================================
# BALAYAGES ET DÉCROISSANCES
# ============================================================

def echo_response_table(seq: Sequence[PulseElement], detunings: np.ndarray, b1_scales: np.ndarray,
                        cfg: SpinSystemConfig, dt: Optional[float] = None) -> np.ndarray:
    """Contribution complexe d'un paquet (Δ, b1) à l'écho, sans courant."""
    det, b1 = np.meshgrid(detunings, b1_scales, indexing="ij")
    ens = Ensemble.uniform(det.ravel(), b1.ravel())
    result = run_sequence(ens, seq, None, cfg, dt)
    return result.contributions.reshape(det.shape)


def response_offset(lookup: Callable[[np.ndarray], np.ndarray], ens: Ensemble) -> float:
    """
    Décalage (rad/s) qui maximise |écho| de l'ensemble sans courant.

    Args:
        lookup: Contribution complexe d'un paquet en fonction de (Δ, b1)
        ens: Ensemble (detuning0, b1_scale, weight)
    """
    def negative_echo(shift: float) -> float:
        points = np.column_stack([ens.detuning0 + shift, ens.b1_scale])
        return -abs(np.sum(ens.weight * lookup(points)))

    coarse = np.linspace(-RESPONSE_OFFSET_SPAN, RESPONSE_OFFSET_SPAN, 41)
    k = int(np.argmin([negative_echo(s) for s in coarse]))
    lo, hi = coarse[max(k - 1, 0)], coarse[min(k + 1, coarse.size - 1)]
    found = optimize.minimize_scalar(negative_echo, bounds=(lo, hi), method="bounded",
                                     options={"xatol": 1e-6 * (coarse[1] - coarse[0])})
    return float(found.x)


def field_sweep(
    cfg: SpinSystemConfig,
    bias_current: float,
    pulse_style: str,
    field_grid: Sequence[float],
    dev: Optional[DeviceTuningParams] = None,
    geom: Optional[CpwGeometry] = None,
    theta: float = math.radians(MISALIGNMENT),
    power: Optional[float] = None,
    tau: float = HAHN_TAU,
    n_detuning: int = GH_NODES,
    grid: Tuple[int, int] = SPATIAL_GRID,
    mode: str = "grid",
    seed: int = 0,
    verbose: bool = False,
) -> ExperimentResult:
    """
    Balayage en champ détecté par écho de Hahn.

    Le résonateur décalé de δf(i) fixe la fréquence de pilotage; le champ
    B_i local ajoute bias_shift·i au désaccord de chaque paquet. Sous
    courant, l'impulsion rectangulaire est limitée à -32 dBm.

    L'axe de champ est recentré par response_offset: sans courant, le
    maximum tombe sur le centre de raie. La table de réponse couvre ±8 MHz;
    au-delà la contribution est prise nulle, la fenêtre d'acquisition de
    2 μs filtrant ces paquets.

    Returns:
        ExperimentResult (field_mt, echo_amp, echo_phase), métadonnées
        peak_field_mt et integrated_intensity
    """
    dev = dev or load_device("4um")
    geom = geom or geometry_for_device(dev)
    biased = bias_current != 0
    if pulse_style == "rect":
        power = RECT_REFERENCE_POWER if power is None else power
        if biased:
            power = min(power, RECT_BIASED_POWER)
    else:
        power = ADIABATIC_POWER if power is None else power
    check_power(power, dev, biased)

    seq = hahn_sequence(tau, pulse_style, power)
    ens = build_ensemble(cfg, geom, theta, n_detuning, grid, mode=mode, seed=seed)
    gamma = cfg.gamma_eff["P31"]
    drive_shift = 2 * math.pi * float(delta_f(bias_current, dev))
    static = ens.detuning0 + ens.bias_shift * bias_current - drive_shift

    detunings = np.linspace(-TABLE_DETUNING_SPAN, TABLE_DETUNING_SPAN, TABLE_DETUNING_POINTS)
    b_lo, b_hi = float(np.min(ens.b1_scale)), float(np.max(ens.b1_scale))
    b1_axis = np.linspace(0.99 * b_lo, 1.01 * b_hi, TABLE_B1_POINTS)
    table = echo_response_table(seq, detunings, b1_axis, cfg)
    lookup_re = interpolate.RegularGridInterpolator((detunings, b1_axis), table.real,
                                                    bounds_error=False, fill_value=0.0)
    lookup_im = interpolate.RegularGridInterpolator((detunings, b1_axis), table.imag,
                                                    bounds_error=False, fill_value=0.0)

    def lookup(points: np.ndarray) -> np.ndarray:
        return lookup_re(points) + 1j * lookup_im(points)

    offset = response_offset(lookup, ens)

    fields = np.asarray(field_grid, dtype=float)
    amplitudes, phases = [], []
    center = cfg.line_center_field["P31"]
    for b0 in tqdm(fields, desc="field sweep", disable=not verbose):
        points = np.column_stack([static + offset + 2 * math.pi * gamma * (b0 - center), ens.b1_scale])
        echo = np.sum(ens.weight * lookup(points))
        amplitudes.append(abs(echo))
        phases.append(float(np.angle(echo)))

    amplitudes = np.asarray(amplitudes)
    return ExperimentResult.from_columns(
        "field_mt", fields * 1e3,
        {"echo_amp": amplitudes, "echo_phase": phases},
        metadata={
            "style": pulse_style,
            "bias_current_ma": bias_current * 1e3,
            "power_dbm": power,
            "theta_deg": math.degrees(theta),
            "response_offset_khz": offset / (2 * math.pi) / 1e3,
            "peak_field_mt": peak_position(fields, amplitudes) * 1e3,
            "peak_amplitude": float(np.max(amplitudes)),
            "integrated_intensity": float(np.trapz(amplitudes, fields * 1e3)),
        },
    )


def peak_position(x: np.ndarray, y: np.ndarray) -> float:
    """Maximum affiné par une parabole sur trois points."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    k = int(np.argmax(y))
    if k == 0 or k == len(y) - 1:
        return float(x[k])
    y0, y1, y2 = y[k - 1], y[k], y[k + 1]
    denom = y0 - 2 * y1 + y2
    if denom == 0:
        return float(x[k])
    return float(x[k] + 0.5 * (y0 - y2) / denom * (x[k + 1] - x[k]))


def t2_decay(
    cfg: SpinSystemConfig,
    taus: Sequence[float],
    style: str = "rect",
    bias_current: float = 0.0,
    compensation: str = "symmetric_pair",
    dev: Optional[DeviceTuningParams] = None,
    geom: Optional[CpwGeometry] = None,
    theta: float = math.radians(MISALIGNMENT),
    n_detuning: int = 16,
    grid: Tuple[int, int] = (8, 4),
    noise: float = 0.0,
    seed: int = 0,
    verbose: bool = False,
) -> ExperimentResult:
    """
    Décroissance de l'écho de Hahn en fonction de 2τ (x en μs).

    Avec un courant, les lobes de compensation sont placés dans les fenêtres
    d'évolution libre de chaque τ.
    """
    dev = dev or load_device("4um")
    geom = geom or geometry_for_device(dev)
    ens = build_ensemble(cfg, geom, theta, n_detuning, grid)
    power = None
    if style == "rect" and bias_current != 0:
        power = RECT_BIASED_POWER

    two_tau, amplitudes, phases = [], [], []
    for k, tau in enumerate(tqdm(taus, desc="T2", disable=not verbose)):
        seq = hahn_sequence(tau, style, power)
        sched = None
        if bias_current != 0:
            sched = compensation_schedule(compensation, sequence_timing(seq), bias_current,
                                          lag=dev.lag_time_constant)
            sched.check_device(dev)
        echo = run_sequence(ens, seq, sched, cfg, dev=dev)
        amp = echo.amplitude
        if noise > 0:
            amp *= 1.0 + noise * stream(seed, "spinsim.t2", k).standard_normal()
        two_tau.append(2 * tau * 1e6)
        amplitudes.append(amp)
        phases.append(echo.phase)

    return ExperimentResult.from_columns(
        "two_tau_us", two_tau, {"echo_amp": amplitudes, "echo_phase": phases},
        metadata={"style": style, "bias_current_ma": bias_current * 1e3,
                  "compensation": compensation if bias_current else None, "t2_model_us": cfg.t2 * 1e6},
    )


def fit_t2(decay: ExperimentResult, y_label: str = "echo_amp") -> Tuple[float, float]:
    """
    Ajustement A·exp(-2τ/T2) par moindres carrés.

    Returns:
        (t2, erreur standard) en secondes

    Raises:
        FitDiverged: signal constant ou ajustement sans solution finie
    """
    x = np.asarray(decay.column(decay.x_label), dtype=float) * 1e-6
    y = np.asarray(decay.column(y_label), dtype=float)
    if x.size < 6:
        raise ValueError("au moins 6 points sont nécessaires")
    if np.ptp(y) <= 1e-9 * max(float(np.max(np.abs(y))), 1e-300) or np.any(y <= 0):
        raise FitDiverged("signal sans décroissance exploitable")

    slope, intercept = np.polyfit(x, np.log(y), 1)
    if slope >= 0:
        raise FitDiverged("pente de décroissance non négative")
    guess = (math.exp(intercept), -1.0 / slope)

    try:
        params, cov = optimize.curve_fit(lambda t, a, t2: a * np.exp(-t / t2), x, y, p0=guess, maxfev=10000)
    except (RuntimeError, optimize.OptimizeWarning) as exc:
        raise FitDiverged(str(exc)) from exc

    t2 = float(params[1])
    stderr = float(math.sqrt(cov[1, 1])) if np.isfinite(cov[1, 1]) else math.inf
    if not (math.isfinite(t2) and t2 > 0) or t2 > 1e3 * np.ptp(x):
        raise FitDiverged(f"T2 = {t2:.3g} s hors de la plage mesurée")
    return t2, stderr
