"""
Protocol - Orchestration des expériences
========================================
Une spécification (JSON ou YAML) décrit une expérience: son type, le
dispositif, les paramètres propres au type, la graine et le chemin de
sortie. Le graphe LangGraph enchaîne:

    VALIDATE → (violations?) → EXECUTE → (erreur?) → PERSIST → END

Une spécification = une expérience = un CSV + un sidecar JSON, et une
entrée dans le journal des runs.
"""

import math
import os
import time
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from langgraph.graph import StateGraph, END
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.config import (
    DEFAULT_SEED,
    NETWORKS_DIR,
    HAHN_TAU,
    GH_NODES,
    SPATIAL_GRID,
    MISALIGNMENT,
    T2_DEFAULT,
    TUNING_OVERSHOOT_RATIO,
    CURRENT_HEADROOM,
    DEER_TAU,
    DEER_OBSERVERS,
    DEER_PUMP_OFFSET,
    DEER_OFF_RESONANCE_SHIFT,
    AS_CONCENTRATION,
    TUNING_CALIBRATION_DELTA_F,
    TUNING_TIME_TARGET,
    DEER_TARGET_ECHO,
    DEER_TARGET_TIME,
    FIELD_CALIBRATION_CURRENT,
    get_device_path,
    get_output_dir,
    get_threads,
    get_toolkit_version,
)
from src.errors import (
    SpinresError,
    ParseError,
    SpecValidationError,
    OutputPathError,
    ExperimentError,
    TargetUnreachable,
    TimingViolation,
    DoesNotFit,
    FitDiverged,
    NoPeakFound,
    MultiplePeaks,
)
from src.experiment_state import (
    ExperimentState,
    create_initial_state,
    add_violation,
    mark_error,
    mark_run_complete,
)
from src.physics import biasdyn, deer, fieldmap, kinet, netmodel, spinsim
from src.results import CSV_FLOAT_FORMAT, ExperimentResult
from src.utils.file_tools import get_output_root, read_mapping, validate_output_path, write_csv, write_json
from src.utils.log_helpers import log_calibration, log_fit, log_simulation, log_validation
from src.utils.units import parse_quantity

EXPERIMENT_KINDS = ("fit_tuning", "s21_sweep", "tune_time", "field_sweep", "t2_decay", "deer")


# ============================================================
# SCHÉMA DES SPÉCIFICATIONS
# ============================================================

class ExperimentSpec(BaseModel):
    """Fichier de spécification d'une expérience (clés inconnues refusées)."""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["fit_tuning", "s21_sweep", "tune_time", "field_sweep", "t2_decay", "deer"]
    device_ref: str = "4um"
    parameters: Dict[str, Any] = Field(default_factory=dict)
    seed: int = DEFAULT_SEED
    output_path: str


@dataclass(frozen=True)
class Param:
    """Un paramètre propre à un type d'expérience."""
    type: str                       # quantity | int | bool | path | angle | choice
    default: Any = None
    required: bool = False
    choices: Tuple[str, ...] = ()


PARAMETERS: Dict[str, Dict[str, Param]] = {
    "fit_tuning": {
        "data": Param("path"),
        "f0": Param("quantity"),
        "i_max": Param("quantity"),
        "points": Param("int", 51),
    },
    "s21_sweep": {
        "network": Param("path"),
        "f_center": Param("quantity"),
        "span": Param("quantity", 40e6),
        "points": Param("int", 801),
    },
    "tune_time": {
        "target_delta_f": Param("quantity", -31.2e6),
        "current": Param("quantity"),
        "schedule": Param("path"),
        "lag": Param("quantity"),
        "calibrate_lag": Param("bool", False),
        "overshoot_ratio": Param("quantity", TUNING_OVERSHOOT_RATIO),
        "hold": Param("quantity", 2e-6),
        "duration": Param("quantity"),
    },
    "field_sweep": {
        "field_start": Param("quantity", required=True),
        "field_stop": Param("quantity", required=True),
        "points": Param("int", 81),
        "style": Param("choice", "adiabatic", choices=("rect", "adiabatic")),
        "bias_current": Param("quantity", 0.0),
        "power": Param("quantity"),
        "tau": Param("quantity", HAHN_TAU),
        "theta": Param("angle", math.radians(MISALIGNMENT)),
        "mode": Param("choice", "grid", choices=("grid", "monte_carlo")),
        "n_detuning": Param("int", GH_NODES),
        "grid_y": Param("int", SPATIAL_GRID[0]),
        "grid_z": Param("int", SPATIAL_GRID[1]),
    },
    "t2_decay": {
        "tau_start": Param("quantity", required=True),
        "tau_stop": Param("quantity", required=True),
        "points": Param("int", 12),
        "style": Param("choice", "rect", choices=("rect", "adiabatic")),
        "bias_current": Param("quantity", 0.0),
        "compensation": Param("choice", "symmetric_pair", choices=("symmetric_pair", "bipolar", "single")),
        "t2": Param("quantity", T2_DEFAULT),
        "noise": Param("quantity", 0.0),
        "theta": Param("angle", math.radians(MISALIGNMENT)),
    },
    "deer": {
        "t_start": Param("quantity", required=True),
        "t_stop": Param("quantity", required=True),
        "points": Param("int", 15),
        "tau": Param("quantity", DEER_TAU),
        "mode": Param("choice", "analytic", choices=("analytic", "full")),
        "retuned": Param("bool", True),
        "n_observers": Param("int", DEER_OBSERVERS),
        "flip_fraction": Param("quantity"),
        "as_concentration": Param("quantity", AS_CONCENTRATION),
        "geometry": Param("choice", "sphere", choices=deer.GEOMETRIES),
    },
}

Violation = Tuple[str, str]


# ============================================================
# CHARGEMENT ET OVERRIDES
# ============================================================

def load_spec(path: str) -> Dict[str, Any]:
    """
    Lit une spécification brute (JSON ou YAML).

    Raises:
        FileNotFoundError: Fichier absent
        ParseError: Syntaxe invalide, avec ligne et colonne
    """
    return read_mapping(path)


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    Applique des overrides "clé.pointée=valeur" sur une copie de la spécification.

    La valeur est lue comme un scalaire YAML ("3", "true", "4.9mA").

    Example:
        apply_overrides(spec, ["parameters.bias_current=4.9mA", "seed=7"])

    Raises:
        ParseError: Override mal formé
    """
    data = _deep_copy(raw)
    for item in overrides:
        key, sep, text = item.partition("=")
        key = key.strip()
        if not sep or not key or any(not part for part in key.split(".")):
            raise ParseError(f"override invalide '{item}' (attendu clé.pointée=valeur)")
        try:
            value = yaml.safe_load(text) if text.strip() else ""
        except yaml.YAMLError as exc:
            raise ParseError(f"valeur invalide pour {key}: {exc}") from exc

        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            if not isinstance(child, dict):
                raise ParseError(f"override invalide '{item}': '{part}' n'est pas un objet")
            node = child
        node[parts[-1]] = value
    return data


def _deep_copy(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _deep_copy(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_deep_copy(v) for v in value]
    return value


# ============================================================
# VALIDATION
# ============================================================

def _resolve_path(value: str, base_dir: str) -> str:
    if os.path.isabs(value) or os.path.exists(value):
        return value
    return os.path.join(base_dir, value)


def _coerce(name: str, param: Param, value: Any, base_dir: str) -> Any:
    """Convertit une valeur brute; lève ValueError avec un message lisible."""
    if param.type == "quantity":
        if isinstance(value, bool):
            raise ValueError("booléen au lieu d'une quantité")
        return parse_quantity(value)
    if param.type == "int":
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ValueError("entier attendu")
        try:
            return int(value)
        except ValueError:
            raise ValueError(f"entier attendu, reçu '{value}'")
    if param.type == "bool":
        if not isinstance(value, bool):
            raise ValueError("booléen attendu")
        return value
    if param.type == "path":
        if not isinstance(value, str):
            raise ValueError("chemin attendu")
        path = _resolve_path(value, base_dir)
        if not os.path.isfile(path):
            raise ValueError(f"fichier introuvable ({value})")
        return path
    if param.type == "angle":
        # nombre nu = degrés
        if isinstance(value, str) and value.strip().endswith(("deg", "rad")):
            return parse_quantity(value)
        return math.radians(parse_quantity(value))
    if param.type == "choice":
        if value not in param.choices:
            raise ValueError(f"'{value}' hors de {list(param.choices)}")
        return value
    raise ValueError(f"type de paramètre inconnu: {param.type}")


def resolve_parameters(spec: ExperimentSpec, base_dir: str = ".") -> Tuple[Dict[str, Any], List[Violation]]:
    """
    Paramètres typés (SI) du type d'expérience, valeurs par défaut comprises.

    Returns:
        (paramètres, violations)
    """
    schema = PARAMETERS[spec.kind]
    params: Dict[str, Any] = {}
    violations: List[Violation] = []

    for key in sorted(set(spec.parameters) - set(schema)):
        violations.append((f"parameters.{key}", f"clé inconnue pour {spec.kind}"))

    for name, param in schema.items():
        field_name = f"parameters.{name}"
        if name not in spec.parameters or spec.parameters[name] is None:
            if param.required:
                violations.append((field_name, "paramètre obligatoire manquant"))
            params[name] = param.default
            continue
        try:
            params[name] = _coerce(name, param, spec.parameters[name], base_dir)
        except ValueError as exc:
            violations.append((field_name, str(exc)))
            params[name] = param.default
    return params, violations


def _load_spec_device(spec: ExperimentSpec, base_dir: str) -> kinet.DeviceTuningParams:
    if os.path.isfile(get_device_path(spec.device_ref)):
        return kinet.load_device(spec.device_ref)
    return kinet.load_device(_resolve_path(spec.device_ref, base_dir))


def _check_bias(name: str, current: float, dev: kinet.DeviceTuningParams) -> List[Violation]:
    if abs(current) >= dev.i_critical:
        return [(f"parameters.{name}",
                 f"{abs(current) * 1e3:g} mA dépasse i_critical {dev.i_critical * 1e3:.3f} mA")]
    return []


def _check_fit_tuning(params: Dict[str, Any], dev: kinet.DeviceTuningParams) -> List[Violation]:
    violations = []
    if params["i_max"] is not None:
        violations += _check_bias("i_max", params["i_max"], dev)
    if params["points"] < 2:
        violations.append(("parameters.points", "au moins 2 points"))
    if params["f0"] is not None and not params["f0"] > 0:
        violations.append(("parameters.f0", "f0 doit être > 0"))
    return violations


def _check_s21_sweep(params: Dict[str, Any], dev: kinet.DeviceTuningParams) -> List[Violation]:
    violations = []
    if not params["span"] > 0:
        violations.append(("parameters.span", "span doit être > 0"))
    if params["points"] < 3:
        violations.append(("parameters.points", "au moins 3 points"))
    return violations


def _check_tune_time(params: Dict[str, Any], dev: kinet.DeviceTuningParams) -> List[Violation]:
    violations = []
    target = params["target_delta_f"]
    if not target < 0:
        violations.append(("parameters.target_delta_f", "le décalage visé doit être négatif"))
    elif abs(target) > kinet.max_shift(dev):
        violations.append(("parameters.target_delta_f",
                           f"{target / 1e6:g} MHz dépasse le décalage maximal {kinet.max_shift(dev) / 1e6:.2f} MHz"))
    if params["current"] is not None:
        violations += _check_bias("current", params["current"], dev)
    if params["schedule"] is not None:
        try:
            sched = biasdyn.load_schedule(params["schedule"])
            violations += _check_bias("schedule", sched.peak_current, dev)
        except (ParseError, ValueError) as exc:
            violations.append(("parameters.schedule", str(exc)))
    if params["lag"] is not None and not params["lag"] > 0:
        violations.append(("parameters.lag", "lag doit être > 0"))
    if not params["hold"] > 0:
        violations.append(("parameters.hold", "hold doit être > 0"))
    return violations


def _check_field_sweep(params: Dict[str, Any], dev: kinet.DeviceTuningParams) -> List[Violation]:
    violations = _check_bias("bias_current", params["bias_current"], dev)
    if params["field_start"] is not None and params["field_stop"] is not None:
        if not params["field_stop"] > params["field_start"]:
            violations.append(("parameters.field_stop", "field_stop doit être > field_start"))
    if params["points"] < 3:
        violations.append(("parameters.points", "au moins 3 points"))
    try:
        spinsim.hahn_sequence(params["tau"], params["style"])
    except TimingViolation as exc:
        violations.append(("parameters.tau", str(exc)))
    if not abs(params["theta"]) < 0.2:
        violations.append(("parameters.theta", "|theta| doit rester < 0.2 rad"))
    return violations


def _check_t2_decay(params: Dict[str, Any], dev: kinet.DeviceTuningParams) -> List[Violation]:
    violations = _check_bias("bias_current", params["bias_current"], dev)
    if params["points"] < 6:
        violations.append(("parameters.points", "au moins 6 points pour l'ajustement de T2"))
    tau_start, tau_stop = params["tau_start"], params["tau_stop"]
    if tau_start is None or tau_stop is None:
        return violations
    if not tau_stop > tau_start:
        violations.append(("parameters.tau_stop", "tau_stop doit être > tau_start"))
    try:
        seq = spinsim.hahn_sequence(tau_start, params["style"])
        if params["bias_current"] != 0:
            fieldmap.compensation_schedule(params["compensation"], spinsim.sequence_timing(seq),
                                           params["bias_current"], lag=dev.lag_time_constant)
    except TimingViolation as exc:
        violations.append(("parameters.tau_start", str(exc)))
    except DoesNotFit as exc:
        violations.append(("parameters.tau_start", f"compensation: {exc}"))
    return violations


def _check_deer(params: Dict[str, Any], dev: kinet.DeviceTuningParams) -> List[Violation]:
    violations = []
    try:
        cfg = deer.DeerConfig(tau=params["tau"], as_concentration=params["as_concentration"],
                              flip_fraction=params["flip_fraction"])
    except ValueError as exc:
        return [("parameters", str(exc))]

    t_start, t_stop = params["t_start"], params["t_stop"]
    if t_start is not None and t_start < cfg.t_min:
        violations.append(("parameters.t_start", f"t < t_min ({cfg.t_min * 1e6:g} μs)"))
    if t_stop is not None and t_stop > cfg.tau - cfg.pump_duration:
        violations.append(("parameters.t_stop",
                           f"t > tau - durée de pompe ({(cfg.tau - cfg.pump_duration) * 1e6:g} μs)"))
    if t_start is not None and t_stop is not None and params["points"] > 1 and not t_stop > t_start:
        violations.append(("parameters.t_stop", "t_stop doit être > t_start"))
    if params["points"] < 1:
        violations.append(("parameters.points", "au moins 1 point"))
    if params["n_observers"] < 1:
        violations.append(("parameters.n_observers", "au moins 1 observateur"))

    if params["mode"] == "full":
        for carrier in (DEER_PUMP_OFFSET, DEER_PUMP_OFFSET + DEER_OFF_RESONANCE_SHIFT):
            if abs(carrier) > kinet.max_shift(dev):
                violations.append(("device_ref", f"réaccord de {carrier / 1e6:g} MHz hors de portée"))
        if t_stop is not None and not violations:
            try:
                deer.retune_window(t_stop, cfg, dev.lag_time_constant)
            except TimingViolation as exc:
                violations.append(("parameters.t_stop", f"attente {cfg.settle_time * 1e6:g} μs: {exc}"))
    return violations


CHECKS: Dict[str, Callable[[Dict[str, Any], kinet.DeviceTuningParams], List[Violation]]] = {
    "fit_tuning": _check_fit_tuning,
    "s21_sweep": _check_s21_sweep,
    "tune_time": _check_tune_time,
    "field_sweep": _check_field_sweep,
    "t2_decay": _check_t2_decay,
    "deer": _check_deer,
}


def collect_violations(spec: Union[ExperimentSpec, Dict[str, Any]], base_dir: str = ".",
                       output_dir: Optional[str] = None) -> List[Violation]:
    """Violations (champ, contrainte) d'une spécification, brute ou validée."""
    if not isinstance(spec, ExperimentSpec):
        try:
            spec = ExperimentSpec.model_validate(spec)
        except ValidationError as exc:
            return [(".".join(str(p) for p in err["loc"]) or "spec", err["msg"]) for err in exc.errors()]

    violations: List[Violation] = []
    dev = None
    try:
        dev = _load_spec_device(spec, base_dir)
    except FileNotFoundError:
        violations.append(("device_ref", f"fichier introuvable ({spec.device_ref})"))
    except (ParseError, ValueError) as exc:
        violations.append(("device_ref", str(exc)))

    params, param_violations = resolve_parameters(spec, base_dir)
    violations += param_violations
    if dev is not None and not param_violations:
        violations += CHECKS[spec.kind](params, dev)

    if output_dir is not None:
        try:
            validate_output_path(spec.output_path, get_output_root(output_dir))
        except OutputPathError:
            violations.append(("output_path", f"hors du dossier de sortie {output_dir}"))
    return violations


def validate(spec: Union[ExperimentSpec, Dict[str, Any]], base_dir: str = ".",
             output_dir: Optional[str] = None) -> List[str]:
    """
    Liste des violations "champ: contrainte"; vide si la spécification est exécutable.

    Example:
        validate({"kind": "deer", "parameters": {"t_start": "4us", ...}, ...})
        -> ["parameters.t_start: t < t_min (6 μs)"]
    """
    return [f"{name}: {message}" for name, message in collect_violations(spec, base_dir, output_dir)]


# ============================================================
# EXÉCUTION PAR TYPE D'EXPÉRIENCE
# ============================================================

def _run_fit_tuning(params: Dict[str, Any], dev: kinet.DeviceTuningParams,
                    spec: ExperimentSpec, verbose: bool) -> ExperimentResult:
    if params["data"] is None:
        i_max = params["i_max"] if params["i_max"] is not None else CURRENT_HEADROOM * dev.i_critical
        frame = kinet.tuning_curve(dev, np.linspace(0.0, i_max, params["points"]))
        return ExperimentResult.from_frame(frame, metadata={
            "endpoint_mhz": float(frame["delta_f_mhz"].iloc[-1]),
            "max_shift_mhz": -kinet.max_shift(dev) / 1e6,
        })

    data = kinet.TuningDataset.from_csv(params["data"])
    f0 = params["f0"] if params["f0"] is not None else dev.f0
    fit = kinet.fit_tuning_params(data, f0)
    fitted = replace(dev, f0=f0, i2_star=fit.i2_star, i4_star=fit.i4_star)
    return ExperimentResult.from_columns(
        "current_ma", data.currents * 1e3,
        {"delta_f_mhz": data.shifts / 1e6,
         "delta_f_fit_mhz": np.asarray(kinet.delta_f(data.currents, fitted)) / 1e6},
        metadata={"f0_hz": f0, "fit": fit.to_dict()},
    )


def _default_network(dev: kinet.DeviceTuningParams) -> netmodel.NetworkSpec:
    shipped = os.path.join(NETWORKS_DIR, f"{dev.name}.json")
    if os.path.isfile(shipped):
        return netmodel.load_network(shipped)
    net, summary = netmodel.calibrate_cavity(netmodel.build_pbg_network(dev.f0), dev.f0, dev.q_loaded)
    log_calibration("netmodel", dev.name, {"f0_hz": dev.f0, "q_loaded": dev.q_loaded},
                    {"internal_q": net.internal_q, "f_res_hz": summary.f_res, "coupling": summary.coupling})
    return net


def _run_s21_sweep(params: Dict[str, Any], dev: kinet.DeviceTuningParams,
                   spec: ExperimentSpec, verbose: bool) -> ExperimentResult:
    net = netmodel.load_network(params["network"]) if params["network"] else _default_network(dev)
    center = params["f_center"] if params["f_center"] is not None else dev.f0
    band = (center - params["span"] / 2, center + params["span"] / 2)
    frame = netmodel.s21_sweep(net, np.linspace(band[0], band[1], params["points"]))

    metadata: Dict[str, Any] = {"resonance": None}
    try:
        summary = netmodel.find_resonance(net, band, net.internal_q, dev.q_loaded)
        metadata["resonance"] = {"f_res_mhz": summary.f_res / 1e6, "q_loaded": summary.q_loaded,
                                 "coupling": summary.coupling, "fwhm_khz": summary.fwhm / 1e3}
    except (NoPeakFound, MultiplePeaks) as exc:
        metadata["resonance_error"] = str(exc)

    return ExperimentResult.from_columns(
        "freq_mhz", frame["freq_hz"] / 1e6,
        {"s21_mag_db": frame["s21_mag_db"], "s21_re": frame["s21_re"], "s21_im": frame["s21_im"]},
        metadata=metadata,
    )


def _run_tune_time(params: Dict[str, Any], dev: kinet.DeviceTuningParams,
                   spec: ExperimentSpec, verbose: bool) -> ExperimentResult:
    target = params["target_delta_f"]
    lag = params["lag"] if params["lag"] is not None else dev.lag_time_constant
    if params["calibrate_lag"]:
        lag = biasdyn.calibrate_lag(dev)
        log_calibration("biasdyn", dev.name,
                        {"target_delta_f_mhz": TUNING_CALIBRATION_DELTA_F / 1e6,
                         "tuning_time_ns": TUNING_TIME_TARGET * 1e9},
                        {"lag_ns": lag * 1e9})
    run_dev = replace(dev, lag_time_constant=lag)

    if params["schedule"] is not None:
        sched = biasdyn.load_schedule(params["schedule"])
    elif params["current"] is not None:
        sched = biasdyn.BiasSchedule(((0.0, params["hold"], params["current"]),), lag)
    else:
        sched = biasdyn.tuning_step(run_dev, target, overshoot_ratio=params["overshoot_ratio"],
                                    hold=params["hold"])

    kappa = 2 * math.pi * dev.f0 / dev.q_loaded
    duration = params["duration"]
    if duration is None:
        duration = sched.elements[0][0] + 10 * sched.lag_time_constant + 40 / kappa
    trace = biasdyn.cavity_trace(dev.f0 + target, sched, run_dev, duration)

    metadata: Dict[str, Any] = {"lag_ns": sched.lag_time_constant * 1e9, "target_delta_f_mhz": target / 1e6,
                                "schedule": sched.to_dict(), "tuning_time_ns": None}
    try:
        metadata["tuning_time_ns"] = biasdyn.tuning_time(sched, run_dev, target, duration) * 1e9
    except TargetUnreachable as exc:
        metadata["tuning_time_error"] = str(exc)
    return ExperimentResult.from_frame(trace.to_frame(run_dev), metadata=metadata)


def _run_field_sweep(params: Dict[str, Any], dev: kinet.DeviceTuningParams,
                     spec: ExperimentSpec, verbose: bool) -> ExperimentResult:
    fields = np.linspace(params["field_start"], params["field_stop"], params["points"])
    spin_cfg = spinsim.default_spin_config()
    log_calibration("spinsim", "4um", {"current_ma": FIELD_CALIBRATION_CURRENT * 1e3},
                    {"gamma_eff_ghz_per_t": spin_cfg.gamma_eff["P31"] / 1e9})
    return spinsim.field_sweep(
        spin_cfg, params["bias_current"], params["style"], fields,
        dev=dev, theta=params["theta"], power=params["power"], tau=params["tau"],
        n_detuning=params["n_detuning"], grid=(params["grid_y"], params["grid_z"]),
        mode=params["mode"], seed=spec.seed, verbose=verbose,
    )


def _run_t2_decay(params: Dict[str, Any], dev: kinet.DeviceTuningParams,
                  spec: ExperimentSpec, verbose: bool) -> ExperimentResult:
    taus = np.linspace(params["tau_start"], params["tau_stop"], params["points"])
    result = spinsim.t2_decay(
        spinsim.default_spin_config(t2=params["t2"]), taus, params["style"], params["bias_current"],
        params["compensation"], dev=dev, theta=params["theta"], noise=params["noise"],
        seed=spec.seed, verbose=verbose,
    )
    try:
        t2, stderr = spinsim.fit_t2(result)
        result.metadata.update({"t2_fit_us": t2 * 1e6, "t2_stderr_us": stderr * 1e6})
    except FitDiverged as exc:
        result.metadata.update({"t2_fit_us": None, "t2_fit_error": str(exc)})
    return result


def _run_deer(params: Dict[str, Any], dev: kinet.DeviceTuningParams,
              spec: ExperimentSpec, verbose: bool) -> ExperimentResult:
    cfg = deer.DeerConfig(
        tau=params["tau"], as_concentration=params["as_concentration"],
        flip_fraction=params["flip_fraction"], seed=spec.seed,
        n_observers=params["n_observers"], geometry=params["geometry"],
    )
    if params["flip_fraction"] is None:
        log_calibration("deer", dev.name,
                        {"target_echo": DEER_TARGET_ECHO, "t_us": DEER_TARGET_TIME * 1e6,
                         "as_concentration": cfg.as_concentration},
                        {"flip_fraction": cfg.fraction})
    t_grid = np.linspace(params["t_start"], params["t_stop"], params["points"])
    return deer.deer_curve(cfg, t_grid, params["mode"], dev=dev, retuned=params["retuned"], verbose=verbose)


RUNNERS: Dict[str, Callable[..., ExperimentResult]] = {
    "fit_tuning": _run_fit_tuning,
    "s21_sweep": _run_s21_sweep,
    "tune_time": _run_tune_time,
    "field_sweep": _run_field_sweep,
    "t2_decay": _run_t2_decay,
    "deer": _run_deer,
}


# ============================================================
# ÉCRITURE DES RÉSULTATS
# ============================================================

def _clean(value: Any) -> Any:
    """Métadonnées sérialisables: flottants non finis -> None, numpy -> Python."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_result(result: ExperimentResult, output_path: str, output_dir: str) -> Dict[str, str]:
    """
    Écrit <output_path>.csv et le sidecar <output_path>.json sous output_dir.

    Raises:
        OutputPathError: Chemin hors du dossier de sortie
    """
    target = validate_output_path(output_path, get_output_root(output_dir))
    csv_path = write_csv(result.to_frame(), target.with_name(target.name + ".csv"), CSV_FLOAT_FORMAT)
    sidecar = {"columns": list(result.columns), "rows": len(result.rows), "metadata": _clean(result.metadata)}
    json_path = write_json(sidecar, target.with_name(target.name + ".json"))
    return {"csv": csv_path, "json": json_path}


# ============================================================
# NŒUDS DU GRAPHE
# ============================================================

def _base_dir(state: ExperimentState) -> str:
    return os.path.dirname(os.path.abspath(state["spec_path"])) if state["spec_path"] != "-" else "."


def validate_node(state: ExperimentState) -> ExperimentState:
    """
    Nœud VALIDATE: schéma, dispositif, paramètres et contraintes temporelles.
    """
    print("\n" + "="*60)
    print("🔍 VALIDATION - Contrôle de la spécification")
    print("="*60)

    try:
        spec = state["spec"]
        state["device"] = spec.get("device_ref", "4um") if isinstance(spec, dict) else None
        for field_name, message in collect_violations(spec, _base_dir(state), state["output_dir"]):
            add_violation(state, field_name, message)
        state["validated"] = True

        if state["violations"]:
            print(f"❌ {len(state['violations'])} violation(s):")
            for violation in state["violations"]:
                print(f"   - {violation}")
            log_validation(state["spec_path"], state["device"] or "-", state["violations"])
        else:
            print(f"✅ Spécification valide ({spec['kind']}, dispositif {state['device']})")

    except Exception as e:
        print(f"❌ Erreur de validation: {e}")
        mark_error(state, e)

    return state


def execute_node(state: ExperimentState) -> ExperimentState:
    """
    Nœud EXECUTE: appelle le module physique du type d'expérience.
    """
    spec = ExperimentSpec.model_validate(state["spec"])
    print("\n" + "="*60)
    print(f"🧪 EXÉCUTION - {spec.kind}")
    print("="*60)

    try:
        base_dir = _base_dir(state)
        dev = _load_spec_device(spec, base_dir)
        params, _ = resolve_parameters(spec, base_dir)

        start = time.perf_counter()
        result = RUNNERS[spec.kind](params, dev, spec, state["verbose"])
        state["wall_time"] = time.perf_counter() - start

        result.metadata.update({
            "kind": spec.kind,
            "device": dev.name,
            "seed": spec.seed,
            "toolkit_version": get_toolkit_version(),
            "wall_time_s": state["wall_time"],
            "threads": state["threads"],
            "spec": state["spec_path"],
            "parameters": dict(spec.parameters),
        })
        state["result"] = result
        print(f"✅ {len(result.rows)} lignes en {state['wall_time']:.2f} s")

    except (SpinresError, ValueError) as e:
        error = ExperimentError(spec.kind, state["spec_path"], e)
        print(f"❌ {error}")
        mark_error(state, error)
        log_simulation(spec.kind, state["device"] or "-", dict(spec.parameters),
                       {"error": str(e), "error_type": type(e).__name__}, success=False)

    return state


def persist_node(state: ExperimentState) -> ExperimentState:
    """
    Nœud PERSIST: CSV + sidecar JSON, puis une entrée de journal pour le run.
    """
    print("\n" + "="*60)
    print("💾 PERSISTANCE - Écriture des résultats")
    print("="*60)

    try:
        spec = ExperimentSpec.model_validate(state["spec"])
        result = state["result"]
        paths = write_result(result, spec.output_path, state["output_dir"])
        print(f"✅ CSV     : {paths['csv']}")
        print(f"✅ Sidecar : {paths['json']}")

        outcome = {k: v for k, v in _clean(result.metadata).items() if k not in ("parameters", "spec")}
        outcome["rows"] = len(result.rows)
        outcome["csv"] = paths["csv"]
        logger = log_fit if spec.kind == "fit_tuning" else log_simulation
        logger(spec.kind, result.metadata.get("device", "-"), dict(spec.parameters), outcome)
        mark_run_complete(state, paths)

    except (OutputPathError, OSError) as e:
        print(f"❌ Écriture impossible: {e}")
        mark_error(state, e)

    return state


# ============================================================
# ROUTAGE
# ============================================================

def should_execute(state: ExperimentState) -> str:
    """Après VALIDATE: exécuter seulement sans violation ni erreur."""
    if state["error_occurred"] or state["violations"]:
        return "end"
    return "execute"


def should_persist(state: ExperimentState) -> str:
    """Après EXECUTE: écrire seulement si un résultat existe."""
    if state["error_occurred"] or state["result"] is None:
        return "end"
    return "persist"


# ============================================================
# CONSTRUCTION DU GRAPHE
# ============================================================

def build_experiment_graph() -> StateGraph:
    """
    Construit le graphe LangGraph d'une expérience.

    FLOW:
    START → VALIDATE → (violations?) → EXECUTE → (erreur?) → PERSIST → END
    """
    workflow = StateGraph(ExperimentState)

    workflow.add_node("validate", validate_node)
    workflow.add_node("execute", execute_node)
    workflow.add_node("persist", persist_node)

    workflow.set_entry_point("validate")

    workflow.add_conditional_edges(
        "validate",
        should_execute,
        {
            "execute": "execute",
            "end": END
        }
    )
    workflow.add_conditional_edges(
        "execute",
        should_persist,
        {
            "persist": "persist",
            "end": END
        }
    )
    workflow.add_edge("persist", END)

    return workflow.compile()


# ============================================================
# POINTS D'ENTRÉE
# ============================================================

def run_state(spec: Dict[str, Any], spec_path: str = "-", output_dir: Optional[str] = None,
              verbose: bool = False) -> ExperimentState:
    """Exécute le graphe et retourne l'état final (sans lever)."""
    initial_state = create_initial_state(spec_path, spec, output_dir or get_output_dir(),
                                         threads=get_threads(), verbose=verbose)
    graph = build_experiment_graph()
    return graph.invoke(initial_state)


def run(spec: Union[ExperimentSpec, Dict[str, Any]], spec_path: str = "-",
        output_dir: Optional[str] = None, verbose: bool = False) -> ExperimentResult:
    """
    Valide, exécute et écrit une expérience.

    Returns:
        ExperimentResult (métadonnées complètes)

    Raises:
        SpecValidationError: Spécification non exécutable
        ExperimentError: Erreur d'un module physique, avec le contexte
        OutputPathError: Écriture hors du dossier de sortie
    """
    raw = spec.model_dump() if isinstance(spec, ExperimentSpec) else spec
    final_state = run_state(raw, spec_path, output_dir, verbose)
    if final_state["violations"]:
        raise SpecValidationError(final_state["violations"])
    if final_state["error_occurred"]:
        raise final_state["error"]
    return final_state["result"]


def run_experiment(spec_path: str, overrides: Sequence[str] = (), output_dir: Optional[str] = None,
                   seed: Optional[int] = None, verbose: bool = False,
                   raw: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """
    Lance une expérience depuis un fichier de spécification.

    Args:
        spec_path: Fichier JSON ou YAML
        overrides: Liste "clé.pointée=valeur" (--set)
        output_dir: Dossier des résultats (--out)
        seed: Graine imposée (--seed), prioritaire sur la spécification
        verbose: Barres de progression
        raw: Spécification déjà chargée (sinon lue depuis spec_path)

    Returns:
        dict: Résumé du run (succès, violations, fichiers, erreur)

    Raises:
        ParseError: Fichier ou override illisible
    """
    raw = apply_overrides(load_spec(spec_path) if raw is None else raw, overrides)
    if seed is not None:
        raw["seed"] = seed

    print("="*70)
    print("🧲 SPINRES - Expérience")
    print("="*70)
    print(f"📁 Spécification: {spec_path}")
    print(f"📂 Sorties: {output_dir or get_output_dir()}")
    if overrides:
        print(f"🔧 Overrides: {', '.join(overrides)}")

    final_state = run_state(raw, spec_path, output_dir, verbose)

    print("\n" + "="*70)
    if final_state["run_complete"]:
        print("✅ EXPÉRIENCE TERMINÉE")
    elif final_state["violations"]:
        print("❌ SPÉCIFICATION INVALIDE")
    else:
        print("❌ EXPÉRIENCE ÉCHOUÉE")
        print(f"   Erreur: {final_state['error_message']}")
    print("="*70)
    print(f"📊 Statistiques:")
    print(f"   - Violations: {len(final_state['violations'])}")
    print(f"   - Durée de calcul: {final_state['wall_time']:.2f} s")
    for kind, path in final_state["paths"].items():
        print(f"   - {kind.upper()}: {path}")
    print("="*70)

    return {
        "success": final_state["run_complete"],
        "violations": list(final_state["violations"]),
        "paths": dict(final_state["paths"]),
        "result": final_state["result"],
        "wall_time": final_state["wall_time"],
        "error": final_state["error"],
        "error_message": final_state["error_message"],
    }
