"""
Helpers de Logging - Fonctions simplifiées par type d'action
============================================================
Raccourcis autour de log_experiment pour les modules physiques et le
protocole. Utiliser ces fonctions plutôt que log_experiment directement.
"""

from typing import Any, Dict, List

from src.utils.logger import log_experiment, ActionType


def _status(success: bool) -> str:
    return "SUCCESS" if success else "FAILURE"


# ============================================================
# SIMULATIONS ET AJUSTEMENTS
# ============================================================

def log_simulation(
    component: str,
    device: str,
    parameters: Dict[str, Any],
    outcome: Dict[str, Any],
    success: bool = True,
    **extra_details
):
    """
    Log une simulation (balayage S21, trace de cavité, séquence de spins...).

    Args:
        component: Module simulé (ex: "biasdyn")
        device: Dispositif (ex: "4um")
        parameters: Paramètres d'entrée principaux
        outcome: Grandeurs résumant le résultat
        success: True si la simulation a abouti
        **extra_details: Détails supplémentaires optionnels

    Example:
        log_simulation(
            component="biasdyn",
            device="4um",
            parameters={"target_delta_f_mhz": -31.2},
            outcome={"tuning_time_ns": 271.4}
        )
    """
    log_experiment(
        component=component,
        device=device,
        action=ActionType.SIMULATION,
        details={"parameters": parameters, "outcome": outcome, **extra_details},
        status=_status(success)
    )


def log_fit(
    component: str,
    device: str,
    parameters: Dict[str, Any],
    outcome: Dict[str, Any],
    success: bool = True,
    **extra_details
):
    """
    Log un ajustement moindres carrés.

    Example:
        log_fit(
            component="kinet",
            device="4um",
            parameters={"n_points": 51, "f0_hz": 7636.6e6},
            outcome={"i2_star_ma": 62.5, "i4_star_ma": 35.7}
        )
    """
    log_experiment(
        component=component,
        device=device,
        action=ActionType.FIT,
        details={"parameters": parameters, "outcome": outcome, **extra_details},
        status=_status(success)
    )


def log_calibration(
    component: str,
    device: str,
    parameters: Dict[str, Any],
    outcome: Dict[str, Any],
    success: bool = True,
    **extra_details
):
    """Log la résolution d'une constante de calibration (longueur, retard, fraction)."""
    log_experiment(
        component=component,
        device=device,
        action=ActionType.CALIBRATION,
        details={"parameters": parameters, "outcome": outcome, **extra_details},
        status=_status(success)
    )


# ============================================================
# PROTOCOLE
# ============================================================

def log_validation(spec_path: str, device: str, violations: List[str], **extra_details):
    """
    Log la validation d'une spécification d'expérience.

    Example:
        log_validation("sandbox/specs/deer_retuned.json", "4um", ["t < t_min (6 μs)"])
    """
    log_experiment(
        component="protocol",
        device=device,
        action=ActionType.VALIDATION,
        details={"spec": spec_path, "violations": violations, **extra_details},
        status="SUCCESS" if not violations else "FAILURE"
    )


def log_io(path: str, device: str = "-", success: bool = True, **extra_details):
    """Log l'écriture d'un fichier de résultats."""
    log_experiment(
        component="protocol",
        device=device,
        action=ActionType.IO,
        details={"path": path, **extra_details},
        status=_status(success)
    )


def log_action(component: str, action: ActionType, status: str = "INFO", device: str = "-", **details):
    """
    Helper générique pour les actions sans schéma dédié (démarrage, arrêt).

    Example:
        log_action("cli", ActionType.STARTUP, argv=["deer", "--spec", "deer_retuned.json"])
    """
    log_experiment(
        component=component,
        device=device,
        action=action,
        details=details,
        status=status
    )
