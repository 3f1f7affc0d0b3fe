import json
import os
import uuid
from datetime import datetime
from enum import Enum

from src.config import get_log_file


class ActionType(str, Enum):
    """
    Énumération des types d'actions enregistrées dans le journal des runs.
    """
    SIMULATION = "SIMULATION"    # Propagation, balayage, trace temporelle
    FIT = "FIT"                  # Ajustement moindres carrés
    CALIBRATION = "CALIBRATION"  # Résolution d'une constante (longueur, retard, fraction)
    VALIDATION = "VALIDATION"    # Vérification d'une spécification d'expérience
    IO = "IO"                    # Écriture de résultats
    STARTUP = "STARTUP"          # Démarrage / arrêt du CLI


# Clés obligatoires dans 'details' selon l'action
REQUIRED_DETAILS = {
    ActionType.SIMULATION.value: ["parameters", "outcome"],
    ActionType.FIT.value: ["parameters", "outcome"],
    ActionType.CALIBRATION.value: ["parameters", "outcome"],
    ActionType.VALIDATION.value: ["violations"],
    ActionType.IO.value: ["path"],
    ActionType.STARTUP.value: [],
}


def log_experiment(component: str, device: str, action: ActionType, details: dict, status: str):
    """
    Enregistre une action du toolkit dans le journal JSON des runs.

    Args:
        component (str): Module à l'origine de l'action (ex: "kinet", "protocol").
        device (str): Dispositif concerné (ex: "4um"), "-" si sans objet.
        action (ActionType): Le type d'action effectué (utiliser l'Enum ActionType).
        details (dict): Détails de l'action; les clés requises dépendent de l'action.
        status (str): "SUCCESS", "FAILURE" ou "INFO".

    Raises:
        ValueError: Si l'action est invalide ou si des clés obligatoires manquent.
    """

    # --- 1. VALIDATION DU TYPE D'ACTION ---
    valid_actions = [a.value for a in ActionType]
    if isinstance(action, ActionType):
        action_str = action.value
    elif action in valid_actions:
        action_str = action
    else:
        raise ValueError(f"❌ Action invalide : '{action}'. Utilisez la classe ActionType (ex: ActionType.FIT).")

    # --- 2. VALIDATION DES DÉTAILS ---
    missing_keys = [key for key in REQUIRED_DETAILS[action_str] if key not in details]
    if missing_keys:
        raise ValueError(
            f"❌ Erreur de Logging ({component}) : "
            f"les champs {missing_keys} sont manquants dans 'details' pour l'action {action_str}."
        )

    # --- 3. PRÉPARATION DE L'ENTRÉE ---
    log_file = get_log_file()
    log_dir = os.path.dirname(log_file)
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)

    entry = {
        "id": str(uuid.uuid4()),
        "timestamp": datetime.now().isoformat(),
        "component": component,
        "device": device,
        "action": action_str,
        "details": details,
        "status": status,
    }

    # --- 4. LECTURE & ÉCRITURE ---
    data = []
    if os.path.exists(log_file):
        try:
            with open(log_file, 'r', encoding='utf-8') as f:
                content = f.read().strip()
                if content:
                    data = json.loads(content)
        except json.JSONDecodeError:
            print(f"⚠️ Attention : le journal {log_file} était corrompu. Une nouvelle liste a été créée.")
            data = []

    data.append(entry)

    with open(log_file, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=4, ensure_ascii=False, default=str)
