"""
Data Validator - Contrôle du journal des runs et des CSV de résultats
=====================================================================
Vérifie le schéma des entrées du journal (logs/experiment_data.json) et la
stabilité des CSV produits par protocol (en-têtes, nombre de lignes).
"""

import json
import os
from typing import Dict, List, Optional, Tuple

import pandas as pd

from src.config import get_log_file
from src.utils.logger import ActionType, REQUIRED_DETAILS

# ============================================================
# SCHÉMA DU JOURNAL
# ============================================================

REQUIRED_FIELDS = ["id", "timestamp", "component", "device", "action", "details", "status"]
VALID_ACTIONS = [a.value for a in ActionType]
VALID_STATUSES = ["SUCCESS", "FAILURE", "INFO"]

# En-têtes attendus par type d'expérience (fit_tuning: sans/avec données)
RESULT_COLUMNS = {
    "fit_tuning": (["current_ma", "delta_f_mhz"], ["current_ma", "delta_f_mhz", "delta_f_fit_mhz"]),
    "s21_sweep": (["freq_mhz", "s21_mag_db", "s21_re", "s21_im"],),
    "tune_time": (["time_ns", "f_res_mhz", "transmitted_amp"],),
    "field_sweep": (["field_mt", "echo_amp", "echo_phase"],),
    "t2_decay": (["two_tau_us", "echo_amp", "echo_phase"],),
    "deer": (["t_us", "echo_norm_on_res", "echo_norm_off_res"],),
    "fieldmap": (["y_um", "z_um", "bbias_x_uT_per_mA", "bbias_y_uT_per_mA", "b1_uT"],),
}


def load_logs(filepath: Optional[str] = None) -> List[Dict]:
    """
    Charge les entrées du journal.

    Args:
        filepath: Chemin du journal (défaut: SPINRES_LOG_FILE)

    Returns:
        Liste des entrées ([] si absent ou illisible)
    """
    filepath = filepath or get_log_file()
    if not os.path.exists(filepath):
        print(f"⚠️ Journal non trouvé : {filepath}")
        return []

    try:
        with open(filepath, 'r', encoding='utf-8') as f:
            content = f.read().strip()
            if not content:
                return []
            return json.loads(content)
    except json.JSONDecodeError as e:
        print(f"❌ Erreur JSON dans {filepath}: {e}")
        return []


def validate_entry(entry: Dict, index: int) -> Tuple[bool, List[str]]:
    """
    Valide une entrée du journal.

    Returns:
        Tuple (is_valid, list_of_errors)
    """
    errors = []

    for field in REQUIRED_FIELDS:
        if field not in entry:
            errors.append(f"Entrée #{index}: Champ '{field}' manquant")

    action = entry.get("action")
    if "action" in entry and action not in VALID_ACTIONS:
        errors.append(f"Entrée #{index}: Action invalide '{action}'")

    if "status" in entry and entry["status"] not in VALID_STATUSES:
        errors.append(f"Entrée #{index}: Status invalide '{entry.get('status')}'")

    if "details" in entry and action in VALID_ACTIONS:
        if isinstance(entry["details"], dict):
            for detail_field in REQUIRED_DETAILS[action]:
                if detail_field not in entry["details"]:
                    errors.append(f"Entrée #{index}: Champ 'details.{detail_field}' manquant")
        else:
            errors.append(f"Entrée #{index}: 'details' doit être un dictionnaire")

    return len(errors) == 0, errors


def validate_all_logs(filepath: Optional[str] = None) -> Dict:
    """
    Valide toutes les entrées du journal.

    Returns:
        Rapport de validation complet
    """
    logs = load_logs(filepath)

    report = {
        "total_entries": len(logs),
        "valid_entries": 0,
        "invalid_entries": 0,
        "errors": [],
        "warnings": [],
        "is_valid": True
    }

    if not logs:
        report["warnings"].append("Le journal est vide")
        report["is_valid"] = False
        return report

    for i, entry in enumerate(logs):
        is_valid, errors = validate_entry(entry, i)
        if is_valid:
            report["valid_entries"] += 1
        else:
            report["invalid_entries"] += 1
            report["errors"].extend(errors)
            report["is_valid"] = False

    return report


def get_logs_summary(filepath: Optional[str] = None) -> Dict:
    """
    Résumé statistique du journal avec Pandas (par composant, action, statut, dispositif).
    """
    logs = load_logs(filepath)

    if not logs:
        return {"error": "Aucun log trouvé"}

    df = pd.DataFrame(logs)
    summary = {"total_entries": len(df)}
    for column in ("component", "action", "status", "device"):
        summary[column] = df[column].value_counts().to_dict() if column in df.columns else {}

    if "timestamp" in df.columns:
        stamps = pd.to_datetime(df["timestamp"])
        summary["date_range"] = {"first": stamps.min().isoformat(), "last": stamps.max().isoformat()}

    return summary


# ============================================================
# CSV DE RÉSULTATS
# ============================================================

def validate_result_csv(path: str, kind: str, expected_rows: Optional[int] = None) -> List[str]:
    """
    Vérifie les en-têtes (et éventuellement le nombre de lignes) d'un CSV.

    Returns:
        Liste d'erreurs, vide si le fichier est conforme
    """
    if kind not in RESULT_COLUMNS:
        return [f"type inconnu: {kind}"]
    if not os.path.isfile(path):
        return [f"fichier introuvable: {path}"]

    df = pd.read_csv(path)
    errors = []
    if list(df.columns) not in [list(c) for c in RESULT_COLUMNS[kind]]:
        errors.append(f"en-têtes {list(df.columns)} inattendus pour {kind}")
    if expected_rows is not None and len(df) != expected_rows:
        errors.append(f"{len(df)} lignes au lieu de {expected_rows}")
    if df.isna().any().any():
        errors.append("valeurs manquantes")
    return errors


def print_validation_report(filepath: Optional[str] = None):
    """
    Affiche un rapport de validation du journal.
    """
    print("\n" + "="*60)
    print("📊 RAPPORT DE VALIDATION DU JOURNAL DES RUNS")
    print("="*60)

    print("\n🔍 1. VALIDATION DU FORMAT JSON")
    print("-"*40)
    validation = validate_all_logs(filepath)

    print(f"   Total entrées    : {validation['total_entries']}")
    print(f"   Entrées valides  : {validation['valid_entries']} ✅")
    print(f"   Entrées invalides: {validation['invalid_entries']} {'❌' if validation['invalid_entries'] > 0 else ''}")

    if validation['errors']:
        print("\n   ❌ Erreurs détectées:")
        for error in validation['errors'][:10]:
            print(f"      - {error}")
        if len(validation['errors']) > 10:
            print(f"      ... et {len(validation['errors']) - 10} autres erreurs")

    for warning in validation['warnings']:
        print(f"   ⚠️ {warning}")

    print("\n📈 2. STATISTIQUES")
    print("-"*40)
    summary = get_logs_summary(filepath)
    if "error" not in summary:
        for column in ("component", "action", "status"):
            print(f"\n   Par {column}:")
            for name, count in summary[column].items():
                print(f"      - {name}: {count}")

    print("\n" + "="*60)
    print("🎉 VERDICT: JOURNAL VALIDE" if validation['is_valid'] else "❌ VERDICT: JOURNAL INVALIDE")
    print("="*60 + "\n")


# ============================================================
# POINT D'ENTRÉE POUR TEST
# ============================================================

if __name__ == "__main__":
    print_validation_report()
