"""
File Tools - Lecture des spécifications et écriture sécurisée des résultats
===========================================================================
Les fichiers de résultats restent sous le dossier de sortie (--out); les
spécifications sont lues en JSON ou YAML avec la position des erreurs.
"""

import json
import os
from pathlib import Path
from typing import Any, Dict

import pandas as pd
import yaml

from src.errors import OutputPathError, ParseError


def get_output_root(output_dir: str) -> Path:
    """
    Crée si besoin et retourne le dossier racine des résultats.

    Args:
        output_dir: Dossier passé via --out ou SPINRES_OUTPUT_DIR

    Returns:
        Path: Chemin absolu du dossier
    """
    root = Path(output_dir).resolve()
    root.mkdir(parents=True, exist_ok=True)
    return root


def validate_output_path(output_path: str, output_root: Path) -> Path:
    """
    Valide qu'un chemin de résultat reste dans le dossier de sortie.

    Args:
        output_path: Chemin relatif (sans extension ou en .csv)
        output_root: Racine des résultats

    Returns:
        Path: Chemin absolu validé, sans extension

    Raises:
        OutputPathError: Si le chemin sort du dossier de sortie
    """
    stem = output_path[:-4] if output_path.endswith(".csv") else output_path
    abs_path = (output_root / stem).resolve()

    try:
        abs_path.relative_to(output_root)
    except ValueError:
        raise OutputPathError(
            f"❌ Chemin de sortie hors du dossier de résultats!\n"
            f"   Fichier: {abs_path}\n"
            f"   Dossier: {output_root}"
        )
    if abs_path == output_root:
        raise OutputPathError("❌ output_path vide")

    return abs_path


def read_mapping(path: str) -> Dict[str, Any]:
    """
    Lit un fichier JSON (.json) ou YAML (.yaml/.yml) contenant un objet.

    Raises:
        FileNotFoundError: Si le fichier n'existe pas
        ParseError: Syntaxe invalide (avec ligne/colonne) ou racine non-objet
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Fichier introuvable: {path}")

    with open(path, "r", encoding="utf-8") as f:
        text = f.read()

    if path.endswith((".yaml", ".yml")):
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            problem = getattr(exc, "problem", None) or str(exc)
            if mark is not None:
                raise ParseError(problem, path, mark.line + 1, mark.column + 1) from exc
            raise ParseError(problem, path) from exc
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, path, exc.lineno, exc.colno) from exc

    if not isinstance(data, dict):
        raise ParseError("la racine doit être un objet", path, 1, 1)
    return data


def write_csv(frame: pd.DataFrame, path: Path, float_format: str) -> str:
    """Écrit un CSV déterministe (fins de ligne \\n, format flottant fixe)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=float_format, lineterminator="\n")
    return str(path)


def write_json(data: Dict[str, Any], path: Path) -> str:
    """Écrit un sidecar JSON (clés triées)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False, default=_json_default)
        f.write("\n")
    return str(path)


def _json_default(value: Any) -> Any:
    if hasattr(value, "tolist"):
        return value.tolist()
    return str(value)
