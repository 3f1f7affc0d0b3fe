"""
Experiment State - État partagé du graphe d'expérience
=======================================================
Structure passée de nœud en nœud dans le graphe LangGraph du protocole
(validation -> exécution -> persistance).
"""

from typing import TypedDict, List, Optional, Dict, Any


class ExperimentState(TypedDict):
    """
    État partagé entre les nœuds du protocole.

    Chaque nœud lit ce dont il a besoin et renvoie l'état complété; les
    drapeaux de contrôle décident du nœud suivant.
    """

    # Entrée
    spec_path: str  # Fichier de spécification d'origine ("-" si construite en mémoire)
    spec: Dict[str, Any]  # Spécification validée (ExperimentSpec.model_dump())
    output_dir: str  # Dossier racine des résultats
    threads: int  # Plafond de workers pour les modules
    verbose: bool  # Barres de progression tqdm

    # Validation
    device: Optional[str]  # Nom du dispositif résolu
    violations: List[str]  # Contraintes non respectées
    validated: bool  # La validation a-t-elle eu lieu?

    # Exécution
    result: Optional[Any]  # ExperimentResult produit par le module physique
    wall_time: float  # Durée de l'exécution (s)

    # Persistance
    paths: Dict[str, str]  # {"csv": ..., "json": ...}

    # Contrôle du flux
    should_continue: bool  # Passer au nœud suivant?
    run_complete: bool  # Résultats écrits avec succès?
    error_occurred: bool  # Une erreur s'est produite?
    error_message: Optional[str]  # Message d'erreur si applicable
    error: Optional[Exception]  # Exception d'origine (pour les codes de sortie)


def create_initial_state(spec_path: str, spec: Dict[str, Any], output_dir: str,
                         threads: int = 1, verbose: bool = False) -> ExperimentState:
    """
    Crée l'état initial d'un run.

    Args:
        spec_path: Fichier de spécification (pour les messages d'erreur)
        spec: Mapping brut de la spécification, overrides déjà appliqués
        output_dir: Dossier des résultats
        threads: Plafond de workers
        verbose: Afficher la progression

    Returns:
        ExperimentState: État initial
    """
    return ExperimentState(
        # Entrée
        spec_path=spec_path,
        spec=spec,
        output_dir=output_dir,
        threads=threads,
        verbose=verbose,

        # Validation
        device=None,
        violations=[],
        validated=False,

        # Exécution
        result=None,
        wall_time=0.0,

        # Persistance
        paths={},

        # Contrôle
        should_continue=True,
        run_complete=False,
        error_occurred=False,
        error_message=None,
        error=None,
    )


def add_violation(state: ExperimentState, field_name: str, message: str) -> ExperimentState:
    """
    Ajoute une violation "champ: contrainte" et arrête le flux.

    Args:
        state: État actuel
        field_name: Champ fautif (clé pointée, ex: "parameters.t_start")
        message: Contrainte violée et sa source

    Returns:
        ExperimentState: État mis à jour
    """
    state["violations"].append(f"{field_name}: {message}")
    state["should_continue"] = False
    return state


def mark_error(state: ExperimentState, exc: Exception) -> ExperimentState:
    """Enregistre une erreur d'exécution et arrête le flux."""
    state["error_occurred"] = True
    state["error_message"] = str(exc)
    state["error"] = exc
    state["should_continue"] = False
    return state


def mark_run_complete(state: ExperimentState, paths: Dict[str, str]) -> ExperimentState:
    """
    Marque le run comme terminé.

    Args:
        state: État actuel
        paths: Fichiers écrits

    Returns:
        ExperimentState: État mis à jour
    """
    state["paths"] = paths
    state["run_complete"] = True
    state["should_continue"] = False
    return state
