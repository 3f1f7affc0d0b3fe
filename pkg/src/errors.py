"""
Erreurs du toolkit spinres
==========================
Toutes les exceptions levées par les modules physiques et l'orchestration.
Chaque module lève la sous-classe correspondant à sa condition d'échec;
le CLI convertit ces erreurs en codes de sortie.
"""

from typing import List, Optional


class SpinresError(Exception):
    """Classe de base de toutes les erreurs du toolkit."""
    pass


# ============================================================
# KINET
# ============================================================

class CriticalCurrentExceeded(SpinresError):
    """Courant de polarisation au-delà du courant critique du dispositif."""

    def __init__(self, current: float, i_critical: float):
        self.current = current
        self.i_critical = i_critical
        super().__init__(
            f"|i| = {abs(current) * 1e3:.4f} mA dépasse i_critical {i_critical * 1e3:.3f} mA"
        )


class TargetUnreachable(SpinresError):
    """Décalage de fréquence demandé hors de la plage accessible."""
    pass


class FitDiverged(SpinresError):
    """L'optimiseur n'a pas réduit le résidu."""
    pass


class IllConditioned(SpinresError):
    """Matrice de covariance singulière."""
    pass


# ============================================================
# NETMODEL
# ============================================================

class NoPeakFound(SpinresError):
    """Aucun maximum local de |S21| dans la bande."""
    pass


class MultiplePeaks(SpinresError):
    """Plus d'un maximum dépasse la moitié du pic global."""

    def __init__(self, peaks: List[float]):
        self.peaks = peaks
        listed = ", ".join(f"{p / 1e6:.3f} MHz" for p in peaks)
        super().__init__(f"{len(peaks)} pics dans la bande: {listed}")


class CalibrationFailed(SpinresError):
    """Aucun changement de signe trouvé en élargissant l'intervalle de recherche."""
    pass


# ============================================================
# BIASDYN / SPINSIM
# ============================================================

class SlewTooFast(SpinresError):
    """Le suivi de fréquence exige une pente que le retard du circuit ne permet pas."""
    pass


class StepTooLarge(SpinresError):
    """Pas d'intégration trop grand: dt·max|Ω| > 0.1 rad."""
    pass


# ============================================================
# DEER / FIELDMAP
# ============================================================

class TimingViolation(SpinresError):
    """Contrainte temporelle de la séquence violée (t_min, settle...)."""
    pass


class DoesNotFit(SpinresError):
    """Les impulsions de compensation ne tiennent pas dans la fenêtre libre."""
    pass


# ============================================================
# PROTOCOL / CLI
# ============================================================

class ParseError(SpinresError):
    """Fichier de spécification illisible (position line/column si connue)."""

    def __init__(self, message: str, path: str = "", line: Optional[int] = None,
                 column: Optional[int] = None):
        self.path = path
        self.line = line
        self.column = column
        where = f"{path}:{line}:{column}" if line is not None else path
        super().__init__(f"{where}: {message}" if where else message)


class SpecValidationError(SpinresError):
    """Spécification non exécutable; porte la liste des violations."""

    def __init__(self, violations: List[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


class OutputPathError(SpinresError):
    """Chemin de sortie hors du dossier de résultats autorisé."""
    pass


class ExperimentError(SpinresError):
    """Erreur d'un module physique, enrichie du contexte de l'expérience."""

    def __init__(self, kind: str, spec_path: str, cause: Exception):
        self.kind = kind
        self.spec_path = spec_path
        self.cause = cause
        super().__init__(f"[{kind}] {spec_path}: {type(cause).__name__}: {cause}")


# ============================================================
# AVERTISSEMENTS
# ============================================================

class PowerCapExceeded(UserWarning):
    """Puissance micro-onde au-delà du plafond linéaire (distorsion, pas d'échec)."""
    pass
