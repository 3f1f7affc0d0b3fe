"""
Configuration centrale du toolkit spinres
=========================================
Valeurs par défaut des simulations (physique, discrétisation, chemins).
Les variables d'environnement (fichier .env) surchargent les réglages
d'exécution; les constantes physiques ne se modifient qu'ici.
"""

import os
from dotenv import load_dotenv

# Charger les variables d'environnement
load_dotenv()

TOOLKIT_VERSION = "1.0.0"

# ============================================================
# EXÉCUTION
# ============================================================

THREADS = int(os.getenv("SPINRES_THREADS", "1"))
DEFAULT_SEED = int(os.getenv("SPINRES_SEED", "0"))

# ============================================================
# CHEMINS DES FICHIERS
# ============================================================

LOG_FILE = os.getenv("SPINRES_LOG_FILE", os.path.join("logs", "experiment_data.json"))
OUTPUT_DIR = os.getenv("SPINRES_OUTPUT_DIR", "outputs")
DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")
DEVICES_DIR = os.path.join(DATA_DIR, "devices")
NETWORKS_DIR = os.path.join(DATA_DIR, "networks")
SPECS_DIR = "sandbox/specs"

# ============================================================
# NETMODEL
# ============================================================

PORT_IMPEDANCE = 50.0          # ohms
MIRROR_Z_LOW = 35.0            # ohms
MIRROR_Z_HIGH = 137.0          # ohms
MIRROR_PERIODS = 4
LAUNCH_IMPEDANCE = 100.0       # ohms, tronçon côté port: fixe le Q externe (≈ 7900, couplage ≈ 0.6)
CAVITY_IMPEDANCE = 50.0        # ohms
PHASE_VELOCITY = 1.278e8       # m/s, CPW sur saphir (absorbé par la calibration)
SWEEP_POINTS_PER_LINEWIDTH = 20
RESONANCE_XTOL_HZ = 1.0

# ============================================================
# BIASDYN
# ============================================================

TUNING_TIME_TARGET = 270e-9            # s
TUNING_CALIBRATION_DELTA_F = -31.2e6   # Hz
TUNING_OVERSHOOT_RATIO = 0.15
TUNING_OVERSHOOT_LINEWIDTHS = 0.8
CURRENT_HEADROOM = 0.998               # fraction de i_critical utilisable
LAG_SEARCH_BOUNDS = (10e-9, 300e-9)    # s
CAVITY_STEPS_PER_LIFETIME = 20
CHIRP_PRE_HOLD = 1e-6                  # s

# ============================================================
# SPINSIM
# ============================================================

GH_NODES = 64
SPATIAL_GRID = (32, 32)
ACQUIRE_WINDOW = 2e-6          # s
HAHN_TAU = 60e-6               # s
RECT_PI2_DURATION = 200e-9     # s
RECT_REFERENCE_POWER = -29.0   # dBm (π/2 de 200 ns)
RECT_BIASED_POWER = -32.0      # dBm
ADIABATIC_POWER = -32.0        # dBm
ADIABATIC_DURATION = 10e-6     # s
ADIABATIC_CHIRP = 2e6          # Hz (demi-largeur)
LINE_CENTER_FIELD = 0.27478    # T (m_I = -1/2, 31P)
BIASED_LINE_FIELD = 0.27372    # T (4 mA)
FIELD_CALIBRATION_CURRENT = 4e-3   # A
LINE_FWHM = 0.15e-3            # T
T2_DEFAULT = 448e-6            # s
MISALIGNMENT = 4.7             # degrés
MAX_ROTATION_PER_STEP = 0.1    # rad

# ============================================================
# FIELDMAP
# ============================================================

EPI_THICKNESS = 2e-6           # m
IMPLANT_DEPTH = 200e-9         # m
SAMPLE_STANDOFF = 0.1e-6       # m
FILM_THICKNESS = 20e-9         # m
GROUND_WIDTH_RATIO = 10.0
FILM_SUBSHEETS = 4
DETECTION_LAYER_DEPTHS = 2.0   # couche détectée: 2 × profondeur d'implantation
B1_ANCHOR_POWER = -15.0        # dBm, ancrage par défaut (4 μm)
B1_ANCHOR_TESLA = 0.2e-6       # T au point de référence
FIELDMAP_GRID = (32, 8)        # (ny, nz) pour les estimations de région
SPIN_REGION = "above_pin"
AS_LINE_OFFSET = -33e6         # Hz, raie 75As sondée par la pompe DEER
COMPENSATION_TAIL_LAGS = 20     # queue du courant filtré laissée libre avant une impulsion (en τ_b)

# ============================================================
# DEER
# ============================================================

DEER_TAU = 34e-6               # s
DEER_T_MIN = 6e-6              # s
DEER_SETTLE = 1e-6             # s
DEER_PUMP_OFFSET = -33e6       # Hz
DEER_PUMP_DURATION = 400e-9    # s
AS_CONCENTRATION = 5e22        # m^-3 (5e16 cm^-3)
DEER_TARGET_ECHO = 0.80
DEER_TARGET_TIME = 20e-6       # s
DEER_CUTOFF_FACTOR = 0.05      # D(R) = facteur / tau
DEER_OBSERVERS = 10_000
DEER_OFF_RESONANCE_SHIFT = -15e6   # Hz, pompe hors de la raie 75As
DEER_SLAB_THICKNESS = 400e-9   # m, couche implantée (mode slab)


# ============================================================
# FONCTIONS UTILITAIRES
# ============================================================

def get_threads() -> int:
    """Retourne le nombre maximal de workers (relu à chaque appel, cf. --threads)."""
    return max(1, int(os.getenv("SPINRES_THREADS", str(THREADS))))


def get_log_file() -> str:
    """Retourne le chemin du journal des runs (relu à chaque appel)."""
    return os.getenv("SPINRES_LOG_FILE", LOG_FILE)


def get_output_dir() -> str:
    """Retourne le dossier racine des résultats."""
    return os.getenv("SPINRES_OUTPUT_DIR", OUTPUT_DIR)


def get_device_path(name: str) -> str:
    """Retourne le chemin du fichier d'un dispositif livré (ex: '4um')."""
    return os.path.join(DEVICES_DIR, f"{name}.json")


def get_toolkit_version() -> str:
    """Retourne la version du toolkit."""
    return TOOLKIT_VERSION


# ============================================================
# AFFICHAGE DE LA CONFIGURATION (pour debug)
# ============================================================

if __name__ == "__main__":
    print("=" * 60)
    print("🔧 CONFIGURATION SPINRES")
    print("=" * 60)
    print(f"Version            : {TOOLKIT_VERSION}")
    print(f"Threads            : {get_threads()}")
    print(f"Seed par défaut    : {DEFAULT_SEED}")
    print(f"Journal            : {get_log_file()}")
    print(f"Sorties            : {get_output_dir()}")
    print(f"Dispositifs        : {DEVICES_DIR}")
    print(f"\n🧲 Spins:")
    print(f"   Raie (0 mA)     : {LINE_CENTER_FIELD * 1e3:.2f} mT")
    print(f"   FWHM            : {LINE_FWHM * 1e3:.2f} mT")
    print(f"   Grille          : {GH_NODES} nœuds × {SPATIAL_GRID[0]}×{SPATIAL_GRID[1]}")
    print("=" * 60)
