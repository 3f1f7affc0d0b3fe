# check_setup.py
import importlib
import os
import sys

REQUIRED_PACKAGES = ["numpy", "scipy", "pandas", "pydantic", "yaml", "dotenv",
                     "langgraph", "tqdm", "matplotlib", "pytest", "hypothesis"]


def check_environment():
    print("🔍 Démarrage du 'Sanity Check'...\n")
    all_good = True

    # 1. Vérification Python
    version = sys.version_info
    if (version.major == 3) and (version.minor in [10, 11]):
        print(f"✅ Python Version: {version.major}.{version.minor}")
    else:
        print(f"❌ Python Version: {version.major}.{version.minor} (Requis: 3.10 ou 3.11)")
        all_good = False

    # 2. Vérification des paquets
    for name in REQUIRED_PACKAGES:
        try:
            importlib.import_module(name)
        except ImportError:
            print(f"❌ Paquet manquant: {name} (pip install -r requirements.txt)")
            all_good = False
    if all_good:
        print("✅ Paquets installés.")

    # 3. Vérification des dispositifs livrés
    from src.config import DEVICES_DIR, get_log_file, get_output_dir
    from src.physics.kinet import load_device

    for name in ("4um", "2p5um", "1p5um"):
        try:
            load_device(name)
        except Exception as e:
            print(f"❌ Dispositif {name} illisible: {e}")
            all_good = False
    print(f"✅ Dispositifs: {DEVICES_DIR}")

    # 4. Fichier .env (optionnel)
    if os.path.exists(".env"):
        print("✅ Fichier .env détecté.")
    else:
        print("⚠️ Fichier .env absent: valeurs par défaut (voir .env.example).")

    # 5. Dossiers de logs et de sorties
    for folder in (os.path.dirname(get_log_file()), get_output_dir()):
        if folder and not os.path.exists(folder):
            os.makedirs(folder)
            print(f"✅ Dossier {folder}/ créé.")

    if all_good:
        print("\n🚀 TOUT EST PRÊT ! Vous pouvez commencer.")
    else:
        print("\n⚠️ CORRIGEZ LES ERREURS AVANT DE CONTINUER.")
    return all_good


if __name__ == "__main__":
    sys.exit(0 if check_environment() else 1)
