"""
Test System - Vérification rapide du système complet
=====================================================
Ce script teste tous les composants pour vérifier que tout fonctionne:
imports, journal des runs, garde du dossier de sortie, graphe LangGraph
et spécifications livrées.

Usage:
    python test_system.py
    pytest test_system.py
"""

import glob
import json
import os
import sys
import tempfile

SPECS_GLOB = os.path.join(os.path.dirname(os.path.abspath(__file__)), "sandbox", "specs", "*")

# Messages attendus pour les spécifications volontairement invalides
EXPECTED_VIOLATIONS = {
    "bad.json": ["parameters.t_start: t < t_min (6 μs)"],
    "bad_bias.json": ["parameters.bias_current: 6 mA dépasse i_critical 5.014 mA"],
}


def test_imports():
    """Test que tous les modules s'importent correctement."""
    print("\n🧪 Test 1: Imports des modules...")

    from src.physics import netmodel, kinet, biasdyn, spinsim, fieldmap, deer
    print("  ✅ physics (netmodel, kinet, biasdyn, spinsim, fieldmap, deer)")

    from src.protocol import run, validate, build_experiment_graph
    print("  ✅ protocol")

    from src.experiment_state import create_initial_state
    print("  ✅ experiment_state")

    from src.utils.file_tools import validate_output_path, read_mapping
    from src.utils.plotting import render_csv_svg
    print("  ✅ utils (file_tools, plotting)")

    print("✅ Tous les imports réussis!")
    return True


def test_output_guard():
    """Test que les résultats ne peuvent pas sortir du dossier de sortie."""
    print("\n🧪 Test 2: Garde du dossier de sortie...")

    from src.errors import OutputPathError
    from src.utils.file_tools import get_output_root, validate_output_path

    with tempfile.TemporaryDirectory() as tmp:
        root = get_output_root(os.path.join(tmp, "outputs"))

        inside = validate_output_path("runs/deer_retuned.csv", root)
        assert inside == root / "runs" / "deer_retuned"
        print("  ✅ Chemin interne accepté")

        for escaping in ("../deer_retuned", "/etc/deer_retuned", "runs/../../deer_retuned"):
            try:
                validate_output_path(escaping, root)
            except OutputPathError:
                continue
            raise AssertionError(f"Chemin accepté à tort: {escaping}")
        print("  ✅ Chemins externes refusés")
    return True


def test_logging():
    """Test l'écriture d'une entrée dans un journal temporaire."""
    print("\n🧪 Test 3: Journal des runs...")

    from src.utils.log_helpers import log_simulation
    from src.utils.data_validator import validate_all_logs

    previous = os.environ.get("SPINRES_LOG_FILE")
    with tempfile.TemporaryDirectory() as tmp:
        log_file = os.path.join(tmp, "experiment_data.json")
        os.environ["SPINRES_LOG_FILE"] = log_file
        try:
            log_simulation("biasdyn", "4um", {"target_delta_f_mhz": -31.2}, {"tuning_time_ns": 270.0})
            with open(log_file, "r", encoding="utf-8") as f:
                entries = json.load(f)
            assert len(entries) == 1
            assert entries[0]["action"] == "SIMULATION"
            assert validate_all_logs(log_file)["is_valid"]
            print("  ✅ Entrée écrite et conforme au schéma")
        finally:
            if previous is None:
                os.environ.pop("SPINRES_LOG_FILE", None)
            else:
                os.environ["SPINRES_LOG_FILE"] = previous
    return True


def test_langgraph():
    """Test que LangGraph compile le graphe d'expérience."""
    print("\n🧪 Test 4: LangGraph...")

    from src.protocol import build_experiment_graph

    graph = build_experiment_graph()
    assert graph is not None
    print("  ✅ Graphe VALIDATE → EXECUTE → PERSIST compilé")
    return True


def test_shipped_specs():
    """Test que les spécifications livrées valident (sauf bad*, avec le message exact)."""
    print("\n🧪 Test 5: Spécifications livrées...")

    from src.protocol import load_spec, validate

    paths = sorted(glob.glob(SPECS_GLOB))
    assert paths, "aucune spécification dans sandbox/specs"

    with tempfile.TemporaryDirectory() as tmp:
        for path in paths:
            name = os.path.basename(path)
            violations = validate(load_spec(path), os.path.dirname(path), tmp)
            expected = EXPECTED_VIOLATIONS.get(name, [])
            assert violations == expected, f"{name}: {violations} (attendu {expected})"
            print(f"  ✅ {name}")
    return True


def main():
    """Exécute tous les tests."""
    print("="*60)
    print("🔍 TEST DU SYSTÈME SPINRES")
    print("="*60)

    tests = [
        ("Imports", test_imports),
        ("Garde des sorties", test_output_guard),
        ("Logging", test_logging),
        ("LangGraph", test_langgraph),
        ("Spécifications", test_shipped_specs),
    ]

    results = {}

    for name, test_func in tests:
        try:
            results[name] = test_func()
        except Exception as e:
            print(f"\n❌ Erreur critique dans {name}: {e}")
            results[name] = False

    # Résumé
    print("\n" + "="*60)
    print("📊 RÉSUMÉ DES TESTS")
    print("="*60)

    passed = sum(1 for v in results.values() if v)
    total = len(results)

    for name, success in results.items():
        status = "✅" if success else "❌"
        print(f"{status} {name}")

    print("="*60)
    print(f"Résultat: {passed}/{total} tests réussis")

    if passed == total:
        print("\n🎉 TOUS LES TESTS PASSENT!")
        print("Vous pouvez maintenant utiliser:")
        print("  python main.py deer --spec sandbox/specs/deer_retuned.json")
        return 0
    else:
        print(f"\n⚠️ {total - passed} test(s) échoué(s)")
        print("Veuillez corriger les problèmes avant de continuer.")
        return 1


if __name__ == "__main__":
    sys.exit(main())
