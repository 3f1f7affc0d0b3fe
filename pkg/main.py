"""
Main Entry Point - spinres
==========================
Interface en ligne de commande du toolkit: une sous-commande par type
d'expérience, plus validate, fieldmap et plot.

Usage:
    python main.py deer --spec sandbox/specs/deer_retuned.json
    python main.py fieldsweep --spec sandbox/specs/fieldsweep_4ma.json --set parameters.bias_current=4mA
    python main.py validate --spec sandbox/specs/bad.json
    python main.py fit --data sandbox/data/tuning_4um_digitized.csv --f0 7636.6MHz

Codes de sortie: 0 succès, 2 spécification invalide, 3 erreur d'exécution,
64 usage incorrect, 130 interruption.
"""

import argparse
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

# Charger les variables d'environnement
load_dotenv()

from src.config import get_output_dir, get_toolkit_version
from src.errors import ParseError, SpinresError
from src.physics.fieldmap import device_b1_anchor, field_map, geometry_for_device
from src.physics.kinet import load_device
from src.protocol import apply_overrides, load_spec, run_experiment, validate, write_result
from src.results import ExperimentResult
from src.utils.log_helpers import log_action, log_io, log_simulation
from src.utils.logger import ActionType
from src.utils.plotting import render_csv_svg
from src.utils.units import parse_quantity

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
EXIT_USAGE = 64
EXIT_INTERRUPTED = 130

# Sous-commande -> type d'expérience
SUBCOMMAND_KINDS = {
    "fit": "fit_tuning",
    "s21": "s21_sweep",
    "tune": "tune_time",
    "fieldsweep": "field_sweep",
    "t2": "t2_decay",
    "deer": "deer",
}


class UsageError(Exception):
    """Arguments invalides (code de sortie 64)."""
    pass


class SpinresArgumentParser(argparse.ArgumentParser):
    """ArgumentParser qui lève UsageError au lieu de sortir avec le code 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: erreur: {message}")


def quantity(text: str) -> float:
    """Type argparse: quantité avec suffixe SI ("3.9mA", "7636.6MHz")."""
    try:
        return parse_quantity(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def parse_arguments(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """
    Parse les arguments de la ligne de commande.

    Raises:
        UsageError: Arguments invalides
    """
    common = SpinresArgumentParser(add_help=False)
    common.add_argument("--out", type=str, default=None,
                        help="Dossier des résultats (défaut: SPINRES_OUTPUT_DIR ou ./outputs)")
    common.add_argument("--threads", type=int, default=None,
                        help="Nombre maximal de workers (défaut: SPINRES_THREADS ou 1)")
    common.add_argument("--seed", type=int, default=None, help="Graine imposée à l'expérience")
    common.add_argument("--verbose", action="store_true", help="Barres de progression et traces d'erreur")

    spec_args = SpinresArgumentParser(add_help=False)
    spec_args.add_argument("--spec", type=str, help="Fichier de spécification JSON ou YAML")
    spec_args.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                           help="Override clé.pointée=valeur (répétable)")

    parser = SpinresArgumentParser(
        prog="spinres",
        description="🧲 spinres - Résonateur supraconducteur accordable pour la RPE pulsée",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Exemples d'utilisation:
  python main.py fit --data sandbox/data/tuning_4um_digitized.csv --f0 7636.6MHz
  python main.py tune --spec sandbox/specs/tune_step.json
  python main.py fieldsweep --spec sandbox/specs/fieldsweep_4ma.json --set parameters.style=rect
  python main.py deer --spec sandbox/specs/deer_retuned.json --mode full --threads 4
  python main.py validate --spec sandbox/specs/bad.json
  python main.py plot outputs/deer_retuned.csv

Chaque expérience écrit <output_path>.csv, <output_path>.json (métadonnées)
et <output_path>.svg dans le dossier --out.
        """
    )
    parser.add_argument("--version", action="version", version=f"spinres {get_toolkit_version()}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=SpinresArgumentParser)
    sub.required = True

    fit = sub.add_parser("fit", parents=[common, spec_args], help="Ajuste I2*, I4* sur une courbe δf(i)")
    fit.add_argument("--data", type=str, help="CSV (current_ma, delta_f_mhz)")
    fit.add_argument("--f0", type=quantity, help="Fréquence à courant nul (ex: 7636.6MHz)")
    fit.add_argument("--device", type=str, default="4um", help="Dispositif (défaut: 4um)")
    fit.add_argument("--name", type=str, default="fit", help="Nom des fichiers de sortie")

    sub.add_parser("s21", parents=[common, spec_args], help="Balayage |S21|(f) du réseau PBG")
    sub.add_parser("tune", parents=[common, spec_args], help="Trace temporelle et temps d'accord")
    sub.add_parser("fieldsweep", parents=[common, spec_args], help="Balayage en champ détecté par écho")
    sub.add_parser("t2", parents=[common, spec_args], help="Décroissance de Hahn et ajustement de T2")
    deer = sub.add_parser("deer", parents=[common, spec_args], help="Courbes DEER ³¹P/⁷⁵As")
    deer.add_argument("--mode", choices=("analytic", "full"), default=None, help="Mode de simulation")

    fmap = sub.add_parser("fieldmap", parents=[common], help="Carte B_i / B1 en section transverse")
    fmap.add_argument("--device", type=str, default="4um", help="Dispositif (défaut: 4um)")
    fmap.add_argument("--power", type=quantity, default=-15.0, help="Puissance micro-onde en dBm (ex: --power=-20dBm)")
    fmap.add_argument("--ny", type=int, default=32, help="Points selon y")
    fmap.add_argument("--nz", type=int, default=32, help="Points selon z")
    fmap.add_argument("--name", type=str, default=None, help="Nom des fichiers (défaut: fieldmap_<device>)")

    sub.add_parser("validate", parents=[common, spec_args], help="Vérifie une spécification sans l'exécuter")

    plot = sub.add_parser("plot", parents=[common], help="Rend un ou plusieurs CSV de résultats en SVG")
    plot.add_argument("csv", nargs="+", help="Fichiers CSV")

    args = parser.parse_args(argv)
    needs_spec = args.command in SUBCOMMAND_KINDS or args.command == "validate"
    if needs_spec and args.command != "fit" and not args.spec:
        raise UsageError(f"spinres {args.command}: --spec est obligatoire")
    if args.command == "fit" and not args.spec and not args.data:
        raise UsageError("spinres fit: --spec ou --data est obligatoire")
    return args


# ============================================================
# SOUS-COMMANDES
# ============================================================

def cmd_experiment(args: argparse.Namespace) -> int:
    """Exécute une spécification via protocol et rend le SVG."""
    kind = SUBCOMMAND_KINDS[args.command]
    overrides = list(args.overrides)
    if getattr(args, "mode", None):
        overrides.append(f"parameters.mode={args.mode}")

    if args.command == "fit" and not args.spec:
        raw = {"kind": kind, "device_ref": args.device, "output_path": args.name,
               "parameters": {"data": os.path.abspath(args.data)}}
        if args.f0 is not None:
            raw["parameters"]["f0"] = args.f0
        spec_path = "-"
    else:
        raw = load_spec(args.spec)
        spec_path = args.spec
        if raw.get("kind") != kind:
            print(f"❌ {args.spec}: kind '{raw.get('kind')}' ne correspond pas à '{args.command}' ({kind})")
            return EXIT_VALIDATION

    summary = run_experiment(spec_path, overrides, args.out, args.seed, args.verbose, raw=raw)
    if summary["violations"]:
        return EXIT_VALIDATION
    if not summary["success"]:
        if args.verbose and summary["error"] is not None:
            import traceback
            traceback.print_exception(type(summary["error"]), summary["error"], summary["error"].__traceback__)
        return EXIT_RUNTIME

    svg = render_csv_svg(summary["paths"]["csv"])
    print(f"🖼️ SVG: {svg}")
    fit = summary["result"].metadata.get("fit")
    if fit:
        print(f"📊 I2* = {fit['i2_star_ma']:.3f} mA, I4* = {fit['i4_star_ma']} mA")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    """Affiche les violations; code 2 s'il y en a."""
    raw = apply_overrides(load_spec(args.spec), args.overrides)
    base_dir = os.path.dirname(os.path.abspath(args.spec))
    violations = validate(raw, base_dir, args.out or get_output_dir())

    if violations:
        print(f"❌ {args.spec}: {len(violations)} violation(s)")
        for violation in violations:
            print(f"   - {violation}")
        return EXIT_VALIDATION
    print(f"✅ {args.spec}: spécification valide")
    return EXIT_OK


def cmd_fieldmap(args: argparse.Namespace) -> int:
    """Carte des champs pour un dispositif livré ou un fichier."""
    dev = load_device(args.device)
    geom = geometry_for_device(dev)
    frame = field_map(geom, args.power, device_b1_anchor(dev), args.ny, args.nz)
    result = ExperimentResult.from_frame(frame, metadata={
        "kind": "fieldmap", "device": dev.name, "power_dbm": args.power,
        "toolkit_version": get_toolkit_version(),
    })
    paths = write_result(result, args.name or f"fieldmap_{dev.name}", args.out or get_output_dir())
    log_simulation("fieldmap", dev.name, {"power_dbm": args.power, "ny": args.ny, "nz": args.nz},
                   {"rows": len(result.rows), "csv": paths["csv"]})
    print(f"✅ CSV: {paths['csv']}")
    print(f"🖼️ SVG: {render_csv_svg(paths['csv'])}")
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    """Rend chaque CSV en SVG (à côté du CSV, ou dans --out)."""
    for csv_path in args.csv:
        if not os.path.isfile(csv_path):
            print(f"❌ Fichier introuvable: {csv_path}")
            return EXIT_USAGE
        svg_path = None
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            svg_path = os.path.join(args.out, os.path.splitext(os.path.basename(csv_path))[0] + ".svg")
        svg = render_csv_svg(csv_path, svg_path)
        log_io(svg, kind="svg", source=csv_path)
        print(f"🖼️ {csv_path} -> {svg}")
    return EXIT_OK


# ============================================================
# POINT D'ENTRÉE
# ============================================================

def main(argv: Optional[List[str]] = None) -> int:
    """
    Fonction principale du programme.

    Returns:
        int: Code de sortie
    """
    try:
        args = parse_arguments(argv)
    except UsageError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE

    if args.threads is not None:
        if args.threads < 1:
            print("❌ --threads doit être ≥ 1", file=sys.stderr)
            return EXIT_USAGE
        os.environ["SPINRES_THREADS"] = str(args.threads)

    try:
        if args.command == "validate":
            return cmd_validate(args)
        if args.command == "fieldmap":
            return cmd_fieldmap(args)
        if args.command == "plot":
            return cmd_plot(args)
        return cmd_experiment(args)

    except KeyboardInterrupt:
        print("\n\n⚠️ Interruption par l'utilisateur (Ctrl+C)")
        log_action("cli", ActionType.STARTUP, "FAILURE", command=args.command, error="KeyboardInterrupt")
        return EXIT_INTERRUPTED

    except (ParseError, FileNotFoundError) as e:
        print(f"❌ Spécification illisible: {e}")
        return EXIT_VALIDATION

    except (SpinresError, ValueError, OSError) as e:
        print(f"\n❌ ERREUR: {e}")
        if args.verbose:
            import traceback
            traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
