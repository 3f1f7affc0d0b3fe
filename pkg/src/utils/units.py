"""
Suffixes SI pour les entrées numériques
=======================================
"3.9mA" -> 0.0039, "7636.6MHz" -> 7636600000.0, "34us" -> 3.4e-05.
La conversion passe par Decimal: le float obtenu est l'arrondi correct de
la valeur décimale écrite, identique au littéral en unités de base.
"""

import re
from decimal import Decimal, InvalidOperation
from typing import Union

PREFIXES = {
    "p": Decimal("1e-12"),
    "n": Decimal("1e-9"),
    "u": Decimal("1e-6"),
    "μ": Decimal("1e-6"),
    "µ": Decimal("1e-6"),
    "m": Decimal("1e-3"),
    "": Decimal("1"),
    "k": Decimal("1e3"),
    "M": Decimal("1e6"),
    "G": Decimal("1e9"),
}

UNITS = ("Hz", "A", "s", "T", "m", "W", "ohm", "Ω", "rad", "deg")

_NUMBER = r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?"
_PATTERN = re.compile(
    rf"^\s*(?P<num>{_NUMBER})\s*(?P<prefix>[pnuμµmkMG]?)(?P<unit>{'|'.join(UNITS)})?\s*$"
)


def parse_quantity(text: Union[str, float, int]) -> float:
    """
    Convertit une quantité avec suffixe SI en float (unités de base).

    "dBm" est laissé tel quel (grandeur logarithmique), "deg" converti en radians.

    Raises:
        ValueError: Si le texte n'est pas une quantité reconnue
    """
    if isinstance(text, (int, float)):
        return float(text)

    raw = text.strip()
    if raw.endswith("dBm"):
        return float(Decimal(raw[:-3].strip()))

    match = _PATTERN.match(raw)
    if match is None:
        raise ValueError(f"Quantité invalide: '{text}'")

    prefix = match.group("prefix")
    unit = match.group("unit")
    # "m" seul est l'unité mètre, pas le préfixe milli
    if unit is None and prefix == "m":
        prefix, unit = "", "m"
    if unit is None and prefix:
        raise ValueError(f"Préfixe sans unité: '{text}'")

    try:
        value = Decimal(match.group("num")) * PREFIXES[prefix]
    except InvalidOperation as exc:
        raise ValueError(f"Quantité invalide: '{text}'") from exc

    if unit == "deg":
        return float(value) * 3.141592653589793 / 180.0
    return float(value)
