"""
Flux aléatoires déterministes
=============================
Un flux Philox (générateur à compteur) par triplet (seed, module, index):
le tirage d'un observateur DEER ou d'un paquet Monte-Carlo ne dépend ni de
l'ordre d'itération ni du nombre de threads.
"""

import zlib

import numpy as np


def module_key(module: str) -> int:
    """Clé entière stable d'un nom de module (CRC-32)."""
    return zlib.crc32(module.encode("utf-8"))


def stream(seed: int, module: str, index: int = 0) -> np.random.Generator:
    """
    Générateur indépendant pour (seed, module, index).

    Args:
        seed: Seed de premier niveau de l'expérience
        module: Nom du module consommateur (ex: "deer")
        index: Index de l'élément (observateur, seed de bruit...)

    Returns:
        np.random.Generator adossé à un bit generator Philox
    """
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(module_key(module), int(index)))
    return np.random.Generator(np.random.Philox(sequence))
