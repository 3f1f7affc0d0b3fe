"""
Plotting - Rendu SVG des CSV de résultats
=========================================
Première colonne en abscisse, une courbe par colonne restante. Backend Agg
et sel de hachage fixe: deux rendus du même CSV donnent le même SVG.
"""

import os
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

SVG_HASH_SALT = "spinres"

# Libellés d'axes connus (nom de colonne -> libellé)
AXIS_LABELS = {
    "current_ma": "Bias current (mA)",
    "delta_f_mhz": "δf (MHz)",
    "freq_mhz": "Frequency (MHz)",
    "time_ns": "Time (ns)",
    "field_mt": "B0 (mT)",
    "two_tau_us": "2τ (μs)",
    "t_us": "t (μs)",
    "y_um": "y (μm)",
}


def render_csv_svg(csv_path: str, svg_path: Optional[str] = None, title: Optional[str] = None) -> str:
    """
    Trace un CSV de résultats en SVG.

    Args:
        csv_path: CSV produit par protocol (x puis colonnes y)
        svg_path: Fichier de sortie (défaut: même nom en .svg)
        title: Titre (défaut: nom du fichier)

    Returns:
        str: Chemin du SVG écrit

    Raises:
        ValueError: CSV avec moins de deux colonnes
    """
    df = pd.read_csv(csv_path)
    if df.shape[1] < 2:
        raise ValueError(f"{csv_path}: au moins deux colonnes sont nécessaires")
    svg_path = svg_path or os.path.splitext(csv_path)[0] + ".svg"

    x_label, *y_labels = list(df.columns)
    with plt.rc_context({"svg.hashsalt": SVG_HASH_SALT, "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for column in y_labels:
            ax.plot(df[x_label], df[column], label=column, linewidth=1.2)
        ax.set_xlabel(AXIS_LABELS.get(x_label, x_label))
        ax.set_ylabel(y_labels[0] if len(y_labels) == 1 else "value")
        ax.set_title(title or os.path.basename(os.path.splitext(csv_path)[0]))
        if len(y_labels) > 1:
            ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return svg_path
