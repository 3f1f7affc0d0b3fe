"""
Format canonique des résultats
==============================
Une expérience produit une table (une colonne x, une ou plusieurs colonnes
y) et des métadonnées; protocol l'écrit en CSV + sidecar JSON.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

import pandas as pd

CSV_FLOAT_FORMAT = "%.10g"


@dataclass
class ExperimentResult:
    x_label: str
    y_labels: Tuple[str, ...]
    rows: List[Tuple[float, ...]]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.y_labels = tuple(self.y_labels)
        width = 1 + len(self.y_labels)
        self.rows = [tuple(float(v) for v in row) for row in self.rows]
        for row in self.rows:
            if len(row) != width:
                raise ValueError(f"ligne de {len(row)} valeurs, {width} attendues")

    @classmethod
    def from_columns(cls, x_label: str, x: Sequence[float], columns: Dict[str, Sequence[float]],
                     metadata: Dict[str, Any] = None) -> "ExperimentResult":
        names = tuple(columns)
        rows = list(zip(x, *(columns[n] for n in names)))
        return cls(x_label=x_label, y_labels=names, rows=rows, metadata=dict(metadata or {}))

    @classmethod
    def from_frame(cls, df: pd.DataFrame, metadata: Dict[str, Any] = None) -> "ExperimentResult":
        x_label, *y_labels = list(df.columns)
        return cls(x_label=x_label, y_labels=tuple(y_labels),
                   rows=[tuple(r) for r in df.itertuples(index=False)], metadata=dict(metadata or {}))

    @property
    def columns(self) -> Tuple[str, ...]:
        return (self.x_label,) + self.y_labels

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(self.columns))

    def column(self, name: str) -> List[float]:
        index = self.columns.index(name)
        return [row[index] for row in self.rows]
