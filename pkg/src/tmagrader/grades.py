"""Six-class grade coding and the raw-value <-> class mapping.

Class codes are ordinal by malignancy for codes 1..4; code 5 marks regions
excluded from every metric and from score derivation.
"""

from __future__ import annotations

import numpy as np

from .errors import MappingError

BENIGN = 0
LOWER_THAN_3 = 1
G3 = 2
G4 = 3
G5 = 4
IGNORED = 5

NUM_CLASSES = 6
EVAL_CLASSES = (BENIGN, LOWER_THAN_3, G3, G4, G5)
CLASS_NAMES = ("benign", "lt3", "g3", "g4", "g5", "ignored")

# Gleason grade number carried by each cancerous class code.
GRADE_OF_CODE = {G3: 3, G4: 4, G5: 5}
CODE_OF_GRADE = {3: G3, 4: G4, 5: G5}

# Default raw-mask encoding. Raw values 1 and 2 both mean a pattern below
# grade 3, so they share a class; override via the [mapping] config section.
DEFAULT_RAW_MAPPING = {0: 0, 1: 1, 2: 1, 3: 2, 4: 3, 5: 4, 6: 5}


class ClassMapping:
    """Total map from raw 8-bit mask values onto class codes 0..5."""

    def __init__(self, table: dict[int, int] | None = None):
        table = dict(DEFAULT_RAW_MAPPING) if table is None else dict(table)
        for raw, code in table.items():
            if not 0 <= int(raw) <= 255:
                raise MappingError(f"raw value {raw} outside 0..255")
            if not 0 <= int(code) < NUM_CLASSES:
                raise MappingError(f"class code {code} outside 0..5 (raw value {raw})")
        self.table = {int(k): int(v) for k, v in table.items()}
        self._lut = np.full(256, -1, dtype=np.int16)
        for raw, code in self.table.items():
            self._lut[raw] = code

    def apply(self, raw: np.ndarray) -> np.ndarray:
        """Map a raw-value mask onto class codes; errors on unmapped values."""
        raw = np.asarray(raw)
        if raw.dtype != np.uint8:
            if raw.min() < 0 or raw.max() > 255:
                raise MappingError("raw mask values outside 0..255")
            raw = raw.astype(np.uint8)
        mapped = self._lut[raw]
        if (mapped < 0).any():
            bad = np.argwhere(mapped < 0)[0]
            value = int(raw[tuple(bad)])
            raise MappingError(
                f"unmapped raw value {value} at {tuple(int(i) for i in bad)}"
            )
        return mapped.astype(np.uint8)

    def inverse_table(self) -> dict[int, int]:
        """Canonical raw value per class code (smallest raw mapping to it)."""
        inv: dict[int, int] = {}
        for raw in sorted(self.table):
            code = self.table[raw]
            inv.setdefault(code, raw)
        missing = [c for c in range(NUM_CLASSES) if c not in inv]
        if missing:
            raise MappingError(f"mapping has no raw value for class codes {missing}")
        return inv

    def encode(self, labels: np.ndarray) -> np.ndarray:
        """Write class codes back as canonical raw values (for rasters)."""
        inv = self.inverse_table()
        lut = np.zeros(NUM_CLASSES, dtype=np.uint8)
        for code, raw in inv.items():
            lut[code] = raw
        labels = np.asarray(labels)
        if labels.min() < 0 or labels.max() >= NUM_CLASSES:
            raise MappingError("label codes outside 0..5")
        return lut[labels]

    def is_bijective(self) -> bool:
        return len(set(self.table.values())) == len(self.table)


def apply_class_mapping(raw: np.ndarray, mapping: ClassMapping) -> np.ndarray:
    """Functional alias for :meth:`ClassMapping.apply`."""
    return mapping.apply(raw)
