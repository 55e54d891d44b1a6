"""The unified 16-class respiratory taxonomy and its raw-label mapping."""

from __future__ import annotations

import logging
import math
import re

log = logging.getLogger(__name__)

# Ordered by descending raw frequency; class index follows this order.
TAXONOMY_COUNTS: tuple[tuple[str, int], ...] = (
    ("Control Group", 156_527),
    ("COVID-19", 77_994),
    ("Pneumonia", 1_909),
    ("COPD", 820),
    ("Asthma", 324),
    ("Bronchitis", 188),
    ("Bronchiectasis", 103),
    ("Hemoptysis", 65),
    ("Other respiratory diseases", 49),
    ("URTI", 42),
    ("Bronchiolitis", 18),
    ("Pulmonary hemosiderosis", 13),
    ("Chronic cough", 11),
    ("Airway foreign body", 6),
    ("Kawasaki disease", 3),
    ("LRTI", 2),
)
CLASS_NAMES: tuple[str, ...] = tuple(n for n, _ in TAXONOMY_COUNTS)
RAW_TOTAL = 238_074
NUM_CLASSES = len(CLASS_NAMES)

_RENAMES = {
    "bronchiectasia": "Bronchiectasis",
    "acute upper respiratory infection": "URTI",
}
_PNEUMONIA = re.compile(r"^\s*pneumonia\s*\(.*\)\s*$", re.IGNORECASE)


def unify_label(raw: str) -> str:
    """Map a source label onto the unified taxonomy; unknown labels pass through."""
    key = raw.strip().lower()
    if key in _RENAMES:
        return _RENAMES[key]
    if _PNEUMONIA.match(raw):
        return "Pneumonia"
    if raw not in CLASS_NAMES:
        log.info("label %r is outside the unified taxonomy", raw)
    return raw


def class_index(name: str) -> int:
    return CLASS_NAMES.index(unify_label(name))


def scaled_counts(divisor: int = 500, floor: int = 2) -> list[int]:
    """Table counts divided by ``divisor`` (rounded up), never below ``floor``."""
    return [max(floor, math.ceil(c / divisor)) for _, c in TAXONOMY_COUNTS]
