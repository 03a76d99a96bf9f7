"""
Shared test helpers for synthetic-data statistics.
"""

from __future__ import annotations

import math

import numpy as np

from src.config import NUM_CLASSES


def class_presence(masks: list[np.ndarray], num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Fraction of masks in which each class appears."""
    present = np.zeros(num_classes)
    for m in masks:
        present[np.unique(m)] += 1
    return present / max(len(masks), 1)


def disk_area(r: float) -> float:
    return math.pi * r * r
