"""
PSMT — Partition protocol

Holds out ⌈N·ratio⌉ items of a fully labelled index as the labelled subset;
the remainder become unlabelled (masks stay on disk, they are only hidden).
Ceiling rounding gives 662 labelled items for 1/16 of 10 582.
"""

from __future__ import annotations

import logging
import math
from fractions import Fraction

import numpy as np

from data_loader.dataset import DatasetIndex
from src.errors import ConfigError

log = logging.getLogger(__name__)


def parse_ratio(ratio: str | float | Fraction) -> Fraction:
    """Accept "1/8", 0.125 or Fraction(1, 8); must lie in (0, 1]."""
    try:
        value = Fraction(ratio).limit_denominator(1_000_000) if not isinstance(ratio, Fraction) else ratio
    except (ValueError, ZeroDivisionError, TypeError) as exc:
        raise ConfigError(f"invalid labelled ratio {ratio!r}") from exc
    if not 0 < value <= 1:
        raise ConfigError(f"labelled ratio must lie in (0, 1], got {ratio!r}")
    return value


def labelled_count(n_items: int, ratio: Fraction) -> int:
    return math.ceil(n_items * ratio)


def default_split_name(ratio: Fraction, seed: int) -> str:
    return f"ratio_{ratio.numerator}-{ratio.denominator}_seed{seed}"


def split_partition(
    full: DatasetIndex,
    ratio: str | float | Fraction,
    seed: int,
    name: str | None = None,
    write: bool = True,
) -> DatasetIndex:
    """Seeded labelled/unlabelled partition of `full`; writes the manifest unless `write` is False."""
    if full.unlabelled:
        raise ConfigError(f"split {full.name!r} already has unlabelled items; partition a fully labelled index")
    frac = parse_ratio(ratio)
    n = len(full.labelled)
    k = labelled_count(n, frac)
    if k == 0:
        raise ConfigError(f"ratio {frac} of {n} items yields no labelled items")

    chosen = set(int(i) for i in np.random.default_rng(seed).permutation(n)[:k])
    labelled = [item for j, item in enumerate(full.labelled) if j in chosen]
    unlabelled = [item for j, item in enumerate(full.labelled) if j not in chosen]

    split = DatasetIndex(
        root=full.root,
        labelled=labelled,
        unlabelled=unlabelled,
        num_classes=full.num_classes,
        name=name or default_split_name(frac, seed),
        ratio=str(frac),
        split_seed=int(seed),
    )
    log.info("Partition %s of %d items: %d labelled / %d unlabelled", frac, n, len(labelled), len(unlabelled))
    if write:
        split.save()
    return split
