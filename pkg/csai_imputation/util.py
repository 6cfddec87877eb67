"""Miscellaneous numeric helpers.

Rounding rules live here so that mask counts, apportionment and report values are
produced the same way everywhere in the code base.
"""

from __future__ import annotations

import math
import zlib
from typing import Sequence

import numpy as np

__all__ = [
    "round_half_away",
    "largest_remainder",
    "round_significant",
    "derive_seed",
]


def round_half_away(value: float) -> int:
    """Round *value* to the nearest integer, ties away from zero.

    Examples
    --------
    ``2.5`` becomes ``3`` and ``-2.5`` becomes ``-3`` (Python's ``round`` gives ``2``).
    """

    return int(math.copysign(math.floor(abs(value) + 0.5), value))


def largest_remainder(
    quotas: Sequence[float], total: int, caps: Sequence[int] | None = None
) -> list[int]:
    """Apportion *total* integer units proportionally to *quotas*.

    Each entry first receives ``floor(quota)``; the units still missing go one at a
    time to the entries with the largest fractional parts (lowest index wins a tie).
    Entries already at their cap never receive an extra unit.

    Raises
    ------
    ValueError
        If the floors exceed ``total`` or the caps leave no room for the remainder.
    """

    floors = [int(math.floor(q + 1e-12)) for q in quotas]
    if caps is not None:
        floors = [min(f, c) for f, c in zip(floors, caps)]
    missing = total - sum(floors)
    if missing < 0:
        raise ValueError("quotas exceed the total to apportion")
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - floors[i]), i))
    counts = list(floors)
    for i in order:
        if missing == 0:
            break
        if caps is not None and counts[i] >= caps[i]:
            continue
        counts[i] += 1
        missing -= 1
    if missing:
        raise ValueError("caps leave no room to apportion the remainder")
    return counts


def round_significant(value: float, digits: int = 12) -> float:
    """Round *value* to *digits* significant digits; non-finite values pass through."""

    if value == 0 or not math.isfinite(value):
        return value
    return float(f"{value:.{digits}g}")


def derive_seed(seed: int, *keys: int | str) -> int:
    """Return a child seed of *seed* for the stream identified by *keys*.

    Child streams are independent of each other and of the parent, so folds, epochs and
    splits never share random numbers. String keys are hashed with CRC-32.
    """

    entropy = [k if isinstance(k, int) else zlib.crc32(k.encode()) for k in keys]
    sequence = np.random.SeedSequence([seed, *entropy])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])
