"""Random (RM) and non-random (NM) missing-data masks.

Masks are boolean, ``True`` = observed.  NM works on sensor-day fibers, so its
input mask is in daily layout (D, S, N); use :func:`corrupt` for sliced tensors.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .data import TrafficSeriesTensor, reslice


class Pattern(str, enum.Enum):
    RM = "rm"
    NM = "nm"


@dataclass(frozen=True)
class CorruptionSpec:
    pattern: Pattern
    rate: float
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pattern", Pattern(self.pattern))
        _check_rate(self.rate)


def _check_rate(rate: float) -> None:
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"missing rate must lie in [0, 1], got {rate}")


def rng_for(seed: int, pattern: Pattern | str, rate: float) -> np.random.Generator:
    """Counter-based stream keyed by (seed, pattern, rate)."""
    tag = 1 if Pattern(pattern) is Pattern.RM else 2
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag, int(round(rate * 1_000_000))])
    return np.random.Generator(np.random.Philox(ss))


def apply_random_missing(mask_in: np.ndarray, rate: float, seed: int) -> np.ndarray:
    _check_rate(rate)
    mask_in = np.asarray(mask_in, dtype=bool)
    drop = rng_for(seed, Pattern.RM, rate).random(mask_in.shape) < rate
    return mask_in & ~drop


def apply_nonrandom_missing(mask_in: np.ndarray, rate: float, seed: int) -> np.ndarray:
    """Blank whole (day, sensor) fibers, in random order, until the missing fraction reaches ``rate``."""
    _check_rate(rate)
    mask_in = np.asarray(mask_in, dtype=bool)
    if mask_in.ndim != 3:
        raise ValueError(f"NM masks need daily layout (D, S, N), got shape {mask_in.shape}")
    d, s, n = mask_in.shape
    total = mask_in.size
    missing0 = total - int(mask_in.sum())
    if missing0 >= rate * total:
        return mask_in.copy()
    order = rng_for(seed, Pattern.NM, rate).permutation(d * s)
    gained = mask_in.reshape(d * s, n).sum(axis=1)[order]
    reached = np.nonzero(missing0 + np.cumsum(gained) >= rate * total - 1e-9)[0]
    take = order[: (reached[0] + 1 if reached.size else order.size)]
    out = mask_in.copy().reshape(d * s, n)
    out[take] = False
    return out.reshape(d, s, n)


def corrupt(t: TrafficSeriesTensor, spec: CorruptionSpec) -> TrafficSeriesTensor:
    """Apply ``spec`` to a sliced tensor; NM fibers span whole days across slices."""
    _, daily_mask = t.daily()
    if spec.pattern is Pattern.RM:
        new = apply_random_missing(daily_mask, spec.rate, spec.seed)
    else:
        new = apply_nonrandom_missing(daily_mask, spec.rate, spec.seed)
    return t.with_mask(reslice(new, t.slices_per_day))
