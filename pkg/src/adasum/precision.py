"""Dynamic scaling for half-precision communication of effective gradients.

Before an allreduce the float64 delta is multiplied by a power-of-two scale
and rounded to binary16. After the allreduce the result is checked: any
NaN or infinity means the scale was too large, so the step is skipped and the
scale backs off. A run of clean steps grows the scale again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import as_tensor, has_nonfinite, quantize_f16, widen

MIN_SCALE = 2.0 ** -10
MAX_SCALE = 2.0 ** 30


@dataclass
class ScaleState:
    scale: float = 2.0 ** 15
    good_steps: int = 0
    growth_interval: int = 2000
    backoff: float = 2.0
    growth: float = 2.0
    accepted: int = 0
    rejected: int = 0

    def __post_init__(self):
        m, _ = math.frexp(self.scale)
        if self.scale <= 0 or m != 0.5:
            raise ValueError(f"scale must be a positive power of two, got {self.scale}")
        if self.growth_interval < 1:
            raise ValueError("growth_interval must be >= 1")

    @property
    def accept_rate(self) -> float:
        total = self.accepted + self.rejected
        return self.accepted / total if total else 1.0


def scaled_cast(t, state: ScaleState) -> np.ndarray:
    """``quantize_f16(scale * t)``; overflow shows up as infinities."""
    return quantize_f16(state.scale * widen(as_tensor(t)))


def check_and_update(result, state: ScaleState) -> np.ndarray | None:
    """Unscale an allreduced tensor, or return ``None`` if it overflowed.

    Updates ``state`` in place. Because every rank sees the same allreduced
    values, all ranks reach the same decision.
    """
    result = as_tensor(result)
    if has_nonfinite(result):
        state.scale = max(state.scale / state.backoff, MIN_SCALE)
        state.good_steps = 0
        state.rejected += 1
        return None
    unscaled = widen(result) / state.scale
    state.good_steps += 1
    state.accepted += 1
    if state.good_steps >= state.growth_interval:
        state.scale = min(state.scale * state.growth, MAX_SCALE)
        state.good_steps = 0
    return unscaled
