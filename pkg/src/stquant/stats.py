"""Per-layer gradient statistics, global EMAs and the n-r quadrant map."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

DEFAULT_EPSILON = 1e-8
DEFAULT_ALPHA = 0.1


@dataclass(frozen=True)
class LayerStats:
    """Intensity ``n`` (gradient RMS), variation ``r`` (CV of |g|) and
    magnitude ``v`` (mean squared gradient) for one layer at one step."""

    layer_id: int
    n: float
    r: float
    v: float


class Quadrant(enum.Enum):
    CRITICAL = "critical"
    MAGNITUDE_DOMINANT = "magnitude_dominant"
    STRUCTURAL_COMPLEXITY = "structural_complexity"
    REDUNDANT = "redundant"


@dataclass(frozen=True)
class GlobalEma:
    n_ema: float = 0.0
    r_ema: float = 0.0
    v_global_ema: float = 0.0
    alpha: float = DEFAULT_ALPHA
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")


def layer_stats(gradient, layer_id: int = 0, epsilon: float = DEFAULT_EPSILON) -> LayerStats:
    g = np.asarray(gradient, dtype=np.float64).ravel()
    if g.size == 0:
        raise ValueError("empty gradient")
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite gradient")
    v = float(np.mean(g * g))
    mag = np.abs(g)
    # population std (no Bessel correction)
    r = float(np.std(mag) / (np.mean(mag) + epsilon))
    return LayerStats(layer_id=layer_id, n=float(np.sqrt(v)), r=r, v=v)


def update_ema(ema: GlobalEma, stats: Sequence[LayerStats]) -> GlobalEma:
    """Blend the unweighted layer means into the running estimates.

    The first call seeds the EMA with the observed means instead of
    blending against zero.
    """
    if not stats:
        raise ValueError("stats must be non-empty")
    n_mean = float(np.mean([s.n for s in stats]))
    r_mean = float(np.mean([s.r for s in stats]))
    v_mean = float(np.mean([s.v for s in stats]))
    if not ema.initialized:
        return replace(ema, n_ema=n_mean, r_ema=r_mean, v_global_ema=v_mean, initialized=True)
    a = ema.alpha
    return replace(
        ema,
        n_ema=a * n_mean + (1 - a) * ema.n_ema,
        r_ema=a * r_mean + (1 - a) * ema.r_ema,
        v_global_ema=a * v_mean + (1 - a) * ema.v_global_ema,
    )


def classify_quadrant(stats: LayerStats, ema: GlobalEma) -> Quadrant:
    """Place a layer in the n-r plane relative to the global EMAs.

    Ties count as "high", i.e. they resolve toward the more protective zone.
    """
    if not ema.initialized:
        raise ValueError("EMA is not initialized")
    high_n = stats.n >= ema.n_ema
    high_r = stats.r >= ema.r_ema
    if high_n:
        return Quadrant.CRITICAL if high_r else Quadrant.MAGNITUDE_DOMINANT
    return Quadrant.STRUCTURAL_COMPLEXITY if high_r else Quadrant.REDUNDANT
