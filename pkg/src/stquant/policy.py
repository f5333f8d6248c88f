"""Score fusion, temporal annealing and the score -> bit-width map."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

from .quant import BitWidth
from .stats import DEFAULT_ALPHA, DEFAULT_EPSILON, GlobalEma, LayerStats

DEFAULT_PHI = 7.2
DEFAULT_THRESHOLDS = (6.8, 12.0, 24.0)
DEFAULT_TAU = 500.0
DEFAULT_UPDATE_FREQ = 10
DEFAULT_WARMUP_STEPS = 5


@dataclass(frozen=True)
class PolicyConfig:
    """Knobs of the allocation pipeline.

    ``temporal``/``spatial``/``dual`` switch the annealing bonus, the
    ``v`` ratio and the ``n``/``r`` ratios off (ablations). ``fixed_bits``
    bypasses the map entirely, which turns the optimizer into a uniform
    b-bit baseline that still records scores.
    """

    phi: float = DEFAULT_PHI
    thresholds: tuple[float, float, float] = DEFAULT_THRESHOLDS
    tau: float = DEFAULT_TAU
    alpha: float = DEFAULT_ALPHA
    epsilon: float = DEFAULT_EPSILON
    update_freq: int = DEFAULT_UPDATE_FREQ
    warmup_steps: int = DEFAULT_WARMUP_STEPS
    temporal: bool = True
    spatial: bool = True
    dual: bool = True
    fixed_bits: int | None = None

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds)
        if len(t) != 3 or not (t[0] < t[1] < t[2]):
            raise ValueError(f"thresholds must be 3 strictly increasing values, got {self.thresholds}")
        object.__setattr__(self, "thresholds", t)
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.update_freq < 1:
            raise ValueError("update_freq must be >= 1")
        if self.fixed_bits is not None:
            BitWidth(self.fixed_bits)

    def is_refresh_step(self, t: int) -> bool:
        return t % self.update_freq == 0 or t < self.warmup_steps


@dataclass(frozen=True)
class PolicyRecord:
    layer_id: int
    score: float
    bits: BitWidth


@dataclass(frozen=True)
class BitPolicy:
    step: int
    records: tuple[PolicyRecord, ...] = field(default_factory=tuple)

    @property
    def bits(self) -> dict[int, BitWidth]:
        return {r.layer_id: r.bits for r in self.records}

    def to_bytes(self) -> bytes:
        payload = {
            "step": self.step,
            "records": [[r.layer_id, r.score, int(r.bits)] for r in self.records],
        }
        return json.dumps(payload, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> BitPolicy:
        payload = json.loads(data)
        return cls(
            step=payload["step"],
            records=tuple(PolicyRecord(i, s, BitWidth(b)) for i, s, b in payload["records"]),
        )


def anneal(t: float, tau: float) -> float:
    """``1 + sech(t / tau)``, evaluated without overflow for large ``t``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    x = abs(t / tau)
    e = math.exp(-x)
    return 1.0 + 2.0 * e / (1.0 + e * e)


def default_tau(num_layers: int, batch_size: int, base_tau: float = 500.0, base_batch: int = 256) -> float:
    """Scale the protection window linearly with depth and by
    ``sqrt(base_batch / batch_size)`` with batch size; floored at 1."""
    if num_layers < 1 or batch_size < 1:
        raise ValueError("num_layers and batch_size must be positive")
    return max(1.0, base_tau * (num_layers / 12) * math.sqrt(base_batch / batch_size))


def _log_ratio(x: float, ref: float, eps: float) -> float:
    return math.log2(max(x, eps) / (ref + eps))


def score(
    stats: LayerStats,
    ema: GlobalEma,
    s_t: float,
    phi: float = DEFAULT_PHI,
    epsilon: float = DEFAULT_EPSILON,
    *,
    spatial: bool = True,
    dual: bool = True,
) -> float:
    if not ema.initialized:
        raise ValueError("EMA is not initialized")
    total = phi
    if dual:
        total += _log_ratio(stats.r, ema.r_ema, epsilon)
        total += _log_ratio(stats.n, ema.n_ema, epsilon)
    total += math.log2(s_t)
    if spatial:
        total += _log_ratio(stats.v, ema.v_global_ema, epsilon)
    return total


def map_bits(value: float, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> BitWidth:
    """Half-open intervals; a score equal to a threshold takes the wider width."""
    lo, mid, hi = thresholds
    if value < lo:
        return BitWidth.B4
    if value < mid:
        return BitWidth.B8
    if value < hi:
        return BitWidth.B16
    return BitWidth.B32


def compute_policy(
    all_stats: Sequence[LayerStats],
    ema: GlobalEma,
    t: int,
    config: PolicyConfig = PolicyConfig(),
) -> BitPolicy:
    if not all_stats:
        raise ValueError("empty layer list")
    s_t = anneal(t, config.tau) if config.temporal else 1.0
    records = []
    for st in sorted(all_stats, key=lambda s: s.layer_id):
        sc = score(st, ema, s_t, config.phi, config.epsilon, spatial=config.spatial, dual=config.dual)
        bits = BitWidth(config.fixed_bits) if config.fixed_bits is not None else map_bits(sc, config.thresholds)
        records.append(PolicyRecord(st.layer_id, sc, bits))
    return BitPolicy(step=t, records=tuple(records))


def average_bits(bits: dict[int, int], n_params: dict[int, int]) -> float:
    """Parameter-weighted mean width over layers (m and v weigh equally)."""
    total = sum(n_params[i] for i in bits)
    if total == 0:
        return 0.0
    return sum(2 * n_params[i] * int(b) for i, b in bits.items()) / (2 * total)
