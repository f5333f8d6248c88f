"""AdamW with layer-wise adaptive-precision optimizer states, and an FP32 oracle.

States live only in quantized form between steps: each step dequantizes the
previous ``m``/``v``, advances them, requantizes at the layer's current
width and then uses the *restored* values for the parameter update.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dist import distributed_layer_stats
from .policy import BitPolicy, PolicyConfig, compute_policy
from .quant import (
    DEFAULT_BLOCK_SIZE,
    BitWidth,
    QuantizedState,
    QuantMode,
    dequantize,
    ideal_bits_bytes,
    quantize_roundtrip,
    quantize_state,
)
from .stats import GlobalEma, LayerStats, update_ema

INITIAL_BITS = BitWidth.B16


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    block_size: int = DEFAULT_BLOCK_SIZE
    workers: int = 1
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.block_size < 1 or self.workers < 1:
            raise ValueError("block_size and workers must be >= 1")

    @property
    def eps(self) -> float:
        # one epsilon shared by the update denominator and the statistics
        return self.policy.epsilon


@dataclass
class LayerOptState:
    m_q: QuantizedState
    v_q: QuantizedState
    bits: BitWidth
    steps_seen: int = 0

    @classmethod
    def zeros(cls, size: int, bits: BitWidth, block_size: int) -> LayerOptState:
        z = np.zeros(size)
        return cls(
            quantize_state(z, bits, QuantMode.LINEAR, block_size),
            quantize_state(z, bits, QuantMode.LOG, block_size),
            BitWidth(bits),
        )


@dataclass
class StepTelemetry:
    t: int
    refreshed: bool
    bits: list[BitWidth]
    policy: BitPolicy | None = None
    stats: list[LayerStats] | None = None
    m_error: list[float] = field(default_factory=list)
    v_error: list[float] = field(default_factory=list)


def _check_inputs(params, grads):
    if len(params) != len(grads):
        raise ValueError(f"got {len(params)} parameter tensors and {len(grads)} gradients")
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"layer {i}: gradient shape {g.shape} != parameter shape {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"layer {i}: non-finite gradient")
        out.append(g)
    return out


class STQuantAdamW:
    """Quantized-state AdamW with spatio-temporal bit-width allocation.

    Parameters are updated in place. Statistics are refreshed (and the
    policy recomputed) when ``t % U == 0`` or ``t < warmup_steps``.
    """

    def __init__(self, sizes: Sequence[int], config: AdamConfig = AdamConfig()):
        self.config = config
        self.sizes = [int(s) for s in sizes]
        self.t = 0
        self.ema = GlobalEma(alpha=config.policy.alpha)
        self.policy: BitPolicy | None = None
        self.states = [LayerOptState.zeros(n, INITIAL_BITS, config.block_size) for n in self.sizes]

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], config: AdamConfig = AdamConfig()) -> STQuantAdamW:
        return cls([np.size(p) for p in params], config)

    def _refresh(self, grads: list[np.ndarray], t: int) -> list[LayerStats]:
        pc = self.config.policy
        stats, _ = distributed_layer_stats(grads, self.config.workers, pc.epsilon)
        self.ema = update_ema(self.ema, stats)
        self.policy = compute_policy(stats, self.ema, t, pc)
        for st, rec in zip(self.states, self.policy.records):
            st.bits = rec.bits
        return stats

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> StepTelemetry:
        grads = _check_inputs(params, grads)
        if [g.size for g in grads] != self.sizes:
            raise ValueError("gradient sizes do not match optimizer layout")
        cfg = self.config
        t = self.t + 1
        refreshed = cfg.policy.is_refresh_step(t)
        stats = self._refresh(grads, t) if refreshed else None

        b1, b2, lr, wd, eps = cfg.beta1, cfg.beta2, cfg.lr, cfg.weight_decay, cfg.eps
        bc1 = 1 - b1**t
        bc2 = 1 - b2**t
        tel = StepTelemetry(t, refreshed, [s.bits for s in self.states], self.policy if refreshed else None, stats)
        for p, g, st in zip(params, grads, self.states):
            g = g.ravel()
            m = b1 * dequantize(st.m_q) + (1 - b1) * g
            v = b2 * dequantize(st.v_q) + (1 - b2) * (g * g)
            st.m_q, m_hat = quantize_roundtrip(m, st.bits, QuantMode.LINEAR, cfg.block_size)
            st.v_q, v_hat = quantize_roundtrip(v, st.bits, QuantMode.LOG, cfg.block_size)
            st.steps_seen += 1
            update = (m_hat / bc1) / (np.sqrt(v_hat / bc2) + eps)
            flat = p.reshape(-1)
            flat[:] = flat * (1 - lr * wd) - lr * update
            tel.m_error.append(float(np.max(np.abs(m - m_hat), initial=0.0)))
            tel.v_error.append(float(np.max(np.abs(v - v_hat), initial=0.0)))
        self.t = t
        return tel

    def memory_report(self, names: Sequence[str] | None = None) -> MemoryReport:
        return memory_report(self.states, names)


def oracle_step(params, grads, config: AdamConfig, m: list[np.ndarray], v: list[np.ndarray], t: int) -> None:
    """Plain AdamW with float32 moment buffers; updates params, m, v in place."""
    grads = _check_inputs(params, grads)
    b1, b2, lr, wd, eps = config.beta1, config.beta2, config.lr, config.weight_decay, config.eps
    bc1 = 1 - b1**t
    bc2 = 1 - b2**t
    for p, g, m_i, v_i in zip(params, grads, m, v):
        g = g.ravel()
        m_i[:] = b1 * m_i.astype(np.float64) + (1 - b1) * g
        v_i[:] = b2 * v_i.astype(np.float64) + (1 - b2) * (g * g)
        update = (m_i.astype(np.float64) / bc1) / (np.sqrt(v_i.astype(np.float64) / bc2) + eps)
        flat = p.reshape(-1)
        flat[:] = flat * (1 - lr * wd) - lr * update


class AdamWOracle:
    """Full-precision (FP32 state) AdamW baseline."""

    def __init__(self, sizes: Sequence[int], config: AdamConfig = AdamConfig()):
        self.config = config
        self.sizes = [int(s) for s in sizes]
        self.t = 0
        self.m = [np.zeros(n, dtype=np.float32) for n in self.sizes]
        self.v = [np.zeros(n, dtype=np.float32) for n in self.sizes]

    @classmethod
    def for_params(cls, params, config: AdamConfig = AdamConfig()) -> AdamWOracle:
        return cls([np.size(p) for p in params], config)

    def step(self, params, grads) -> None:
        oracle_step(params, grads, self.config, self.m, self.v, self.t + 1)
        self.t += 1

    def memory_report(self, names: Sequence[str] | None = None) -> MemoryReport:
        states = [
            LayerOptState(
                quantize_state(m, 32, QuantMode.LINEAR), quantize_state(v, 32, QuantMode.LOG), BitWidth.B32
            )
            for m, v in zip(self.m, self.v)
        ]
        return memory_report(states, names)


@dataclass(frozen=True)
class LayerMemory:
    layer_id: int
    name: str
    n_params: int
    bits: int
    ideal_bytes: float
    code_bytes: int
    scale_bytes: int
    header_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.code_bytes + self.scale_bytes + self.header_bytes


@dataclass(frozen=True)
class MemoryReport:
    layers: tuple[LayerMemory, ...]

    @property
    def n_params(self) -> int:
        return sum(l.n_params for l in self.layers)

    @property
    def total_bytes(self) -> int:
        return sum(l.total_bytes for l in self.layers)

    @property
    def ideal_bytes(self) -> float:
        return sum(l.ideal_bytes for l in self.layers)

    @property
    def baseline_bytes(self) -> float:
        """Both moments at 32 bits, codes only."""
        return ideal_bits_bytes(self.n_params, 32)

    @property
    def scale_bytes(self) -> int:
        return sum(l.scale_bytes for l in self.layers)

    @property
    def average_bits(self) -> float:
        if self.n_params == 0:
            return 0.0
        return 8 * self.ideal_bytes / (2 * self.n_params)

    @property
    def saved_vs_32bit_pct(self) -> float:
        return 100 * (1 - self.average_bits / 32)

    @property
    def saved_vs_8bit_pct(self) -> float:
        return 100 * (1 - self.average_bits / 8)

    @property
    def actual_saved_vs_32bit_pct(self) -> float:
        """Savings including scale metadata and headers."""
        if self.baseline_bytes == 0:
            return 0.0
        return 100 * (1 - self.total_bytes / self.baseline_bytes)

    def to_dict(self) -> dict:
        return {
            "average_bits": self.average_bits,
            "n_params": self.n_params,
            "ideal_bytes": self.ideal_bytes,
            "baseline_bytes": self.baseline_bytes,
            "total_bytes": self.total_bytes,
            "scale_bytes": self.scale_bytes,
            "saved_vs_32bit_pct": self.saved_vs_32bit_pct,
            "saved_vs_8bit_pct": self.saved_vs_8bit_pct,
            "actual_saved_vs_32bit_pct": self.actual_saved_vs_32bit_pct,
            "layers": [
                {
                    "id": l.layer_id,
                    "name": l.name,
                    "n_params": l.n_params,
                    "bits": l.bits,
                    "ideal_bytes": l.ideal_bytes,
                    "code_bytes": l.code_bytes,
                    "scale_bytes": l.scale_bytes,
                    "header_bytes": l.header_bytes,
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> MemoryReport:
        return cls(
            tuple(
                LayerMemory(
                    d["id"], d["name"], d["n_params"], d["bits"], d["ideal_bytes"],
                    d["code_bytes"], d["scale_bytes"], d["header_bytes"],
                )
                for d in data["layers"]
            )
        )


def memory_report(states: Sequence[LayerOptState], names: Sequence[str] | None = None) -> MemoryReport:
    layers = []
    for i, st in enumerate(states):
        n = st.m_q.length
        mc, ms, mh = st.m_q.byte_breakdown()
        vc, vs, vh = st.v_q.byte_breakdown()
        ideal = (n * int(st.m_q.bits) + n * int(st.v_q.bits)) / 8
        layers.append(
            LayerMemory(
                i, names[i] if names else f"layer{i}", n, int(st.bits), ideal, mc + vc, ms + vs, mh + vh
            )
        )
    return MemoryReport(tuple(layers))
