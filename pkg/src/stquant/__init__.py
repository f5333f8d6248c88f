"""Spatio-temporal adaptive bit-width allocation for quantized AdamW states."""

from .dist import all_reduce_stats, broadcast_policy, distributed_layer_stats, local_moments
from .optim import AdamConfig, AdamWOracle, MemoryReport, STQuantAdamW, memory_report, oracle_step
from .policy import BitPolicy, PolicyConfig, anneal, compute_policy, default_tau, map_bits, score
from .quant import BitWidth, QuantizedState, QuantMode, dequantize, packed_bytes, quantize_state
from .stats import GlobalEma, LayerStats, Quadrant, classify_quadrant, layer_stats, update_ema

__version__ = "0.1.0"
