"""Block-wise codecs for optimizer state buffers.

Two modes share one container type:

* ``LINEAR`` - symmetric absmax scaling, used for the first moment.
* ``LOG`` - uniform grid in the log2 domain with code 0 reserved for exact
  zero, used for the (nonnegative) second moment.

Codes are packed two per byte at 4 bits, one per byte at 8 bits and as
little-endian 16-bit words at 16 bits. Width 32 is a lossless float32
passthrough. Tensors are flattened before blocking; the last block may be
short.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

DEFAULT_BLOCK_SIZE = 256
# Minimum log2-domain span of a block; keeps constant blocks well defined.
LOG_DELTA_FLOOR = 2.0**-20
SCALE_BYTES = 4
# length (u64) + block_size (u32) + bits (u8) + mode (u8) + 2 bytes padding
HEADER_BYTES = 16

_F32_MAX = float(np.finfo(np.float32).max)


class BitWidth(enum.IntEnum):
    B4 = 4
    B8 = 8
    B16 = 16
    B32 = 32


class QuantMode(enum.Enum):
    LINEAR = "linear"
    LOG = "log"


@dataclass(frozen=True, eq=False)
class QuantizedState:
    """A flat tensor held in compressed form.

    ``scales`` has shape ``(n_blocks,)`` for LINEAR (absmax per block) and
    ``(n_blocks, 2)`` for LOG (log2 lower/upper bound per block). All
    metadata is float32.
    """

    codes: np.ndarray
    scales: np.ndarray
    block_size: int
    length: int
    mode: QuantMode
    bits: BitWidth
    raw32: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "bits", BitWidth(self.bits))
        object.__setattr__(self, "mode", QuantMode(self.mode))
        for name in ("codes", "scales", "raw32"):
            arr = getattr(self, name)
            if arr is not None:
                arr.flags.writeable = False

    @property
    def n_blocks(self) -> int:
        if self.bits == BitWidth.B32:
            return 0
        return n_blocks(self.length, self.block_size)

    def byte_breakdown(self) -> tuple[int, int, int]:
        """Return ``(code_bytes, scale_bytes, header_bytes)``."""
        if self.bits == BitWidth.B32:
            return 4 * self.length, 0, HEADER_BYTES
        return int(self.codes.size), SCALE_BYTES * int(self.scales.size), HEADER_BYTES


def n_blocks(length: int, block_size: int) -> int:
    return -(-length // block_size)


def packed_code_bytes(length: int, bits: int) -> int:
    if bits == 32:
        return 0
    return -(-length * bits // 8)


def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack integer codes into a uint8 buffer (two's complement within the width)."""
    codes = np.asarray(codes, dtype=np.int64).ravel()
    if bits == 4:
        nib = (codes & 0xF).astype(np.uint8)
        if nib.size % 2:
            nib = np.append(nib, np.uint8(0))
        return nib[0::2] | (nib[1::2] << 4)
    if bits == 8:
        return (codes & 0xFF).astype(np.uint8)
    if bits == 16:
        return (codes & 0xFFFF).astype("<u2").view(np.uint8).copy()
    raise ValueError(f"cannot pack {bits}-bit codes")


def unpack_codes(buf: np.ndarray, bits: int, length: int, signed: bool) -> np.ndarray:
    buf = np.asarray(buf, dtype=np.uint8).ravel()
    if buf.size != packed_code_bytes(length, bits):
        raise ValueError(
            f"corrupted packing: expected {packed_code_bytes(length, bits)} bytes, got {buf.size}"
        )
    if bits == 4:
        out = np.empty(buf.size * 2, dtype=np.int64)
        out[0::2] = buf & 0xF
        out[1::2] = buf >> 4
        out = out[:length]
        if signed:
            out = np.where(out >= 8, out - 16, out)
        return out
    if bits == 8:
        return buf.view(np.int8 if signed else np.uint8).astype(np.int64)
    if bits == 16:
        return buf.view("<i2" if signed else "<u2").astype(np.int64)
    raise ValueError(f"cannot unpack {bits}-bit codes")


def _as_vector(values) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite value")
    return x


def _check_args(bits, block_size) -> BitWidth:
    bits = BitWidth(bits)
    if bits == BitWidth.B32:
        raise ValueError("passthrough handled by quantize_state")
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    return bits


def _blocks(x: np.ndarray, block_size: int) -> np.ndarray:
    nb = n_blocks(x.size, block_size)
    if nb * block_size == x.size:
        return x.reshape(nb, block_size)
    padded = np.zeros(nb * block_size)
    padded[: x.size] = x
    return padded.reshape(nb, block_size)


def _f32_up(a: np.ndarray) -> np.ndarray:
    f = a.astype(np.float32)
    low = f.astype(np.float64) < a
    f[low] = np.nextafter(f[low], np.float32(np.inf))
    return f


def _f32_down(a: np.ndarray) -> np.ndarray:
    f = a.astype(np.float32)
    high = f.astype(np.float64) > a
    f[high] = np.nextafter(f[high], np.float32(-np.inf))
    return f


def _round_half_away(y: np.ndarray) -> np.ndarray:
    return np.sign(y) * np.floor(np.abs(y) + 0.5)


def _encode_linear(x: np.ndarray, bits: BitWidth, block_size: int) -> tuple[np.ndarray, np.ndarray]:
    blocks = _blocks(x, block_size)
    absmax = np.abs(blocks).max(axis=1) if blocks.size else np.zeros(0)
    if np.any(absmax > _F32_MAX):
        raise ValueError("value exceeds float32 scale range")
    # Rounded up so every |x| / s <= 1 and no code needs clamping.
    scales = _f32_up(absmax)
    qmax = 2 ** (bits - 1) - 1
    safe = np.where(scales > 0, scales.astype(np.float64), 1.0)
    q = _round_half_away(blocks / safe[:, None] * qmax)
    return np.clip(q, -qmax, qmax).astype(np.int64), scales


def _decode_linear(q: np.ndarray, scales: np.ndarray, bits: int, length: int) -> np.ndarray:
    qmax = 2 ** (bits - 1) - 1
    return (q * scales.astype(np.float64)[:, None] / qmax).ravel()[:length]


def _log_delta(bounds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo = bounds[:, 0].astype(np.float64)
    return lo, np.maximum(bounds[:, 1].astype(np.float64) - lo, LOG_DELTA_FLOOR)


def _encode_log(x: np.ndarray, bits: BitWidth, block_size: int) -> tuple[np.ndarray, np.ndarray]:
    if np.any(x < 0):
        raise ValueError("log mode requires nonnegative values")
    blocks = _blocks(x, block_size)
    pos = blocks > 0
    logs = np.log2(np.where(pos, blocks, 1.0))
    has_pos = pos.any(axis=1)
    # log2 is monotone, so block extremes can be taken before the log
    xmin = np.where(pos, blocks, np.inf).min(axis=1, initial=np.inf)
    xmax = blocks.max(axis=1, initial=0.0)
    ymin = np.where(has_pos, np.log2(np.where(has_pos, xmin, 1.0)), 0.0)
    ymax = np.where(has_pos, np.log2(np.where(has_pos, xmax, 1.0)), 0.0)
    # Outward rounding keeps every positive entry inside the stored range.
    # A one-point range rounds both bounds up so every entry clamps to code 1.
    lo32 = np.where(ymin == ymax, _f32_up(ymin), _f32_down(ymin))
    bounds = np.stack([lo32, _f32_up(ymax)], axis=1)
    lo, delta = _log_delta(bounds)
    levels = 2**bits - 2
    z = (logs - lo[:, None]) / delta[:, None] * levels
    q = np.clip(1 + np.floor(z + 0.5), 1, 2**bits - 1)
    return np.where(pos, q, 0).astype(np.int64), bounds


def _decode_log(q: np.ndarray, bounds: np.ndarray, bits: int, length: int) -> np.ndarray:
    lo, delta = _log_delta(bounds)
    levels = 2**bits - 2
    out = np.exp2(lo[:, None] + (q - 1) / levels * delta[:, None])
    out[q == 0] = 0.0
    return out.ravel()[:length]


def _to_blocks(q: np.ndarray, block_size: int) -> np.ndarray:
    nb = n_blocks(q.size, block_size)
    out = np.zeros(nb * block_size, dtype=np.int64)
    out[: q.size] = q
    return out.reshape(nb, block_size)


def _build(x, bits, mode, block_size) -> tuple[QuantizedState, np.ndarray]:
    bits = _check_args(bits, block_size)
    x = _as_vector(x)
    encode = _encode_linear if mode == QuantMode.LINEAR else _encode_log
    q, scales = encode(x, bits, block_size)
    state = QuantizedState(
        codes=pack_codes(q.ravel()[: x.size], bits),
        scales=scales,
        block_size=block_size,
        length=x.size,
        mode=mode,
        bits=bits,
    )
    return state, q


def quantize_linear(values, bits, block_size: int = DEFAULT_BLOCK_SIZE) -> QuantizedState:
    return _build(values, bits, QuantMode.LINEAR, block_size)[0]


def quantize_log(values, bits, block_size: int = DEFAULT_BLOCK_SIZE) -> QuantizedState:
    return _build(values, bits, QuantMode.LOG, block_size)[0]


def quantize_state(values, bits, mode, block_size: int = DEFAULT_BLOCK_SIZE) -> QuantizedState:
    return quantize_roundtrip(values, bits, mode, block_size)[0]


def quantize_roundtrip(values, bits, mode, block_size: int = DEFAULT_BLOCK_SIZE) -> tuple[QuantizedState, np.ndarray]:
    """Quantize and also return ``dequantize(state)`` without unpacking."""
    bits = BitWidth(bits)
    mode = QuantMode(mode)
    if bits == BitWidth.B32:
        x = _as_vector(values)
        if mode == QuantMode.LOG and np.any(x < 0):
            raise ValueError("log mode requires nonnegative values")
        state = QuantizedState(
            codes=np.zeros(0, dtype=np.uint8),
            scales=np.zeros(0, dtype=np.float32),
            block_size=block_size,
            length=x.size,
            mode=mode,
            bits=bits,
            raw32=x.astype(np.float32),
        )
        return state, state.raw32.astype(np.float64)
    state, q = _build(values, bits, mode, block_size)
    decode = _decode_linear if mode == QuantMode.LINEAR else _decode_log
    return state, decode(q, state.scales, bits, state.length)


def dequantize(state: QuantizedState) -> np.ndarray:
    """Restore a float64 vector of ``state.length`` elements."""
    if state.bits == BitWidth.B32:
        if state.raw32 is None or state.raw32.size != state.length:
            raise ValueError("corrupted passthrough buffer")
        return state.raw32.astype(np.float64)
    linear = state.mode == QuantMode.LINEAR
    q = unpack_codes(state.codes, state.bits, state.length, signed=linear)
    nb = n_blocks(state.length, state.block_size)
    expected_shape = (nb,) if linear else (nb, 2)
    if state.scales.shape != expected_shape:
        raise ValueError(f"corrupted scales: expected shape {expected_shape}, got {state.scales.shape}")
    decode = _decode_linear if linear else _decode_log
    return decode(_to_blocks(q, state.block_size), state.scales, state.bits, state.length)


def packed_bytes(state: QuantizedState) -> int:
    """Total storage: code bytes + 4 bytes per scale scalar + ``HEADER_BYTES``.

    >>> s = quantize_linear(np.ones(1000), 4, 256)
    >>> s.byte_breakdown(), packed_bytes(s)
    ((500, 16, 16), 532)
    """
    return sum(state.byte_breakdown())


def linear_error_bound(state: QuantizedState) -> np.ndarray:
    """Per-block worst-case absolute roundtrip error ``s_k / (2Q)``."""
    qmax = 2 ** (state.bits - 1) - 1
    return state.scales.astype(np.float64) / (2 * qmax)


def log_relative_error_bound(state: QuantizedState) -> np.ndarray:
    """Per-block relative error bound ``2**(delta_k / (2**bits - 2) + u_k) - 1``.

    ``u_k`` is one float32 ulp of the stored lower bound, covering one-point
    blocks whose bounds cannot hold ``log2(x)`` exactly.
    """
    lo, delta = _log_delta(state.scales)
    ulp = np.spacing(np.abs(lo).astype(np.float32)).astype(np.float64)
    return np.exp2(delta / (2**state.bits - 2) + ulp) - 1


def ideal_bits_bytes(n_params: int, bits: int) -> float:
    """Code-only storage for both moments of a layer, ``2 * N * b / 8``."""
    return 2 * n_params * int(bits) / 8


__all__ = [
    "BitWidth",
    "QuantMode",
    "QuantizedState",
    "DEFAULT_BLOCK_SIZE",
    "LOG_DELTA_FLOOR",
    "HEADER_BYTES",
    "SCALE_BYTES",
    "quantize_linear",
    "quantize_log",
    "quantize_state",
    "quantize_roundtrip",
    "dequantize",
    "packed_bytes",
    "pack_codes",
    "unpack_codes",
    "packed_code_bytes",
    "n_blocks",
    "linear_error_bound",
    "log_relative_error_bound",
    "ideal_bits_bytes",
]
