import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from stquant.quant import (
    LOG_DELTA_FLOOR,
    BitWidth,
    QuantMode,
    dequantize,
    linear_error_bound,
    log_relative_error_bound,
    pack_codes,
    packed_bytes,
    quantize_linear,
    quantize_log,
    quantize_roundtrip,
    quantize_state,
    unpack_codes,
)


# ---------------------------------------------------------------------------
# scalar reference codecs (independent of the vectorized path)
# ---------------------------------------------------------------------------

def ref_linear_codes(values, bits, scale):
    qmax = 2 ** (bits - 1) - 1
    out = []
    for x in values:
        if scale == 0:
            out.append(0)
            continue
        y = x / scale * qmax
        q = math.floor(abs(y) + 0.5)
        out.append(int(math.copysign(min(q, qmax), y)) if q else 0)
    return out


def ref_log_codes(values, bits, lo, hi):
    levels = 2**bits - 2
    delta = max(hi - lo, LOG_DELTA_FLOOR)
    out = []
    for x in values:
        if x == 0:
            out.append(0)
            continue
        z = (math.log2(x) - lo) / delta * levels
        out.append(int(min(max(1 + math.floor(z + 0.5), 1), 2**bits - 1)))
    return out


def ref_pack(codes, bits):
    """Bit-serial little-endian packing via one big Python int."""
    acc = 0
    mask = (1 << bits) - 1
    for i, c in enumerate(codes):
        acc |= (c & mask) << (i * bits)
    n = -(-len(codes) * bits // 8)
    return list(acc.to_bytes(n, "little")) if n else []


def codes_of(state):
    return unpack_codes(state.codes, state.bits, state.length, state.mode == QuantMode.LINEAR)


# ---------------------------------------------------------------------------
# worked examples
# ---------------------------------------------------------------------------

def test_linear_zero_block():
    s = quantize_linear([0.0, 0.0, 0.0, 0.0], 8, 4)
    assert codes_of(s).tolist() == [0, 0, 0, 0]
    assert s.scales.tolist() == [0.0]
    assert dequantize(s).tolist() == [0.0, 0.0, 0.0, 0.0]


def test_linear_worked_example_rounds_half_away():
    s = quantize_linear([1.0, -1.0, 0.5, 0.0], 8, 4)
    assert s.scales.tolist() == [1.0]
    assert codes_of(s).tolist() == [127, -127, 64, 0]
    np.testing.assert_array_equal(dequantize(s), [1.0, -1.0, 64 / 127, 0.0])
    assert dequantize(s)[2] == pytest.approx(0.50394, abs=1e-5)


def test_linear_4bit_absmax_exact():
    x = np.array([0.7, -0.7], dtype=np.float32)
    s = quantize_linear(x, 4, 2)
    assert codes_of(s).tolist() == [7, -7]
    np.testing.assert_array_equal(dequantize(s), x.astype(np.float64))


def test_log_all_zero():
    s = quantize_log([0.0, 0.0, 0.0], 4, 3)
    assert codes_of(s).tolist() == [0, 0, 0]
    assert s.scales.tolist() == [[0.0, 0.0]]
    assert dequantize(s).tolist() == [0.0, 0.0, 0.0]


def test_log_endpoints_exact():
    s = quantize_log([1.0, 4.0], 4, 2)
    assert s.scales.tolist() == [[0.0, 2.0]]
    assert codes_of(s).tolist() == [1, 15]
    assert dequantize(s).tolist() == [1.0, 4.0]


@pytest.mark.parametrize("bits", [4, 8, 16])
@pytest.mark.parametrize("c", [0.25, 8.0, 2.0**-30])
def test_log_single_value_power_of_two_exact(bits, c):
    s = quantize_log([c], bits, 256)
    assert codes_of(s).tolist() == [1]
    assert dequantize(s).tolist() == [c]


@pytest.mark.parametrize("bits", [4, 8, 16])
@pytest.mark.parametrize("c", [3.0, 1e-9, 0.1234])
def test_log_single_value_general(bits, c):
    # float32 log-domain bounds: exact up to the bound's float32 rounding
    s = quantize_log([c], bits, 256)
    assert codes_of(s).tolist() == [1]
    lo = float(s.scales[0, 0])
    assert dequantize(s)[0] == 2.0**lo
    assert dequantize(s)[0] == pytest.approx(c, rel=abs(math.log2(c)) * 2**-23 + 1e-15)


def test_error_messages():
    with pytest.raises(ValueError, match="non-finite value"):
        quantize_linear([1.0, np.nan], 8)
    with pytest.raises(ValueError, match="non-finite value"):
        quantize_log([np.inf], 8)
    with pytest.raises(ValueError, match="passthrough handled by quantize_state"):
        quantize_linear([1.0], 32)
    with pytest.raises(ValueError, match="log mode requires nonnegative values"):
        quantize_log([1.0, -1e-30], 8)
    with pytest.raises(ValueError):
        BitWidth(5)
    with pytest.raises(ValueError):
        quantize_linear([1.0], 8, 0)


def test_corrupted_packing_rejected():
    s = quantize_linear(np.arange(10.0), 4, 4)
    bad = type(s)(s.codes[:-1].copy(), s.scales.copy(), s.block_size, s.length, s.mode, s.bits)
    with pytest.raises(ValueError, match="corrupted packing"):
        dequantize(bad)
    bad_scales = type(s)(s.codes.copy(), s.scales[:-1].copy(), s.block_size, s.length, s.mode, s.bits)
    with pytest.raises(ValueError, match="corrupted scales"):
        dequantize(bad_scales)


def test_state_is_immutable():
    s = quantize_linear(np.arange(10.0), 8, 4)
    with pytest.raises(ValueError):
        s.codes[0] = 1
    with pytest.raises(AttributeError):
        s.bits = BitWidth.B4


# ---------------------------------------------------------------------------
# dispatch and passthrough
# ---------------------------------------------------------------------------

def test_passthrough_bit_exact():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(1000).astype(np.float32)
    s = quantize_state(x, 32, QuantMode.LINEAR, 256)
    assert s.codes.size == 0 and s.scales.size == 0
    assert s.raw32.dtype == np.float32
    np.testing.assert_array_equal(dequantize(s), x.astype(np.float64))


def test_dispatch_matches_direct_calls():
    rng = np.random.default_rng(1)
    m = rng.standard_normal(1000)
    v = m * m
    a, b = quantize_state(m, 8, QuantMode.LINEAR, 256), quantize_linear(m, 8, 256)
    assert a.codes.tobytes() == b.codes.tobytes() and a.scales.tobytes() == b.scales.tobytes()
    a, b = quantize_state(v, 4, QuantMode.LOG, 256), quantize_log(v, 4, 256)
    assert a.codes.tobytes() == b.codes.tobytes() and a.scales.tobytes() == b.scales.tobytes()
    assert a.mode == QuantMode.LOG and a.bits == 4


@pytest.mark.parametrize("mode", list(QuantMode))
@pytest.mark.parametrize("bits", [4, 8, 16, 32])
def test_roundtrip_helper_matches_dequantize(mode, bits):
    rng = np.random.default_rng(bits)
    x = rng.standard_normal(777)
    if mode == QuantMode.LOG:
        x = x * x
    state, restored = quantize_roundtrip(x, bits, mode, 100)
    np.testing.assert_array_equal(restored, dequantize(state))


# ---------------------------------------------------------------------------
# agreement with the scalar reference
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("bits", [4, 8, 16])
def test_linear_codes_match_reference(bits):
    rng = np.random.default_rng(bits)
    x = rng.standard_normal(1000) * np.exp(rng.standard_normal(1000))
    s = quantize_linear(x, bits, 64)
    got = codes_of(s)
    for k in range(s.n_blocks):
        blk = x[k * 64:(k + 1) * 64].tolist()
        assert got[k * 64:(k + 1) * 64].tolist() == ref_linear_codes(blk, bits, float(s.scales[k]))
        assert float(s.scales[k]) >= max(abs(v) for v in blk)


@pytest.mark.parametrize("bits", [4, 8, 16])
def test_log_codes_match_reference(bits):
    rng = np.random.default_rng(bits)
    x = np.exp(rng.standard_normal(1000) * 6)
    x[::17] = 0.0
    s = quantize_log(x, bits, 64)
    got = codes_of(s)
    for k in range(s.n_blocks):
        blk = x[k * 64:(k + 1) * 64].tolist()
        lo, hi = (float(b) for b in s.scales[k])
        assert got[k * 64:(k + 1) * 64].tolist() == ref_log_codes(blk, bits, lo, hi)
        pos = [math.log2(v) for v in blk if v > 0]
        assert lo <= min(pos) and hi >= max(pos)


# ---------------------------------------------------------------------------
# packing
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("bits", [4, 8, 16])
@pytest.mark.parametrize("signed", [True, False])
def test_pack_unpack_identity_all_lengths(bits, signed):
    rng = np.random.default_rng(bits + signed)
    lo, hi = (-(2 ** (bits - 1)), 2 ** (bits - 1)) if signed else (0, 2**bits)
    for length in range(0, 1026):
        codes = rng.integers(lo, hi, size=length)
        buf = pack_codes(codes, bits)
        assert buf.size == -(-length * bits // 8)
        np.testing.assert_array_equal(unpack_codes(buf, bits, length, signed), codes)


@pytest.mark.parametrize("bits", [4, 8, 16])
def test_pack_layout_matches_bitserial_reference(bits):
    rng = np.random.default_rng(7)
    codes = rng.integers(-(2 ** (bits - 1)), 2 ** (bits - 1), size=37)
    assert pack_codes(codes, bits).tolist() == ref_pack(codes.tolist(), bits)


# ---------------------------------------------------------------------------
# byte accounting
# ---------------------------------------------------------------------------

def test_packed_bytes_examples():
    x = np.linspace(-1, 1, 1000)
    s4 = quantize_state(x, 4, QuantMode.LINEAR, 256)
    assert s4.byte_breakdown()[:2] == (500, 16)
    s32 = quantize_state(x, 32, QuantMode.LINEAR, 256)
    assert s32.byte_breakdown()[:2] == (4000, 0)
    s8 = quantize_state(np.abs(x), 8, QuantMode.LOG, 256)
    assert s8.byte_breakdown()[:2] == (1000, 32)
    hdr = s4.byte_breakdown()[2]
    assert packed_bytes(s4) == 500 + 16 + hdr
    assert packed_bytes(s32) == 4000 + hdr


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False, width=64)
vectors = hnp.arrays(np.float64, st.integers(1, 300), elements=finite)


@settings(max_examples=200, deadline=None)
@given(x=vectors, bits=st.sampled_from([4, 8, 16]), block=st.integers(1, 64))
def test_linear_error_bound_and_sign(x, bits, block):
    s = quantize_linear(x, bits, block)
    xh = dequantize(s)
    bound = np.repeat(linear_error_bound(s), block)[: x.size]
    assert np.all(np.abs(x - xh) <= bound * (1 + 1e-12))
    q = codes_of(s)
    nz = q != 0
    assert np.all(np.sign(xh[nz]) == np.sign(x[nz]))
    assert np.all(xh[x == 0] == 0)


@settings(max_examples=200, deadline=None)
@given(
    x=hnp.arrays(np.float64, st.integers(1, 300), elements=st.floats(0, 1e30, allow_nan=False)),
    bits=st.sampled_from([4, 8, 16]),
    block=st.integers(1, 64),
)
def test_log_nonnegative_monotone_and_bounded(x, bits, block):
    s = quantize_log(x, bits, block)
    xh = dequantize(s)
    assert np.all(xh >= 0)
    assert np.all((xh == 0) == (x == 0))
    bound = np.repeat(log_relative_error_bound(s), block)[: x.size]
    pos = x > 0
    assert np.all(np.abs(xh[pos] / x[pos] - 1) <= bound[pos] + 1e-12)
    for k in range(0, x.size, block):
        order = np.argsort(x[k:k + block], kind="stable")
        assert np.all(np.diff(xh[k:k + block][order]) >= 0)


def test_error_decreases_with_bits():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2000, 256))
    med = {}
    for bits in (4, 8, 16):
        err = np.abs(dequantize(quantize_linear(x, bits, 256)) - x.ravel()).reshape(2000, 256).max(axis=1)
        med[bits] = np.median(err)
    assert med[16] <= med[8] <= med[4]
    v = x * x
    rel = {}
    for bits in (4, 8, 16):
        vh = dequantize(quantize_log(v, bits, 256))
        rel[bits] = np.median((np.abs(vh / v.ravel() - 1)).reshape(2000, 256).max(axis=1))
    assert rel[16] <= rel[8] <= rel[4]
