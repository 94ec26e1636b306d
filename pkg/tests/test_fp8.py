import math

import numpy as np
import pytest
from conftest import qkv
from hypothesis import given, settings
from hypothesis import strategies as st

from vidsparse.attention import attention_block_sparse
from vidsparse.fp8 import (
    E4M3_MAX,
    E4M3_MIN_NORMAL,
    attention_block_sparse_fp8,
    decode_e4m3,
    dequantize,
    fake_quantize,
    fake_quantize_row_tiles,
    quantize_e4m3,
)
from vidsparse.masks import BlockMask


def code_value(code):
    """E4M3fn value of one byte, straight from the bit layout."""
    sign = -1.0 if code & 0x80 else 1.0
    exp, man = (code >> 3) & 0xF, code & 0x7
    if exp == 0xF and man == 0x7:
        return math.nan
    if exp == 0:
        return sign * math.ldexp(man, -9)
    return sign * math.ldexp(8 + man, exp - 7 - 3)


CODE_TABLE = [code_value(c) for c in range(256)]
POSITIVE = sorted((v, c) for c, v in enumerate(CODE_TABLE) if c < 0x80 and not math.isnan(v))


def oracle_round(a):
    """Nearest non-negative E4M3 value to ``a``; ties to the even code."""
    best = min(POSITIVE, key=lambda vc: (abs(vc[0] - a), vc[1] & 1))
    return best[0]


def test_code_table_landmarks():
    assert len(POSITIVE) == 127
    assert max(v for v, _ in POSITIVE) == E4M3_MAX == 448.0
    assert CODE_TABLE[0x08] == E4M3_MIN_NORMAL
    assert CODE_TABLE[0x01] == 2.0**-9
    assert math.isnan(CODE_TABLE[0x7F]) and math.isnan(CODE_TABLE[0xFF])
    assert CODE_TABLE[0x80] == 0.0


def test_decode_matches_bit_layout_for_all_codes():
    got = decode_e4m3(np.arange(256))
    want = np.array(CODE_TABLE)
    assert np.array_equal(np.isnan(got), np.isnan(want))
    assert np.array_equal(got[~np.isnan(got)], want[~np.isnan(want)])


def test_zero_tile_round_trips():
    qt = quantize_e4m3(np.zeros((4, 4)))
    assert qt.scale == 1.0
    assert np.array_equal(dequantize(qt), np.zeros((4, 4)))
    assert not (qt.codes & 0x80).any()


def test_grid_points_round_trip_exactly():
    s = 0.37
    values = np.array([v for v, _ in POSITIVE])
    tile = np.concatenate([values, -values])[None, :] * s
    assert np.array_equal(fake_quantize(tile), tile)


def test_quantize_rejects_non_finite():
    with pytest.raises(ValueError):
        quantize_e4m3(np.array([[1.0, np.inf]]))


@pytest.mark.parametrize("seed", range(4))
def test_quantize_matches_rounding_oracle(seed):
    x = np.random.default_rng(seed).standard_normal((64, 64))
    qt = quantize_e4m3(x)
    scale = np.max(np.abs(x)) / E4M3_MAX
    assert qt.scale == scale
    want = np.array([math.copysign(oracle_round(abs(a) / scale), a) for a in x.ravel()]).reshape(x.shape)
    assert np.array_equal(decode_e4m3(qt.codes), want)
    in_range = np.abs(x) >= scale * E4M3_MIN_NORMAL
    rel = np.abs(dequantize(qt) - x)[in_range] / np.abs(x)[in_range]
    assert rel.max() <= 0.0625


def test_ties_round_to_even():
    # 1.0625 lies halfway between 1.0 (mantissa 0) and 1.125 (mantissa 1)
    tile = np.array([[448.0, 1.0625, 1.1875, 2.0**-10, 3 * 2.0**-10]])
    qt = quantize_e4m3(tile)
    assert qt.scale == 1.0
    assert decode_e4m3(qt.codes).tolist() == [[448.0, 1.0, 1.25, 0.0, 2.0**-8]]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_relative_error_bound(seed, spread):
    x = np.random.default_rng(seed).standard_normal((8, 16)) * spread
    y = fake_quantize(x)
    scale = np.max(np.abs(x)) / E4M3_MAX
    in_range = np.abs(x) >= scale * E4M3_MIN_NORMAL
    assert (np.abs(y - x)[in_range] <= 0.0625 * np.abs(x)[in_range]).all()
    assert np.max(np.abs(y)) == pytest.approx(np.max(np.abs(x)))


def test_row_tiles_have_independent_scales():
    x = np.vstack([np.full((2, 3), 1e-3), np.full((2, 3), 1e3)])
    y = fake_quantize_row_tiles(x, 2)
    assert np.allclose(y, x, rtol=1e-12)


def test_fp8_pass_through_is_bit_identical():
    rng = np.random.default_rng(1)
    for dtype in (np.float32, np.float64):
        q, k, v = qkv(rng, 96, 16, dtype)
        grid = rng.random((3, 3)) < 0.6
        grid[np.arange(3), np.arange(3)] = True
        mask = BlockMask(grid, 32, 96, 96)
        a = attention_block_sparse_fp8(q, k, v, mask, quantize=False)
        b = attention_block_sparse(q, k, v, mask)
        assert np.array_equal(a.o, b.o) and a.flops_counted == b.flops_counted


def test_fp8_constant_v_rows():
    rng = np.random.default_rng(2)
    q, k, _ = qkv(rng, 64, 8)
    c = rng.standard_normal(4)
    mask = BlockMask(np.ones((2, 2), bool), 32, 64, 64)
    o = attention_block_sparse_fp8(q, k, np.tile(c, (64, 1)), mask).o
    assert np.allclose(o, c, rtol=32 * np.finfo(float).eps, atol=0)


def test_fp8_on_grid_inputs_equal_unquantized_kernel():
    rng = np.random.default_rng(3)
    values = np.array([v for v, _ in POSITIVE if v > 0])
    # each 32-row tile holds 448 so its scale is exactly 1
    q = rng.choice(values, (64, 8)) * rng.choice([-1, 1], (64, 8))
    k = rng.choice(values, (64, 8)) * rng.choice([-1, 1], (64, 8))
    q[::32, 0] = k[::32, 0] = E4M3_MAX
    v = rng.standard_normal((64, 4))
    mask = BlockMask(np.array([[True, False], [True, True]]), 32, 64, 64)
    a = attention_block_sparse_fp8(q, k, v, mask, scale=1e-3)
    b = attention_block_sparse(q, k, v, mask, scale=1e-3)
    assert np.array_equal(a.o, b.o)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-2, 1e2))
def test_quantisation_is_monotone_within_a_tile(seed, spread):
    x = np.sort(np.random.default_rng(seed).standard_normal(200) * spread)[None, :]
    y = fake_quantize(x)
    assert np.all(np.diff(y[0]) >= 0)
    assert np.all(np.isfinite(y))
