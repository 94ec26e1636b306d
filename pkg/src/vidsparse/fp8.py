"""Software E4M3 (1 sign, 4 exponent, 3 mantissa bits, bias 7) quantisation.

Follows the "fn" variant: no infinities, codes 0x7F/0xFF are NaN, largest
finite magnitude 448, smallest normal 2**-6, subnormal step 2**-9. Each tile is
scaled symmetrically so its max |x| lands on 448.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionOutput, _block_sparse_partial, _check_mask, _check_qkv, _scale, finalize
from .masks import BlockMask

E4M3_MAX = 448.0
E4M3_MIN_NORMAL = 2.0**-6
_SUBNORMAL_STEP = 2.0**-9
_BIAS = 7


def decode_e4m3(codes) -> np.ndarray:
    """Value of each code (NaN for 0x7F / 0xFF)."""
    c = np.asarray(codes, dtype=np.uint8).astype(np.int64)
    sign = np.where(c & 0x80, -1.0, 1.0)
    exp = (c >> 3) & 0xF
    man = c & 0x7
    mag = np.where(exp == 0, man * _SUBNORMAL_STEP, (1.0 + man / 8.0) * np.exp2(exp - _BIAS))
    mag = np.where((c & 0x7F) == 0x7F, np.nan, mag)
    return sign * mag


def _encode_magnitude(a: np.ndarray) -> np.ndarray:
    """Round non-negative, already scaled magnitudes (<= 448) to E4M3 codes."""
    a = np.minimum(a, E4M3_MAX)
    _, e = np.frexp(np.maximum(a, E4M3_MIN_NORMAL))  # a = m * 2**e with m in [0.5, 1)
    quantum = np.where(a < E4M3_MIN_NORMAL, _SUBNORMAL_STEP, np.exp2(e - 1 - 3))
    r = np.round(a / quantum) * quantum  # np.round is half-to-even
    r = np.minimum(r, E4M3_MAX)
    _, e2 = np.frexp(np.maximum(r, E4M3_MIN_NORMAL))
    normal = r >= E4M3_MIN_NORMAL
    exp_field = np.where(normal, e2 - 1 + _BIAS, 0)
    man_field = np.where(normal, r / np.exp2(e2 - 1) * 8 - 8, r / _SUBNORMAL_STEP)
    return (exp_field.astype(np.int64) << 3 | np.rint(man_field).astype(np.int64)).astype(np.uint8)


@dataclass(frozen=True)
class QuantizedTile:
    codes: np.ndarray
    scale: float
    shape: tuple[int, int]
    dtype: np.dtype = np.dtype(np.float64)


def quantize_e4m3(tile) -> QuantizedTile:
    x = np.asarray(tile)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    xf = x.astype(np.float64)
    peak = float(np.max(np.abs(xf))) if xf.size else 0.0
    scale = peak / E4M3_MAX if peak > 0 else 1.0
    y = xf / scale
    codes = _encode_magnitude(np.abs(y))
    codes = np.where((y < 0) & (codes != 0), codes | 0x80, codes).astype(np.uint8)
    return QuantizedTile(codes, scale, x.shape, x.dtype)


def dequantize(qt: QuantizedTile) -> np.ndarray:
    return (decode_e4m3(qt.codes) * qt.scale).astype(qt.dtype)


def fake_quantize(x) -> np.ndarray:
    return dequantize(quantize_e4m3(x))


def fake_quantize_row_tiles(x, block_size: int) -> np.ndarray:
    """Quantise/dequantise each ``block_size x D`` row tile independently."""
    x = np.asarray(x)
    out = np.empty_like(x)
    for start in range(0, x.shape[0], block_size):
        out[start:start + block_size] = fake_quantize(x[start:start + block_size])
    return out


def attention_block_sparse_fp8(q, k, v, mask: BlockMask, scale=None, quantize: bool = True) -> AttentionOutput:
    """Block-sparse attention with Q and K tiles passed through E4M3.

    V and the softmax accumulation stay at input precision. ``quantize=False``
    is a pass-through that runs the unquantised kernel unchanged.
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    _check_qkv(q, k, v)
    _check_mask(q, k, mask)
    empty = mask.empty_rows()
    if empty.size:
        raise ValueError(f"block row {int(empty[0])} of the mask has no active blocks")
    if quantize:
        q = fake_quantize_row_tiles(q, mask.block_size)
        k = fake_quantize_row_tiles(k, mask.block_size)
    acc, flops = _block_sparse_partial(q, k, v, mask, _scale(q, scale))
    return AttentionOutput(finalize(acc), flops)
