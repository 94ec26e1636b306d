"""Dense numerics shared by every other module.

Matrices are plain 2-D numpy arrays of dtype float32 or float64. Random
matrices come from numpy's Philox4x32-10 counter-based bit generator with
the ziggurat standard-normal sampler, both of which are platform independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PSNR_CAP_DB = 100.0

DTYPES = {"float32": np.float32, "float64": np.float64}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def resolve_dtype(precision: str | type | np.dtype) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}") from None
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Independent deterministic stream for ``(seed, *keys)``."""
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated in ascending ``k`` order.

    Each output element is ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)`` with no
    fused multiply-add, so the result is bit-identical to a naive triple loop
    and independent of BLAS threading.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    dtype = np.result_type(a, b)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


def softmax_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[1] < 1:
        raise ShapeError(f"softmax_rows expects a 2-D matrix with >=1 column, got {m.shape}")
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def gaussian_matrix(rows: int, cols: int, seed: int, dtype="float64") -> np.ndarray:
    """I.i.d. N(0, 1) matrix from Philox keyed on ``seed``."""
    if rows < 1 or cols < 1:
        raise ValueError(f"gaussian_matrix needs rows, cols >= 1, got ({rows}, {cols})")
    dt = resolve_dtype(dtype)
    # sample in float64 so both precisions share the same underlying draws
    return rng_for(seed).standard_normal((rows, cols)).astype(dt)


@dataclass(frozen=True)
class ErrorStats:
    mse: float
    psnr_db: float
    max_abs_diff: float

    def to_dict(self) -> dict:
        return {"mse": self.mse, "psnr_db": self.psnr_db, "max_abs_diff": self.max_abs_diff}


def error_stats(reference: np.ndarray, test: np.ndarray) -> ErrorStats:
    """MSE, PSNR and max-abs error of ``test`` against ``reference``.

    The PSNR peak is ``max |reference|`` (1.0 for an all-zero reference) and
    the value is clamped to ``PSNR_CAP_DB``; an exact match reports the cap.
    """
    ref = np.asarray(reference, dtype=np.float64)
    tst = np.asarray(test, dtype=np.float64)
    if ref.shape != tst.shape:
        raise ShapeError(f"error_stats shape mismatch: {ref.shape} vs {tst.shape}")
    diff = ref - tst
    mse = float(np.mean(diff * diff)) if diff.size else 0.0
    max_abs = float(np.max(np.abs(diff))) if diff.size else 0.0
    peak = float(np.max(np.abs(ref))) if ref.size else 0.0
    if peak == 0.0:
        peak = 1.0
    if mse == 0.0:
        psnr = PSNR_CAP_DB
    else:
        psnr = min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / mse))
    return ErrorStats(mse=mse, psnr_db=psnr, max_abs_diff=max_abs)
