"""Attention kernels: dense, masked reference, block-sparse and frame-major temporal.

All kernels share one streaming-softmax state (:class:`SoftmaxPartial`) so that
results over disjoint key subsets can be merged exactly. Keys of a query row
are always visited in ascending order, which keeps outputs bit-reproducible.

FLOPs are counted as 2 per multiply-accumulate over both matrix products, so a
dense head costs ``4 * S**2 * D``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layout import LayoutSpec, Permutation, apply_row_permutation
from .masks import BlockMask, MaskSpec, Predicate, TemporalPlan
from .tensor import ShapeError

DENSE_KEY_TILE = 1024


@dataclass
class AttentionOutput:
    o: np.ndarray
    flops_counted: int


@dataclass
class SoftmaxPartial:
    """Unnormalised streaming-softmax state for a set of query rows."""

    o_unnormalized: np.ndarray
    row_max: np.ndarray
    row_sum: np.ndarray

    @classmethod
    def empty(cls, rows: int, dim: int, dtype=np.float64) -> SoftmaxPartial:
        return cls(
            np.zeros((rows, dim), dtype=dtype),
            np.full(rows, -np.inf, dtype=dtype),
            np.zeros(rows, dtype=dtype),
        )

    @classmethod
    def from_scores(cls, scores: np.ndarray, v: np.ndarray, mask: np.ndarray | None = None) -> SoftmaxPartial:
        if mask is not None:
            scores = np.where(mask, scores, -np.inf)
        m = scores.max(axis=1) if scores.shape[1] else np.full(scores.shape[0], -np.inf, scores.dtype)
        shift = np.where(np.isneginf(m), 0, m)
        e = np.exp(scores - shift[:, None])
        return cls(e @ v, m, e.sum(axis=1))


def merge_partials(a: SoftmaxPartial, b: SoftmaxPartial) -> SoftmaxPartial:
    if a.o_unnormalized.shape != b.o_unnormalized.shape:
        raise ShapeError(f"cannot merge partials of shape {a.o_unnormalized.shape} and {b.o_unnormalized.shape}")
    m = np.maximum(a.row_max, b.row_max)
    shift = np.where(np.isneginf(m), 0, m)
    ca = np.exp(a.row_max - shift)
    cb = np.exp(b.row_max - shift)
    return SoftmaxPartial(
        a.o_unnormalized * ca[:, None] + b.o_unnormalized * cb[:, None],
        m,
        a.row_sum * ca + b.row_sum * cb,
    )


def finalize(p: SoftmaxPartial) -> np.ndarray:
    empty = np.flatnonzero(p.row_sum <= 0)
    if empty.size:
        raise ValueError(f"query row {int(empty[0])} attended no keys")
    return p.o_unnormalized / p.row_sum[:, None]


def _check_qkv(q, k, v):
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("q, k, v must be 2-D")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"q and k head dims differ: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"k and v lengths differ: {k.shape} vs {v.shape}")


def _scale(q, scale):
    return 1.0 / math.sqrt(q.shape[1]) if scale is None else float(scale)


def _pair_flops(pairs: int, q, v) -> int:
    return 2 * int(pairs) * (q.shape[1] + v.shape[1])


def attention_dense(q, k, v, scale=None, key_tile: int = DENSE_KEY_TILE) -> AttentionOutput:
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    _check_qkv(q, k, v)
    sc = _scale(q, scale)
    acc = SoftmaxPartial.empty(q.shape[0], v.shape[1], q.dtype)
    for start in range(0, k.shape[0], key_tile):
        stop = min(k.shape[0], start + key_tile)
        tile = SoftmaxPartial.from_scores(sc * (q @ k[start:stop].T), v[start:stop])
        acc = merge_partials(acc, tile)
    return AttentionOutput(finalize(acc), _pair_flops(q.shape[0] * k.shape[0], q, v))


def attention_masked_reference(q, k, v, predicate, scale=None) -> AttentionOutput:
    """Element-exact masked attention; ``predicate`` is a Predicate or bool matrix."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    _check_qkv(q, k, v)
    mask = predicate.matrix() if isinstance(predicate, Predicate) else np.asarray(predicate, dtype=bool)
    if mask.shape != (q.shape[0], k.shape[0]):
        raise ShapeError(f"mask shape {mask.shape} does not match ({q.shape[0]}, {k.shape[0]})")
    empty = np.flatnonzero(~mask.any(axis=1))
    if empty.size:
        raise ValueError(f"query row {int(empty[0])} is fully masked")
    p = SoftmaxPartial.from_scores(_scale(q, scale) * (q @ k.T), v, mask)
    return AttentionOutput(finalize(p), _pair_flops(np.count_nonzero(mask), q, v))


def _runs(row: np.ndarray):
    """(start, stop) of maximal runs of True in a 1-D bool array."""
    padded = np.concatenate([[False], row, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return zip(edges[::2], edges[1::2])


def _block_sparse_partial(q, k, v, mask: BlockMask, scale: float) -> tuple[SoftmaxPartial, int]:
    """Streaming softmax over the active tiles of ``mask``; empty rows stay empty."""
    b = mask.block_size
    acc = SoftmaxPartial.empty(q.shape[0], v.shape[1], q.dtype)
    pairs = 0
    for bq in range(mask.grid.shape[0]):
        r0, r1 = bq * b, min(q.shape[0], (bq + 1) * b)
        qb = q[r0:r1]
        m = acc.row_max[r0:r1]
        l = acc.row_sum[r0:r1]
        o = acc.o_unnormalized[r0:r1]
        # adjacent active tiles are fused into one span; visit order stays ascending
        for s0, s1 in _runs(mask.grid[bq]):
            c0, c1 = s0 * b, min(k.shape[0], s1 * b)
            pairs += (r1 - r0) * (c1 - c0)
            tile = SoftmaxPartial.from_scores(scale * (qb @ k[c0:c1].T), v[c0:c1])
            m_new = np.maximum(m, tile.row_max)
            ca = np.exp(m - m_new)
            cb = np.exp(tile.row_max - m_new)
            o = o * ca[:, None] + tile.o_unnormalized * cb[:, None]
            l = l * ca + tile.row_sum * cb
            m = m_new
        acc.row_max[r0:r1] = m
        acc.row_sum[r0:r1] = l
        acc.o_unnormalized[r0:r1] = o
    return acc, _pair_flops(pairs, q, v)


def _check_mask(q, k, mask: BlockMask):
    if mask.q_len != q.shape[0] or mask.k_len != k.shape[0]:
        raise ShapeError(f"block mask covers ({mask.q_len}, {mask.k_len}), inputs are ({q.shape[0]}, {k.shape[0]})")


def attention_block_sparse(q, k, v, mask: BlockMask, scale=None) -> AttentionOutput:
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    _check_qkv(q, k, v)
    _check_mask(q, k, mask)
    empty = mask.empty_rows()
    if empty.size:
        raise ValueError(f"block row {int(empty[0])} of the mask has no active blocks")
    acc, flops = _block_sparse_partial(q, k, v, mask, _scale(q, scale))
    return AttentionOutput(finalize(acc), flops)


def attention_temporal_frame_major(
    q,
    k,
    v,
    spec: MaskSpec,
    perm: Permutation | None = None,
    block_size: int = 64,
    scale=None,
    plan: TemporalPlan | None = None,
    tile_transform=None,
) -> AttentionOutput:
    """Temporal-head attention computed in frame-major layout.

    Pass A runs the block-sparse kernel over the contiguous slash band of the
    non-sink keys; pass B attends every query densely to the gathered sink
    columns (text and first frame). The two partials are merged and the rows
    restored to token-major order. ``tile_transform(x, block_size)`` is applied
    to the permuted q and k (used for FP8 emulation).
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    _check_qkv(q, k, v)
    if plan is None:
        plan = TemporalPlan(spec, block_size)
    elif plan.spec != spec:
        raise ValueError("plan was built for a different mask spec")
    n = spec.layout.seq_len
    if q.shape[0] != n or k.shape[0] != n:
        raise ShapeError(f"inputs have {q.shape[0]}/{k.shape[0]} rows, layout has {n}")
    if perm is not None and not np.array_equal(perm.forward, plan.perm.forward):
        raise ValueError("perm is not the frame-major permutation of this layout")
    sc = _scale(q, scale)

    qp = apply_row_permutation(q, plan.perm)
    kp = apply_row_permutation(k, plan.perm)
    if tile_transform is not None:
        qp = tile_transform(qp, plan.block_size)
        kp = tile_transform(kp, plan.block_size)
    # band keys are the permuted rows with sink tokens removed
    band_rows = plan.perm.forward[plan.band_keys]
    acc = SoftmaxPartial.empty(n, v.shape[1], q.dtype)
    flops = 0
    if band_rows.size:
        acc, flops = _block_sparse_partial(qp, kp[band_rows], v[plan.band_keys], plan.band_mask, sc)
    if plan.sink_keys.size:
        ks = kp[plan.perm.forward[plan.sink_keys]]
        sink = SoftmaxPartial.from_scores(sc * (qp @ ks.T), v[plan.sink_keys])
        acc = merge_partials(acc, sink)
        flops += _pair_flops(n * plan.sink_keys.size, q, v)
    o = finalize(acc)[plan.perm.forward]
    return AttentionOutput(o, flops)


def qk_norm(x, epsilon: float = 1e-6) -> np.ndarray:
    """Per-row RMS normalisation (no learned gain)."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"qk_norm expects a 2-D matrix with D >= 1, got {x.shape}")
    rms = np.sqrt(np.mean(x * x, axis=1, keepdims=True) + epsilon)
    return x / rms


def rope(x, positions, theta_base: float = 10000.0) -> np.ndarray:
    """Rotate consecutive coordinate pairs by ``pos * theta_base**(-2i/D)``."""
    x = np.asarray(x)
    d = x.shape[1]
    if d % 2:
        raise ShapeError(f"rope needs an even head dim, got {d}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (x.shape[0],):
        raise ShapeError(f"expected {x.shape[0]} positions, got shape {pos.shape}")
    inv_freq = theta_base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = pos[:, None] * inv_freq[None, :]
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)
    even, odd = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


def flops_closed_form(layout: LayoutSpec, head_dim: int, kind: str, budget: int | None = None) -> int:
    """Attention FLOPs of one head over the video tokens only.

    ``kind`` is ``"dense"``, ``"spatial"`` (``budget`` = c_s frames) or
    ``"temporal"`` (``budget`` = c_t offsets per frame).
    """
    L, N, D = layout.tokens_per_frame, layout.num_frames, head_dim
    if kind == "dense":
        return 4 * (L * N) ** 2 * D
    if budget is None:
        raise ValueError(f"{kind} FLOPs need a budget")
    if kind == "spatial":
        return 4 * L * L * D * budget * N
    if kind == "temporal":
        return 4 * N * N * D * budget * L
    raise ValueError(f"unknown attention kind {kind!r}")
