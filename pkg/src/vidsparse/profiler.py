"""Online per-head pattern profiling on a sample of query rows."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .attention import SoftmaxPartial, _scale, finalize
from .masks import MaskSpec, SpatialPredicate, TemporalPredicate
from .tensor import rng_for


class HeadClass(str, enum.Enum):
    SPATIAL = "spatial"
    TEMPORAL = "temporal"
    DENSE = "dense"


@dataclass(frozen=True)
class ProfileConfig:
    sample_fraction: float = 0.01
    min_samples: int = 32
    seed: int = 0
    shared_indices: bool = True

    def __post_init__(self):
        if not 0 < self.sample_fraction <= 1:
            raise ValueError(f"sample_fraction must lie in (0, 1], got {self.sample_fraction}")
        if self.min_samples < 1:
            raise ValueError(f"min_samples must be >= 1, got {self.min_samples}")

    def sample_count(self, seq_len: int) -> int:
        t = max(self.min_samples, math.ceil(self.sample_fraction * seq_len - 1e-9))
        return min(t, seq_len)


@dataclass(frozen=True)
class ProfileResult:
    mse_spatial: float
    mse_temporal: float
    chosen: HeadClass
    sampled_indices: np.ndarray
    flops_counted: int


def sample_indices(seq_len: int, t: int, seed: int, *stream: int) -> np.ndarray:
    """``t`` distinct rows drawn uniformly without replacement, sorted."""
    if not 1 <= t <= seq_len:
        raise ValueError(f"need 1 <= t <= S, got t={t}, S={seq_len}")
    if t == seq_len:
        return np.arange(seq_len)
    idx = rng_for(seed, *stream).choice(seq_len, size=t, replace=False)
    return np.sort(idx)


def choose(mse_spatial: float, mse_temporal: float) -> HeadClass:
    # strict: ties go to temporal
    return HeadClass.SPATIAL if mse_spatial < mse_temporal else HeadClass.TEMPORAL


def profiling_flops(t: int, seq_len: int, head_dim: int, v_dim: int | None = None) -> int:
    """Three sampled passes (full, spatial, temporal), each counted as dense over ``t`` rows."""
    v_dim = head_dim if v_dim is None else v_dim
    return 3 * 2 * t * seq_len * (head_dim + v_dim)


class MaskRows:
    """Caches the spatial/temporal mask rows for a set of sampled indices."""

    def __init__(self, spec: MaskSpec):
        self.spec = spec
        self._spatial = SpatialPredicate(spec)
        self._temporal = TemporalPredicate(spec)
        self._key = None
        self._rows = None

    def rows(self, indices: np.ndarray):
        key = indices.tobytes()
        if key != self._key:
            self._rows = (self._spatial.matrix(indices), self._temporal.matrix(indices))
            self._key = key
        return self._rows


def profile_head(q, k, v, spec: MaskSpec, cfg: ProfileConfig | None = None, indices=None,
                 step: int = 0, mask_rows: MaskRows | None = None, scale=None) -> ProfileResult:
    """Classify one head by comparing masked to full attention on sampled rows.

    MSE is the plain mean squared difference over the sampled ``t x D`` block.
    The three passes share one score computation; the FLOPs convention still
    charges three dense sampled passes.
    """
    cfg = cfg or ProfileConfig()
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    n = spec.layout.seq_len
    if q.shape[0] != n or k.shape[0] != n or v.shape[0] != n:
        raise ValueError(f"inputs must have {n} rows")
    if indices is None:
        indices = sample_indices(n, cfg.sample_count(n), cfg.seed, step)
    indices = np.asarray(indices)
    if mask_rows is None:
        mask_rows = MaskRows(spec)
    m_spatial, m_temporal = mask_rows.rows(indices)

    scores = _scale(q, scale) * (q[indices] @ k.T)
    o_full = finalize(SoftmaxPartial.from_scores(scores, v))
    o_spatial = finalize(SoftmaxPartial.from_scores(scores, v, m_spatial))
    o_temporal = finalize(SoftmaxPartial.from_scores(scores, v, m_temporal))
    mse_s = float(np.mean((o_full.astype(np.float64) - o_spatial) ** 2))
    mse_t = float(np.mean((o_full.astype(np.float64) - o_temporal) ** 2))
    return ProfileResult(
        mse_spatial=mse_s,
        mse_temporal=mse_t,
        chosen=choose(mse_s, mse_t),
        sampled_indices=indices,
        flops_counted=profiling_flops(len(indices), n, q.shape[1], v.shape[1]),
    )


def warmup_steps(total_steps: int, warmup_fraction: float) -> int:
    if not 0 <= warmup_fraction <= 1:
        raise ValueError(f"warmup_fraction must lie in [0, 1], got {warmup_fraction}")
    return min(total_steps, math.ceil(warmup_fraction * total_steps - 1e-9))


def classify_heads(step_inputs, spec: MaskSpec, cfg: ProfileConfig, step_index: int, total_steps: int,
                   warmup_fraction: float = 0.25, mask_rows: MaskRows | None = None):
    """Per-head classes for one step: all Dense during warmup, else profiled.

    ``step_inputs`` is a sequence of ``(q, k, v)`` per head. Returns
    ``(classes, results)`` where ``results`` holds the ProfileResult per head
    (``None`` during warmup).
    """
    if not 0 <= step_index < total_steps:
        raise ValueError(f"step {step_index} outside [0, {total_steps})")
    heads = list(step_inputs)
    if step_index < warmup_steps(total_steps, warmup_fraction):
        return [HeadClass.DENSE] * len(heads), [None] * len(heads)
    n = spec.layout.seq_len
    t = cfg.sample_count(n)
    mask_rows = mask_rows or MaskRows(spec)
    shared = sample_indices(n, t, cfg.seed, step_index) if cfg.shared_indices else None
    results = []
    for h, (q, k, v) in enumerate(heads):
        idx = shared if shared is not None else sample_indices(n, t, cfg.seed, step_index, h)
        results.append(profile_head(q, k, v, spec, cfg, indices=idx, mask_rows=mask_rows))
    return [r.chosen for r in results], results
