"""Synthetic multi-step, multi-head workloads and the end-to-end sparse pipeline.

Heads are planted as spatial (query/key embeddings share a direction per
frame) or temporal (a direction per bucket of within-frame offsets), so the
ground-truth class of every head is known and classification accuracy can be
measured against it.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attention import attention_block_sparse, attention_dense, attention_temporal_frame_major
from .fp8 import attention_block_sparse_fp8, fake_quantize_row_tiles
from .layout import LayoutSpec
from .masks import MaskSpec, SpatialPredicate, TemporalPlan, build_block_mask
from .profiler import (
    HeadClass,
    MaskRows,
    ProfileConfig,
    profile_head,
    sample_indices,
    warmup_steps,
)
from .tensor import ErrorStats, error_stats, resolve_dtype, rng_for


class InvariantError(RuntimeError):
    """A numerical invariant of the pipeline was violated."""


@dataclass(frozen=True)
class WorkloadSpec:
    layout: LayoutSpec
    head_dim: int
    num_heads: int
    num_steps: int
    planted: tuple[HeadClass, ...]
    alpha: float | tuple[float, ...] = 8.0
    flip_steps: tuple[int | None, ...] | None = None
    bucket_width: int = 1
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.num_heads < 1:
            problems.append("num_heads must be >= 1")
        if len(self.planted) != self.num_heads:
            problems.append(f"planted has {len(self.planted)} entries for {self.num_heads} heads")
        if any(HeadClass(p) is HeadClass.DENSE for p in self.planted):
            problems.append("planted types must be spatial or temporal")
        if self.head_dim < 1 or self.num_steps < 1 or self.bucket_width < 1:
            problems.append("head_dim, num_steps and bucket_width must be >= 1")
        if self.flip_steps is not None and len(self.flip_steps) != self.num_heads:
            problems.append("flip_steps must have one entry per head")
        if not isinstance(self.alpha, (int, float)) and len(self.alpha) != self.num_heads:
            problems.append("per-head alpha must have one entry per head")
        if any(a < 0 for a in self.head_alphas()):
            problems.append("alpha must be >= 0")
        if problems:
            raise ValueError("; ".join(problems))

    def head_alphas(self) -> tuple[float, ...]:
        if isinstance(self.alpha, (int, float)):
            return (float(self.alpha),) * len(self.planted)
        return tuple(float(a) for a in self.alpha)

    def planted_at(self, step: int, head: int) -> HeadClass:
        kind = HeadClass(self.planted[head])
        flip = None if self.flip_steps is None else self.flip_steps[head]
        if flip is not None and step >= flip:
            kind = HeadClass.TEMPORAL if kind is HeadClass.SPATIAL else HeadClass.SPATIAL
        return kind


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class Workload:
    """Lazily generated (q, k, v) per (step, head); deterministic from the spec seed."""

    def __init__(self, spec: WorkloadSpec, dtype="float64"):
        self.spec = spec
        self.dtype = resolve_dtype(dtype)

    def _directions(self, head: int):
        s = self.spec
        lay = s.layout
        rng = rng_for(s.seed, 0, head)
        n_buckets = -(-lay.tokens_per_frame // s.bucket_width)
        return (
            _unit_rows(rng, lay.num_frames, s.head_dim),
            _unit_rows(rng, n_buckets, s.head_dim),
            _unit_rows(rng, 1, s.head_dim)[0],
        )

    def head(self, step: int, head: int):
        s = self.spec
        lay = s.layout
        frame_dirs, bucket_dirs, text_dir = self._directions(head)
        if s.planted_at(step, head) is HeadClass.SPATIAL:
            video = frame_dirs[lay.frame_index[lay.text_len:]]
        else:
            video = bucket_dirs[lay.offset_index[lay.text_len:] // s.bucket_width]
        base = np.concatenate([np.tile(text_dir, (lay.text_len, 1)), video])
        alpha = s.head_alphas()[head]
        rng = rng_for(s.seed, 1, step, head)
        shape = (lay.seq_len, s.head_dim)
        q = alpha * base + rng.standard_normal(shape)
        k = alpha * base + rng.standard_normal(shape)
        v = rng.standard_normal(shape)
        return q.astype(self.dtype), k.astype(self.dtype), v.astype(self.dtype)

    def step(self, step: int):
        return [self.head(step, h) for h in range(self.spec.num_heads)]


def generate_workload(spec: WorkloadSpec, dtype="float64") -> Workload:
    return Workload(spec, dtype)


@dataclass
class HeadRecord:
    step: int
    head: int
    chosen: HeadClass
    mse_spatial: float | None = None
    mse_temporal: float | None = None
    planted: HeadClass | None = None
    oracle: HeadClass | None = None
    flops: int = 0

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "head": self.head,
            "class": self.chosen.value,
            "mse_spatial": self.mse_spatial,
            "mse_temporal": self.mse_temporal,
            "planted": None if self.planted is None else self.planted.value,
            "oracle": None if self.oracle is None else self.oracle.value,
            "flops": self.flops,
        }


@dataclass
class StepRecord:
    step: int
    warmup: bool
    error: ErrorStats
    heads: list[HeadRecord]


@dataclass
class PipelineReport:
    config: dict
    steps: list[StepRecord] = field(default_factory=list)
    dense_flops: int = 0
    sparse_flops: int = 0
    profiling_flops: int = 0
    warmup_flops: int = 0
    sample_count: int = 0
    rho_mix: float | None = None
    mask_densities: dict = field(default_factory=dict)
    warmup_steps: int = 0

    @property
    def records(self) -> list[HeadRecord]:
        return [h for s in self.steps for h in s.heads]

    @property
    def flops_reduction(self) -> float:
        return self.dense_flops / (self.sparse_flops + self.profiling_flops + self.warmup_flops)

    @property
    def profiling_overhead(self) -> float:
        seq_len = self.config["layout"]["seq_len"]
        return 3 * self.sample_count / seq_len

    @property
    def closed_form_reduction(self) -> float:
        n = len(self.steps)
        w = self.warmup_steps / n
        if self.rho_mix is None:
            return 1.0 / w if w else float("inf")
        return 1.0 / (w + (1 - w) * (self.rho_mix + self.profiling_overhead))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([s.error.psnr_db for s in self.steps]))

    def class_histogram(self) -> dict:
        hist = {c.value: 0 for c in HeadClass}
        for r in self.records:
            hist[r.chosen.value] += 1
        return hist

    def planted_agreement(self) -> float | None:
        alphas = self.config["workload"]["alpha"]
        scored = [r for r in self.records if r.chosen is not HeadClass.DENSE and alphas[r.head] > 0]
        if not scored:
            return None
        return sum(r.chosen is r.planted for r in scored) / len(scored)

    def oracle_agreement(self) -> float | None:
        scored = [r for r in self.records if r.oracle is not None]
        if not scored:
            return None
        return sum(r.chosen is r.oracle for r in scored) / len(scored)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "steps": [
                {
                    "step": s.step,
                    "warmup": s.warmup,
                    "error": s.error.to_dict(),
                    "heads": [h.to_dict() for h in s.heads],
                }
                for s in self.steps
            ],
            "totals": {
                "dense_flops": self.dense_flops,
                "sparse_flops": self.sparse_flops,
                "profiling_flops": self.profiling_flops,
                "warmup_flops": self.warmup_flops,
                "flops_reduction": self.flops_reduction,
                "closed_form_reduction": self.closed_form_reduction,
                "rho_mix": self.rho_mix,
                "mask_densities": self.mask_densities,
                "sample_count": self.sample_count,
                "profiling_overhead": self.profiling_overhead,
                "warmup_steps": self.warmup_steps,
            },
            "summary": {
                "mean_psnr_db": self.mean_psnr,
                "class_histogram": self.class_histogram(),
                "planted_agreement": self.planted_agreement(),
                "oracle_agreement": self.oracle_agreement(),
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"


def _config_dict(workload: Workload, mask_spec: MaskSpec, cfg: ProfileConfig, warmup_fraction: float,
                 block_size: int, fp8: bool) -> dict:
    w = workload.spec
    lay = w.layout
    return {
        "layout": {
            "text_len": lay.text_len,
            "num_frames": lay.num_frames,
            "tokens_per_frame": lay.tokens_per_frame,
            "seq_len": lay.seq_len,
        },
        "workload": {
            "head_dim": w.head_dim,
            "num_heads": w.num_heads,
            "num_steps": w.num_steps,
            "planted": [HeadClass(p).value for p in w.planted],
            "alpha": list(w.head_alphas()),
            "flip_steps": None if w.flip_steps is None else list(w.flip_steps),
            "bucket_width": w.bucket_width,
            "seed": w.seed,
            "precision": workload.dtype.name,
        },
        "masks": {
            "c_s": mask_spec.c_s,
            "c_t": mask_spec.c_t,
            "slash_half_width": mask_spec.slash_half_width,
            "include_first_frame": mask_spec.include_first_frame,
            "include_text": mask_spec.include_text,
            "block_size": block_size,
        },
        "profile": {
            "sample_fraction": cfg.sample_fraction,
            "min_samples": cfg.min_samples,
            "seed": cfg.seed,
            "shared_indices": cfg.shared_indices,
        },
        "warmup_fraction": warmup_fraction,
        "fp8": fp8,
    }


def _map(pool, fn, items):
    return list(pool.map(fn, items)) if pool is not None else [fn(x) for x in items]


def _step_indices(cfg: ProfileConfig, seq_len: int, step: int, heads: int):
    t = cfg.sample_count(seq_len)
    if cfg.shared_indices:
        shared = sample_indices(seq_len, t, cfg.seed, step)
        return [shared] * heads
    return [sample_indices(seq_len, t, cfg.seed, step, h) for h in range(heads)]


def classify_workload(workload: Workload, mask_spec: MaskSpec, cfg: ProfileConfig,
                      warmup_fraction: float = 0.25, threads: int = 1) -> list[HeadRecord]:
    """Profiling only: the per-step, per-head classes without running the sparse kernels."""
    w = workload.spec
    n = w.layout.seq_len
    n_warm = warmup_steps(w.num_steps, warmup_fraction)
    mask_rows = MaskRows(mask_spec)
    records = []
    with ThreadPoolExecutor(threads) if threads > 1 else _null() as pool:
        for step in range(w.num_steps):
            if step < n_warm:
                records += [HeadRecord(step, h, HeadClass.DENSE, planted=w.planted_at(step, h))
                            for h in range(w.num_heads)]
                continue
            indices = _step_indices(cfg, n, step, w.num_heads)
            for idx in {id(i): i for i in indices}.values():
                mask_rows.rows(idx)

            def one(h, step=step, indices=indices):
                q, k, v = workload.head(step, h)
                res = profile_head(q, k, v, mask_spec, cfg, indices=indices[h],
                                   mask_rows=mask_rows if cfg.shared_indices else None)
                return HeadRecord(step, h, res.chosen, res.mse_spatial, res.mse_temporal,
                                  planted=w.planted_at(step, h), flops=res.flops_counted)

            records += _map(pool, one, range(w.num_heads))
    return records


class _null:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


def run_pipeline(workload: Workload, mask_spec: MaskSpec, profile_cfg: ProfileConfig | None = None,
                 warmup_fraction: float = 0.25, block_size: int = 64, fp8: bool = False,
                 threads: int = 1, oracle: bool = False) -> PipelineReport:
    """Run every step: dense warmup, then profile and dispatch each head.

    Spatial heads use the token-major block-sparse kernel, temporal heads the
    frame-major two-pass kernel. Every head is also run densely as the oracle.
    With ``oracle=True`` each head is additionally profiled on all rows.
    """
    cfg = profile_cfg or ProfileConfig()
    w = workload.spec
    lay = w.layout
    if lay != mask_spec.layout:
        raise ValueError("workload and mask spec use different layouts")
    n = lay.seq_len
    spatial_mask = build_block_mask(SpatialPredicate(mask_spec), block_size)
    plan = TemporalPlan(mask_spec, block_size)
    dense_pairs = n * n
    densities = {
        HeadClass.SPATIAL: spatial_mask.covered_pairs() / dense_pairs,
        HeadClass.TEMPORAL: plan.covered_pairs() / dense_pairs,
    }
    report = PipelineReport(_config_dict(workload, mask_spec, cfg, warmup_fraction, block_size, fp8))
    report.mask_densities = {k.value: v for k, v in densities.items()}
    report.sample_count = cfg.sample_count(n)
    n_warm = warmup_steps(w.num_steps, warmup_fraction)
    report.warmup_steps = n_warm
    mask_rows = MaskRows(mask_spec)
    full_cfg = ProfileConfig(1.0, 1, cfg.seed)
    all_rows = np.arange(n)
    chosen_densities = []
    tile_transform = fake_quantize_row_tiles if fp8 else None

    def sparse(q, k, v, kind):
        if kind is HeadClass.SPATIAL:
            if fp8:
                return attention_block_sparse_fp8(q, k, v, spatial_mask)
            return attention_block_sparse(q, k, v, spatial_mask)
        return attention_temporal_frame_major(q, k, v, mask_spec, plan=plan, tile_transform=tile_transform)

    with ThreadPoolExecutor(threads) if threads > 1 else _null() as pool:
        for step in range(w.num_steps):
            warm = step < n_warm
            indices = None if warm else _step_indices(cfg, n, step, w.num_heads)
            if indices is not None and cfg.shared_indices:
                mask_rows.rows(indices[0])

            def one(h, step=step, warm=warm, indices=indices):
                q, k, v = workload.head(step, h)
                dense = attention_dense(q, k, v)
                planted = w.planted_at(step, h)
                if warm:
                    return dense, dense, HeadRecord(step, h, HeadClass.DENSE, planted=planted, flops=dense.flops_counted), 0
                prof = profile_head(q, k, v, mask_spec, cfg, indices=indices[h],
                                    mask_rows=mask_rows if cfg.shared_indices else None)
                out = sparse(q, k, v, prof.chosen)
                rec = HeadRecord(step, h, prof.chosen, prof.mse_spatial, prof.mse_temporal,
                                 planted=planted, flops=out.flops_counted)
                if oracle:
                    rec.oracle = profile_head(q, k, v, mask_spec, full_cfg, indices=all_rows).chosen
                return dense, out, rec, prof.flops_counted

            results = _map(pool, one, range(w.num_heads))
            ref = np.concatenate([r[0].o for r in results])
            got = np.concatenate([r[1].o for r in results])
            if not np.all(np.isfinite(got)):
                raise InvariantError(f"non-finite attention output at step {step}")
            for dense, out, rec, prof_flops in results:
                report.dense_flops += dense.flops_counted
                if warm:
                    report.warmup_flops += out.flops_counted
                else:
                    report.sparse_flops += out.flops_counted
                    report.profiling_flops += prof_flops
                    chosen_densities.append(densities[rec.chosen])
            report.steps.append(StepRecord(step, warm, error_stats(ref, got), [r[2] for r in results]))

    if chosen_densities:
        report.rho_mix = float(np.mean(chosen_densities))
    expected_dense = w.num_heads * w.num_steps * 2 * n * n * (w.head_dim * 2)
    if report.dense_flops != expected_dense:
        raise InvariantError(f"dense FLOPs ledger {report.dense_flops} != {expected_dense}")
    return report


def _records_of(x) -> list[HeadRecord]:
    return x.records if isinstance(x, PipelineReport) else list(x)


def compare_to_oracle(report_sampled, report_full, alphas=None) -> float:
    """Fraction of profiled (step, head) pairs whose chosen class agrees.

    Warmup (Dense) pairs and heads with ``alpha == 0`` carry no signal and are
    left out.
    """
    if alphas is None and isinstance(report_sampled, PipelineReport):
        alphas = report_sampled.config["workload"]["alpha"]
    a = _records_of(report_sampled)
    b = _records_of(report_full)
    if [(r.step, r.head) for r in a] != [(r.step, r.head) for r in b]:
        raise ValueError("reports cover different (step, head) pairs")
    pairs = [
        (x, y) for x, y in zip(a, b)
        if not (x.chosen is HeadClass.DENSE and y.chosen is HeadClass.DENSE)
        and (alphas is None or alphas[x.head] > 0)
    ]
    if not pairs:
        return 1.0
    return sum(x.chosen is y.chosen for x, y in pairs) / len(pairs)
