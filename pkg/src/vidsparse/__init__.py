"""Block-sparse spatial/temporal attention for video transformers, with online head profiling."""

from .attention import (
    AttentionOutput,
    attention_block_sparse,
    attention_dense,
    attention_masked_reference,
    attention_temporal_frame_major,
    flops_closed_form,
)
from .fp8 import attention_block_sparse_fp8, dequantize, quantize_e4m3
from .layout import LAYOUT_PRESETS, LayoutSpec, Permutation, frame_major_permutation
from .masks import (
    MASK_PRESETS,
    BlockMask,
    MaskSpec,
    TemporalPlan,
    build_block_mask,
    conjugate_predicate,
    density,
    spatial_predicate,
    temporal_predicate,
)
from .pipeline import InvariantError, Workload, WorkloadSpec, compare_to_oracle, run_pipeline
from .profiler import HeadClass, ProfileConfig, classify_heads, profile_head

__version__ = "0.1.0"

__all__ = [
    "attention_block_sparse",
    "attention_block_sparse_fp8",
    "attention_dense",
    "attention_masked_reference",
    "attention_temporal_frame_major",
    "AttentionOutput",
    "BlockMask",
    "build_block_mask",
    "classify_heads",
    "compare_to_oracle",
    "conjugate_predicate",
    "density",
    "dequantize",
    "flops_closed_form",
    "frame_major_permutation",
    "HeadClass",
    "InvariantError",
    "LAYOUT_PRESETS",
    "LayoutSpec",
    "MASK_PRESETS",
    "MaskSpec",
    "Permutation",
    "profile_head",
    "ProfileConfig",
    "quantize_e4m3",
    "run_pipeline",
    "spatial_predicate",
    "temporal_predicate",
    "TemporalPlan",
    "Workload",
    "WorkloadSpec",
]
