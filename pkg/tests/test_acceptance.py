"""End-to-end acceptance checks, one test (or group) per criterion.

Each check prints a one-line verdict; the terminal summary collects them.
"""

import itertools
import json
import math
from fractions import Fraction

import numpy as np
import pytest
from conftest import naive_masked_attention, qkv, random_layout, random_mask_spec
from test_fp8 import POSITIVE, oracle_round

from vidsparse import cli
from vidsparse.attention import (
    attention_block_sparse,
    attention_dense,
    attention_masked_reference,
    attention_temporal_frame_major,
)
from vidsparse.fp8 import E4M3_MAX, E4M3_MIN_NORMAL, attention_block_sparse_fp8, decode_e4m3, quantize_e4m3
from vidsparse.layout import LAYOUT_PRESETS, LayoutSpec, Permutation
from vidsparse.masks import (
    MASK_PRESETS,
    BlockMask,
    MaskSpec,
    SpatialPredicate,
    TemporalPlan,
    TemporalPredicate,
    build_block_mask,
    conjugate_predicate,
    element_density,
)
from vidsparse.pipeline import Workload, WorkloadSpec, classify_workload, compare_to_oracle, run_pipeline
from vidsparse.profiler import HeadClass, ProfileConfig, profile_head, profiling_flops
from vidsparse.tensor import softmax_rows


def verdict(number, ok, detail):
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def _block_size(rng, seq_len):
    choices = [4, 8, 16, 32, 64] if seq_len > 256 else [1, 2, 4, 8, 16, 32]
    return int(rng.choice(choices))


@pytest.mark.criterion(1, "block-sparse kernel equals the block-expanded masked reference")
def test_criterion_1_kernel_oracle_equivalence():
    rng = np.random.default_rng(101)
    worst = {np.float32: 0.0, np.float64: 0.0}
    instances = 0
    while instances < 200:
        lay = random_layout(rng, 1024)
        n = lay.seq_len
        b = _block_size(rng, n)
        kind = instances % 3
        if kind == 2:
            # arbitrary tile bitmap with every block row patched non-empty
            nb = -(-n // b)
            grid = rng.random((nb, nb)) < rng.uniform(0.1, 0.9)
            grid[np.flatnonzero(~grid.any(axis=1)), rng.integers(nb)] = True
            mask = BlockMask(grid, b, n, n)
        else:
            spec = random_mask_spec(rng, lay)
            pred = SpatialPredicate(spec) if kind == 0 else TemporalPredicate(spec)
            mask = build_block_mask(pred, b)
        d = int(rng.choice([8, 16, 32]))
        for dtype in (np.float32, np.float64):
            q, k, v = qkv(rng, n, d, dtype)
            got = attention_block_sparse(q, k, v, mask)
            ref = naive_masked_attention(q, k, v, mask.expand())
            worst[dtype] = max(worst[dtype], float(np.max(np.abs(got.o - ref))))
            assert got.flops_counted == 2 * mask.covered_pairs() * 2 * d
            assert got.o.dtype == dtype
        instances += 1
    ok = worst[np.float32] <= 1e-5 and worst[np.float64] <= 1e-12
    verdict(1, ok, f"{instances} instances, max |diff| float32 {worst[np.float32]:.2e}, float64 {worst[np.float64]:.2e}")


def exhaustive_temporal_specs():
    for t, n, L in itertools.product((0, 3), (1, 2, 3, 5), (1, 2, 4, 7)):
        lay = LayoutSpec(t, n, L)
        for c_t in range(1, min(n * L, 2 * L + 1) + 1):
            for first, text in itertools.product((False, True), repeat=2):
                for b in (1, 2, 4, 16):
                    yield MaskSpec(lay, 1, c_t, first, text), b
    # a few at the size limit
    for lay in (LayoutSpec(0, 8, 32), LayoutSpec(16, 6, 40), LayoutSpec(4, 9, 28)):
        for c_t in (1, 3, 9, 2 * lay.tokens_per_frame + 1):
            yield MaskSpec(lay, 1, c_t), 16


@pytest.mark.criterion(2, "frame-major temporal kernel equals the token-major masked reference")
def test_criterion_2_exhaustive_small_specs():
    rng = np.random.default_rng(202)
    worst, count = 0.0, 0
    for spec, b in exhaustive_temporal_specs():
        n = spec.layout.seq_len
        assert n <= 256
        plan = TemporalPlan(spec, b)
        q, k, v = qkv(rng, n, 8, spread=2.0)
        got = attention_temporal_frame_major(q, k, v, spec, plan=plan)
        mask = plan.reference_predicate().matrix()
        if b == 1:
            assert np.array_equal(mask, TemporalPredicate(spec).matrix())
        worst = max(worst, float(np.max(np.abs(got.o - attention_masked_reference(q, k, v, mask).o))))
        count += 1
    verdict(2, worst <= 1e-12, f"exhaustive grid: {count} specs, max |diff| float64 {worst:.2e}")


@pytest.mark.criterion(2, "frame-major temporal kernel equals the token-major masked reference")
def test_criterion_2_random_large_specs():
    rng = np.random.default_rng(203)
    worst = 0.0
    for _ in range(50):
        lay = random_layout(rng, 2048, max_text=64)
        spec = random_mask_spec(rng, lay)
        b = _block_size(rng, lay.seq_len)
        plan = TemporalPlan(spec, b)
        q, k, v = qkv(rng, lay.seq_len, 16, np.float32)
        got = attention_temporal_frame_major(q, k, v, spec, plan=plan)
        assert got.o.dtype == np.float32
        ref = attention_masked_reference(*(x.astype(np.float64) for x in (q, k, v)), plan.reference_predicate())
        worst = max(worst, float(np.max(np.abs(got.o - ref.o))))
        assert got.flops_counted == 2 * plan.covered_pairs() * 32
    verdict(2, worst <= 1e-5, f"50 random specs (S <= 2048), max |diff| float32 {worst:.2e}")


@pytest.mark.criterion(3, "sink-free densities match c_s/N and c_t/L")
def test_criterion_3_density_arithmetic():
    hy = MaskSpec(LAYOUT_PRESETS["hunyuan"], **MASK_PRESETS["hunyuan"]).sink_free()
    cog = MaskSpec(LAYOUT_PRESETS["cogvideox-1.5"], **MASK_PRESETS["cogvideox-1.5"]).sink_free()
    checks = {
        "hunyuan spatial": (element_density(SpatialPredicate(hy)), 10 / 33),
        "hunyuan temporal": (element_density(TemporalPredicate(hy)), 1200 / 3600),
        "cogvideox spatial": (element_density(SpatialPredicate(cog)), 4 / 11),
        "cogvideox temporal": (element_density(TemporalPredicate(cog)), 1224 / 4080),
    }
    assert Fraction(1224, 4080) == Fraction(3, 10)
    rel = {name: abs(got / want - 1) for name, (got, want) in checks.items()}
    detail = ", ".join(f"{name} {checks[name][0]:.4f} ({rel[name]:.2%})" for name in checks)
    verdict(3, max(rel.values()) <= 0.03, detail)


@pytest.mark.criterion(4, "profiling costs 3t/S of one dense attention")
def test_criterion_4_profiling_overhead():
    cfg = ProfileConfig(0.01)
    lay = LayoutSpec(4, 33, 112)
    n, d = lay.seq_len, 16
    t = cfg.sample_count(n)
    assert (n, t) == (3700, 37)
    rng = np.random.default_rng(404)
    q, k, v = qkv(rng, n, d, np.float32)
    res = profile_head(q, k, v, MaskSpec(lay, 10, 37), cfg)
    dense = attention_dense(q, k, v).flops_counted
    ratio = Fraction(res.flops_counted, dense)
    exact = all(
        Fraction(profiling_flops(math.ceil(s / 100), s, 64), 4 * s * s * 64) == Fraction(3, 100)
        for s in (3200, 3700, 10_000, 118_800)
    )
    verdict(4, ratio == Fraction(3, 100) and exact, f"t={t}, S={n}: profiling/dense = {float(ratio):.6f} (exact 3/100)")


def _hunyuan_mini_workload(steps=40):
    lay = LAYOUT_PRESETS["hunyuan-mini"]
    masks = MaskSpec(lay, **MASK_PRESETS["hunyuan-mini"])
    planted = tuple(HeadClass.SPATIAL if h % 2 == 0 else HeadClass.TEMPORAL for h in range(8))
    spec = WorkloadSpec(lay, 64, 8, steps, planted, alpha=8.0, bucket_width=masks.slash_half_width + 1, seed=0)
    return Workload(spec, "float32"), masks


@pytest.mark.criterion(5, "1% profiling agrees with full-row profiling")
def test_criterion_5_sampling_sensitivity():
    workload, masks = _hunyuan_mini_workload()
    full = classify_workload(workload, masks, ProfileConfig(1.0, 1), threads=4)
    one = classify_workload(workload, masks, ProfileConfig(0.01, 1), threads=4)
    tenth = classify_workload(workload, masks, ProfileConfig(0.001, 1), threads=4)
    a1, a01 = compare_to_oracle(one, full), compare_to_oracle(tenth, full)
    planted = np.mean([r.chosen is r.planted for r in full if r.chosen is not HeadClass.DENSE])
    verdict(5, a1 >= 0.95 and a01 >= 0.85,
            f"agreement x=1%: {a1:.4f}, x=0.1%: {a01:.4f} (full-row vs planted {planted:.4f})")


@pytest.mark.criterion(6, "FLOPs reduction >= 1.9x and within 5% of the closed form")
def test_criterion_6_flops_reduction():
    lay = LAYOUT_PRESETS["hunyuan-mini"]
    masks = MaskSpec(lay, c_s=9, c_t=33)
    planted = tuple(HeadClass.SPATIAL if h % 2 == 0 else HeadClass.TEMPORAL for h in range(8))
    spec = WorkloadSpec(lay, 64, 8, 40, planted, alpha=8.0, bucket_width=masks.slash_half_width + 1)
    report = run_pipeline(Workload(spec, "float32"), masks, ProfileConfig(0.01), 0.25, block_size=16, threads=4)
    dens = report.mask_densities
    assert 0.25 <= dens["spatial"] <= 0.35 and 0.25 <= dens["temporal"] <= 0.35
    w = report.warmup_steps / 40
    closed = 1 / (w + (1 - w) * (report.rho_mix + 3 * report.sample_count / lay.seq_len))
    ratio = report.flops_reduction
    ok = ratio >= 1.9 and abs(ratio / closed - 1) <= 0.05
    verdict(6, ok, f"counted {ratio:.4f}x, closed form {closed:.4f}x, rho_mix {report.rho_mix:.4f}, "
                   f"densities {dens['spatial']:.3f}/{dens['temporal']:.3f}, mean PSNR {report.mean_psnr:.1f} dB")


@pytest.mark.criterion(7, "softmax rows sum to 1, constant V collapses, permutation equivariance")
def test_criterion_7_numerical_hygiene():
    rng = np.random.default_rng(707)
    worst_sum = 0.0
    for _ in range(20):
        m = rng.standard_normal((16, 40)) * 30
        worst_sum = max(worst_sum, float(np.max(np.abs(softmax_rows(m).sum(axis=1) - 1))))
    # attention against V = I returns the attention weights themselves
    lay = LayoutSpec(8, 4, 16)
    spec = MaskSpec(lay, 2, 5)
    q, k, _ = qkv(rng, lay.seq_len, 8, np.float32, spread=2.0)
    eye = np.eye(lay.seq_len, dtype=np.float32)
    for out in (
        attention_dense(q, k, eye),
        attention_block_sparse(q, k, eye, build_block_mask(SpatialPredicate(spec), 8)),
        attention_temporal_frame_major(q, k, eye, spec, block_size=8),
    ):
        worst_sum = max(worst_sum, float(np.max(np.abs(out.o.sum(axis=1, dtype=np.float64) - 1))))

    worst_const = 0.0
    for dtype in (np.float32, np.float64):
        q, k, _ = qkv(rng, lay.seq_len, 8, dtype, spread=2.0)
        c = rng.standard_normal(6).astype(dtype)
        v = np.tile(c, (lay.seq_len, 1))
        for out in (
            attention_dense(q, k, v, key_tile=17),
            attention_block_sparse(q, k, v, build_block_mask(TemporalPredicate(spec), 4)),
            attention_temporal_frame_major(q, k, v, spec, block_size=4),
        ):
            ulps = np.max(np.abs(out.o - c) / (np.abs(c) * np.finfo(dtype).eps))
            worst_const = max(worst_const, float(ulps))

    worst_perm = 0.0
    n = 96
    pred = SpatialPredicate(MaskSpec(LayoutSpec(0, 6, 16), 2, 3))
    for _ in range(100):
        q, k, v = qkv(rng, n, 8, np.float32)
        perm = Permutation.from_forward(rng.permutation(n))
        pq, pk, pv = (x[perm.inverse] for x in (q, k, v))  # row i of the permuted input is row inverse[i]
        direct = attention_masked_reference(q, k, v, pred).o
        permuted = attention_masked_reference(pq, pk, pv, conjugate_predicate(pred, perm)).o
        worst_perm = max(worst_perm, float(np.max(np.abs(permuted[perm.forward] - direct))))
        dense = attention_dense(pq, pk, pv).o[perm.forward] - attention_dense(q, k, v).o
        worst_perm = max(worst_perm, float(np.max(np.abs(dense))))

    ok = worst_sum <= 1e-6 and worst_const <= 32 and worst_perm <= 1e-5
    verdict(7, ok, f"row-sum err {worst_sum:.1e}, constant-V err {worst_const:.0f} ulp, "
                   f"permutation err {worst_perm:.1e} over 100 permutations")


@pytest.mark.criterion(8, "FP8 round-trip within 1/16 relative and pass-through bit-identical")
def test_criterion_8_fp8():
    rng = np.random.default_rng(808)
    worst = 0.0
    mismatches = 0
    for i in range(16):
        tile = rng.standard_normal((64, 64)) * 10.0 ** rng.uniform(-3, 3)
        qt = quantize_e4m3(tile)
        scaled = np.abs(tile) / qt.scale
        want = np.array([oracle_round(a) for a in scaled.ravel()]).reshape(tile.shape)
        mismatches += int(np.count_nonzero(np.abs(decode_e4m3(qt.codes)) != want))
        in_range = np.abs(tile) >= qt.scale * E4M3_MIN_NORMAL
        back = decode_e4m3(qt.codes) * qt.scale
        worst = max(worst, float(np.max(np.abs(back - tile)[in_range] / np.abs(tile)[in_range])))
    assert len(POSITIVE) == 127 and POSITIVE[-1][0] == E4M3_MAX

    identical = True
    for dtype in (np.float32, np.float64):
        n = 200
        q, k, v = qkv(rng, n, 16, dtype)
        mask = build_block_mask(SpatialPredicate(MaskSpec(LayoutSpec(8, 6, 32), 2, 5)), 16)
        a = attention_block_sparse_fp8(q, k, v, mask, quantize=False)
        b = attention_block_sparse(q, k, v, mask)
        identical &= np.array_equal(a.o, b.o) and a.flops_counted == b.flops_counted
    ok = worst <= 0.0625 and mismatches == 0 and identical
    verdict(8, ok, f"max relative error {worst:.4f}, oracle mismatches {mismatches}, pass-through identical {identical}")


@pytest.mark.criterion(9, "cmd_run output is byte-identical across runs and --threads")
def test_criterion_9_determinism(tmp_path, capsys):
    base = ["run", "--preset", "hunyuan-mini", "--steps", "8", "--seed", "7"]
    outputs = []
    for i, threads in enumerate(("1", "1", "4")):
        path = tmp_path / f"r{i}.json"
        assert cli.main([*base, "--threads", threads, "--report", str(path)]) == 0
        outputs.append(path.read_bytes())
    capsys.readouterr()
    same = outputs[0] == outputs[1] == outputs[2]
    json.loads(outputs[0])
    verdict(9, same, f"3 runs ({len(outputs[0])} bytes each) identical: {same}")
