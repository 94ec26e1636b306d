"""Command-line entry point: ``vidsparse {run,masks,bench,classify,compare}``.

Exit codes: 0 success, 2 configuration or I/O error, 3 numerical invariant
violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import attention_block_sparse, attention_dense, attention_temporal_frame_major, flops_closed_form
from .config import MAX_COMPUTE_SEQ_LEN, ConfigError, RunConfig, build_config, load_config_file
from .layout import frame_major_permutation
from .masks import (
    SpatialPredicate,
    TemporalPlan,
    TemporalPredicate,
    band_violations,
    build_block_mask,
    conjugate_predicate,
    density,
    element_density,
    write_pgm,
)
from .pipeline import InvariantError, Workload, WorkloadSpec, classify_workload, compare_to_oracle, run_pipeline
from .profiler import HeadClass

log = logging.getLogger("vidsparse")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (flags override --config)")
    g.add_argument("--config", help="TOML file of RunConfig keys")
    g.add_argument("--preset", help="cogvideo-mini | hunyuan-mini | cogvideox-1.5 | hunyuan | none")
    g.add_argument("--text-len", type=int, dest="text_len")
    g.add_argument("--num-frames", type=int, dest="num_frames")
    g.add_argument("--tokens-per-frame", type=int, dest="tokens_per_frame")
    g.add_argument("--head-dim", type=int, dest="head_dim")
    g.add_argument("--num-heads", type=int, dest="num_heads")
    g.add_argument("--steps", type=int)
    g.add_argument("--c-s", type=int, dest="c_s")
    g.add_argument("--c-t", type=int, dest="c_t")
    g.add_argument("--block-size", type=int, dest="block_size")
    g.add_argument("--no-text-sink", action="store_false", dest="include_text", default=None)
    g.add_argument("--no-first-frame-sink", action="store_false", dest="include_first_frame", default=None)
    g.add_argument("--sample-fraction", type=float, dest="sample_fraction")
    g.add_argument("--min-samples", type=int, dest="min_samples")
    g.add_argument("--warmup", type=float)
    g.add_argument("--fp8", action="store_true", default=None)
    g.add_argument("--seed", type=int)
    g.add_argument("--precision", choices=["float32", "float64"])
    g.add_argument("--alpha", type=float)
    g.add_argument("--planted", help="alternate | spatial | temporal | comma list of s/t")
    g.add_argument("--flip", action="append", dest="flips", metavar="HEAD:STEP")
    g.add_argument("--bucket-width", type=int, dest="bucket_width")
    g.add_argument("--threads", type=int)
    g.add_argument("--output-dir", dest="output_dir", help="defaults to $VIDSPARSE_OUTPUT_DIR or ./vidsparse-out")


_CONFIG_KEYS = [
    "preset", "text_len", "num_frames", "tokens_per_frame", "head_dim", "num_heads", "steps", "c_s", "c_t",
    "block_size", "include_text", "include_first_frame", "sample_fraction", "min_samples", "warmup", "fp8",
    "seed", "precision", "alpha", "planted", "flips", "bucket_width", "threads", "output_dir",
]


def _config_from_args(args) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in _CONFIG_KEYS}
    if overrides["flips"] is not None:
        overrides["flips"] = tuple(overrides["flips"])
    return build_config(file_values, overrides)


def _require_compute(cfg: RunConfig) -> None:
    n = cfg.layout().seq_len
    if n > MAX_COMPUTE_SEQ_LEN:
        raise ConfigError([f"sequence length {n} exceeds {MAX_COMPUTE_SEQ_LEN}; use a -mini preset (masks/bench only for full size)"])


def _workload(cfg: RunConfig) -> Workload:
    ms = cfg.mask_spec()
    spec = WorkloadSpec(
        layout=cfg.layout(),
        head_dim=cfg.head_dim,
        num_heads=cfg.num_heads,
        num_steps=cfg.steps,
        planted=cfg.planted_types(),
        alpha=cfg.alpha,
        flip_steps=cfg.flip_steps(),
        bucket_width=cfg.bucket_width or ms.slash_half_width + 1,
        seed=cfg.seed,
    )
    return Workload(spec, cfg.precision)


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise ConfigError([f"cannot write {path}: {exc.strerror}"]) from None


def cmd_run(cfg: RunConfig, report_path: Path | None = None) -> int:
    _require_compute(cfg)
    report = run_pipeline(
        _workload(cfg), cfg.mask_spec(), cfg.profile_config(), cfg.warmup, cfg.block_size,
        fp8=cfg.fp8, threads=cfg.threads,
    )
    report.config["run"] = cfg.report_dict()
    counted, closed = report.flops_reduction, report.closed_form_reduction
    if abs(counted - closed) > 1e-9 * closed:
        raise InvariantError(f"FLOPs ledger does not close: counted {counted} vs closed form {closed}")
    path = report_path or cfg.output_path() / "report.json"
    _write(path, report.to_json())
    hist = report.class_histogram()
    agreement = report.planted_agreement()
    print(f"report        {path}")
    print(f"layout        S={cfg.layout().seq_len} (T={cfg.text_len}, N={cfg.num_frames}, L={cfg.tokens_per_frame}), "
          f"D={cfg.head_dim}, H={cfg.num_heads}, steps={cfg.steps}")
    print(f"mean PSNR     {report.mean_psnr:.2f} dB")
    print(f"FLOPs ratio   {counted:.4f}x (closed form {closed:.4f}x)")
    print(f"classes       spatial={hist['spatial']} temporal={hist['temporal']} dense={hist['dense']}")
    if agreement is not None:
        print(f"vs planted    {agreement:.4f}")
    return EXIT_OK


def cmd_masks(cfg: RunConfig) -> int:
    ms = cfg.mask_spec()
    b = cfg.block_size
    out = cfg.output_path()
    perm = frame_major_permutation(ms.layout)
    spatial = build_block_mask(SpatialPredicate(ms), b)
    temporal = build_block_mask(TemporalPredicate(ms), b)
    temporal_fm = build_block_mask(conjugate_predicate(TemporalPredicate(ms), perm), b)
    band = TemporalPlan(ms, b).band_mask
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, mask in [("spatial", spatial), ("temporal", temporal),
                           ("temporal_frame_major", temporal_fm), ("temporal_band", band)]:
            write_pgm(out / f"{name}.pgm", mask.grid)
    except OSError as exc:
        raise ConfigError([f"cannot write mask images to {out}: {exc.strerror}"]) from None
    violations = band_violations(ms, b)
    summary = {
        "block_size": b,
        "masks": {
            name: {"grid": list(m.shape), "active_blocks": m.active_block_count, "density": density(m)}
            for name, m in [("spatial", spatial), ("temporal", temporal),
                            ("temporal_frame_major", temporal_fm), ("temporal_band", band)]
        },
        "band_violations": violations,
    }
    _write(out / "masks.json", json.dumps(summary, indent=2) + "\n")
    for name, info in summary["masks"].items():
        print(f"{name:22s} grid={info['grid'][0]}x{info['grid'][1]} active={info['active_blocks']} density={info['density']:.4f}")
    if violations:
        raise InvariantError(f"{violations} frame-major slash blocks fall outside the band")
    print("frame-major slash mask is banded")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, compute: bool = True) -> int:
    ms = cfg.mask_spec()
    lay = ms.layout
    b, d = cfg.block_size, cfg.head_dim
    n = lay.seq_len
    spatial = build_block_mask(SpatialPredicate(ms), b)
    plan = TemporalPlan(ms, b)
    per_pair = 2 * (d + d)
    rows = []
    dense_counted = per_pair * n * n
    closed = {
        "dense": flops_closed_form(lay, d, "dense"),
        "spatial": flops_closed_form(lay, d, "spatial", ms.c_s),
        "temporal": flops_closed_form(lay, d, "temporal", ms.c_t),
    }
    counted = {
        "dense": dense_counted,
        "spatial": per_pair * spatial.covered_pairs(),
        "temporal": per_pair * plan.covered_pairs(),
    }
    sink_free = ms.sink_free()
    element = {
        "dense": 1.0,
        "spatial": element_density(SpatialPredicate(sink_free)),
        "temporal": element_density(TemporalPredicate(sink_free)),
    }
    block = {"dense": 1.0, "spatial": density(spatial), "temporal": density(plan.band_mask)}
    timings = {k: None for k in counted}
    run_kernels = compute and n <= MAX_COMPUTE_SEQ_LEN
    if run_kernels:
        dt = np.dtype(cfg.precision)
        rng = np.random.Generator(np.random.Philox(cfg.seed))
        q, k, v = (rng.standard_normal((n, d)).astype(dt) for _ in range(3))
        kernels = {
            "dense": lambda: attention_dense(q, k, v),
            "spatial": lambda: attention_block_sparse(q, k, v, spatial),
            "temporal": lambda: attention_temporal_frame_major(q, k, v, ms, plan=plan),
        }
        for name, fn in kernels.items():
            t0 = time.perf_counter()
            res = fn()
            timings[name] = time.perf_counter() - t0
            if res.flops_counted != counted[name]:
                raise InvariantError(f"{name} kernel counted {res.flops_counted} FLOPs, mask predicts {counted[name]}")
    for name in ("dense", "spatial", "temporal"):
        rows.append({
            "kernel": name,
            "counted_flops": counted[name],
            "closed_form_flops": closed[name],
            "counted_over_dense": counted[name] / dense_counted,
            "closed_over_dense": closed[name] / closed["dense"],
            "sink_free_element_density": element[name],
            "block_density": block[name],
            "seconds": timings[name],
        })
    _write(cfg.output_path() / "bench.json", json.dumps({"seq_len": n, "block_size": b, "head_dim": d, "kernels": rows}, indent=2) + "\n")
    print(f"{'kernel':9s} {'counted':>16s} {'closed form':>16s} {'cnt/dense':>9s} {'cf/dense':>9s} {'elem dens':>9s} {'seconds':>8s}")
    for r in rows:
        secs = "-" if r["seconds"] is None else f"{r['seconds']:.3f}"
        print(f"{r['kernel']:9s} {r['counted_flops']:16d} {r['closed_form_flops']:16d} {r['counted_over_dense']:9.4f} "
              f"{r['closed_over_dense']:9.4f} {r['sink_free_element_density']:9.4f} {secs:>8s}")
    return EXIT_OK


def cmd_classify(cfg: RunConfig, dump_path: Path | None = None) -> int:
    _require_compute(cfg)
    records = classify_workload(_workload(cfg), cfg.mask_spec(), cfg.profile_config(), cfg.warmup, cfg.threads)
    dump = [
        {"step": r.step, "head": r.head, "mse_spatial": r.mse_spatial, "mse_temporal": r.mse_temporal, "class": r.chosen.value}
        for r in records
    ]
    path = dump_path or cfg.output_path() / "classification.json"
    _write(path, json.dumps(dump, indent=2) + "\n")
    counts = {c.value: sum(r.chosen is c for r in records) for c in HeadClass}
    print(f"classification {path}")
    print(f"classes        spatial={counts['spatial']} temporal={counts['temporal']} dense={counts['dense']}")
    return EXIT_OK


def _load_records(path: Path):
    from .pipeline import HeadRecord

    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [h for s in data["steps"] for h in s["heads"]]
    return [HeadRecord(int(r["step"]), int(r["head"]), HeadClass(r["class"])) for r in data]


def cmd_compare(a: Path, b: Path) -> int:
    try:
        ra, rb = _load_records(a), _load_records(b)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError([f"cannot read classification: {exc}"]) from None
    agreement = compare_to_oracle(ra, rb)
    print(f"agreement {agreement:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidsparse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the sparse pipeline against the dense oracle")
    _add_config_flags(p)
    p.add_argument("--report", type=Path, help="report path (default OUTPUT_DIR/report.json)")

    p = sub.add_parser("masks", help="write PGM images of the block masks")
    _add_config_flags(p)

    p = sub.add_parser("bench", help="counted vs closed-form FLOPs of dense and sparse kernels")
    _add_config_flags(p)
    p.add_argument("--no-compute", action="store_true", help="masks and FLOPs only, skip the kernels")

    p = sub.add_parser("classify", help="write the per-step per-head classification dump")
    _add_config_flags(p)
    p.add_argument("--dump", type=Path, help="dump path (default OUTPUT_DIR/classification.json)")

    p = sub.add_parser("compare", help="classification agreement between two reports or dumps")
    p.add_argument("first", type=Path)
    p.add_argument("second", type=Path)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "compare":
            return cmd_compare(args.first, args.second)
        cfg = _config_from_args(args)
        # one BLAS thread so --threads alone decides parallelism and results stay bit-identical
        with threadpool_limits(limits=1):
            if args.command == "run":
                return cmd_run(cfg, args.report)
            if args.command == "masks":
                return cmd_masks(cfg)
            if args.command == "bench":
                return cmd_bench(cfg, compute=not args.no_compute)
            return cmd_classify(cfg, args.dump)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
