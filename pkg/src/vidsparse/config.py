"""Run configuration: presets, TOML config files, flag overrides, validation."""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from .layout import LAYOUT_PRESETS, LayoutSpec
from .masks import MASK_PRESETS, MaskSpec
from .profiler import HeadClass, ProfileConfig
from .tensor import DTYPES

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

OUTPUT_DIR_ENV = "VIDSPARSE_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "vidsparse-out"

# Full-size layouts are fine for mask construction and FLOPs accounting but
# far too large for dense attention on a CPU.
MAX_COMPUTE_SEQ_LEN = 16384

PRESETS = {
    "cogvideo-mini": dict(head_dim=64, num_heads=8),
    "hunyuan-mini": dict(head_dim=64, num_heads=8),
    "cogvideox-1.5": dict(head_dim=64, num_heads=48),
    "hunyuan": dict(head_dim=128, num_heads=24),
}

# head shape when neither a preset nor an explicit value gives one
_FALLBACK = dict(head_dim=64, num_heads=8)


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class RunConfig:
    preset: str | None = "cogvideo-mini"
    text_len: int | None = None
    num_frames: int | None = None
    tokens_per_frame: int | None = None
    head_dim: int | None = None
    num_heads: int | None = None
    steps: int = 40
    c_s: int | None = None
    c_t: int | None = None
    block_size: int = 64
    include_text: bool = True
    include_first_frame: bool = True
    sample_fraction: float = 0.01
    min_samples: int = 32
    warmup: float = 0.25
    fp8: bool = False
    seed: int = 0
    precision: str = "float32"
    alpha: float = 8.0
    planted: str = "alternate"
    flips: tuple[str, ...] = ()
    bucket_width: int | None = None
    threads: int = 1
    output_dir: str | None = None

    # -- resolution ---------------------------------------------------------

    def resolved(self) -> RunConfig:
        """Fill unset geometry/mask knobs from the preset and validate."""
        problems = []
        values = dataclasses.asdict(self)
        if self.preset is not None:
            if self.preset not in LAYOUT_PRESETS:
                problems.append(f"unknown preset {self.preset!r}; choose from {sorted(LAYOUT_PRESETS)}")
            else:
                lay = LAYOUT_PRESETS[self.preset]
                base = dict(
                    text_len=lay.text_len,
                    num_frames=lay.num_frames,
                    tokens_per_frame=lay.tokens_per_frame,
                    **MASK_PRESETS[self.preset],
                    **PRESETS[self.preset],
                )
                for key, val in base.items():
                    if values[key] is None:
                        values[key] = val
        for key, val in _FALLBACK.items():
            if values[key] is None:
                values[key] = val
        for key in ("text_len", "num_frames", "tokens_per_frame", "c_s", "c_t"):
            if values[key] is None:
                problems.append(f"{key} is unset (give it explicitly or choose a preset)")
        if problems:
            raise ConfigError(problems)
        cfg = RunConfig(**values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        p = []
        if self.text_len < 0:
            p.append("text_len must be >= 0")
        if self.num_frames < 1:
            p.append("num_frames must be >= 1")
        if self.tokens_per_frame < 1:
            p.append("tokens_per_frame must be >= 1")
        if self.head_dim < 1:
            p.append("head_dim must be >= 1")
        if self.num_heads < 1:
            p.append("num_heads must be >= 1")
        if self.steps < 1:
            p.append("steps must be >= 1")
        if self.num_frames >= 1 and not 1 <= self.c_s <= self.num_frames:
            p.append(f"c_s must lie in [1, num_frames={self.num_frames}]")
        if self.num_frames >= 1 and self.tokens_per_frame >= 1 and not 1 <= self.c_t <= self.num_frames * self.tokens_per_frame:
            p.append("c_t must lie in [1, num_frames * tokens_per_frame]")
        if self.block_size < 1:
            p.append("block_size must be >= 1")
        if not 0 < self.sample_fraction <= 1:
            p.append("sample_fraction must lie in (0, 1]")
        if self.min_samples < 1:
            p.append("min_samples must be >= 1")
        if not 0 <= self.warmup <= 1:
            p.append("warmup must lie in [0, 1]")
        if self.precision not in DTYPES:
            p.append(f"precision must be one of {sorted(DTYPES)}")
        if self.alpha < 0:
            p.append("alpha must be >= 0")
        if self.threads < 1:
            p.append("threads must be >= 1")
        if self.bucket_width is not None and self.bucket_width < 1:
            p.append("bucket_width must be >= 1")
        try:
            planted = self.planted_types()
        except ValueError as exc:
            p.append(str(exc))
        else:
            try:
                self.flip_steps(len(planted))
            except ValueError as exc:
                p.append(str(exc))
        if p:
            raise ConfigError(p)

    # -- derived objects ----------------------------------------------------

    def layout(self) -> LayoutSpec:
        return LayoutSpec(self.text_len, self.num_frames, self.tokens_per_frame)

    def mask_spec(self) -> MaskSpec:
        return MaskSpec(self.layout(), self.c_s, self.c_t, self.include_first_frame, self.include_text)

    def profile_config(self) -> ProfileConfig:
        return ProfileConfig(self.sample_fraction, self.min_samples, self.seed)

    def planted_types(self) -> tuple[HeadClass, ...]:
        n = self.num_heads
        names = {"s": HeadClass.SPATIAL, "spatial": HeadClass.SPATIAL,
                 "t": HeadClass.TEMPORAL, "temporal": HeadClass.TEMPORAL}
        if self.planted == "alternate":
            return tuple(HeadClass.SPATIAL if h % 2 == 0 else HeadClass.TEMPORAL for h in range(n))
        if self.planted in ("spatial", "temporal"):
            return (names[self.planted],) * n
        parts = [x.strip().lower() for x in self.planted.split(",") if x.strip()]
        if len(parts) != n or any(x not in names for x in parts):
            raise ValueError(f"planted must be 'alternate', 'spatial', 'temporal' or {n} comma-separated s/t entries")
        return tuple(names[x] for x in parts)

    def flip_steps(self, n: int | None = None) -> tuple[int | None, ...] | None:
        if not self.flips:
            return None
        n = self.num_heads if n is None else n
        out: list[int | None] = [None] * n
        for item in self.flips:
            try:
                head, step = (int(x) for x in str(item).split(":"))
            except ValueError:
                raise ValueError(f"flip {item!r} must look like HEAD:STEP") from None
            if not 0 <= head < n:
                raise ValueError(f"flip head {head} outside [0, {n})")
            out[head] = step
        return tuple(out)

    def output_path(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_DIR_ENV) or DEFAULT_OUTPUT_DIR)

    def report_dict(self) -> dict:
        """Knobs that influence results (threads and paths excluded)."""
        d = dataclasses.asdict(self)
        d.pop("threads")
        d.pop("output_dir")
        d["flips"] = list(self.flips)
        return d


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def load_config_file(path) -> dict:
    """Read a flat TOML table of RunConfig field names."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError([f"cannot read config file {path}: {exc.strerror}"]) from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"config file {path} is not valid TOML: {exc}"]) from None
    unknown = sorted(set(data) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError([f"unknown config key {k!r}" for k in unknown])
    problems = []
    for key, val in data.items():
        kind = _FIELD_TYPES[key]
        ok = {
            "int": isinstance(val, int) and not isinstance(val, bool),
            "float": isinstance(val, (int, float)) and not isinstance(val, bool),
            "bool": isinstance(val, bool),
            "str": isinstance(val, str),
            "tuple": isinstance(val, list),
        }
        base = next(t for t in ("tuple", "bool", "float", "int", "str") if t in kind)
        if val is not None and not ok[base]:
            problems.append(f"config key {key!r} should be {base}, got {type(val).__name__}")
    if problems:
        raise ConfigError(problems)
    if "flips" in data:
        data["flips"] = tuple(str(x) for x in data["flips"])
    return data


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """defaults < config file < explicit overrides, then preset fill-in and validation."""
    values: dict = {}
    values.update(file_values or {})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if values.get("preset") == "none":
        values["preset"] = None
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError([str(exc)]) from None
    return cfg.resolved()
