"""Token geometry of a video sequence and the frame-major reindexing."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .tensor import ShapeError

# Text tokens occupy a prefix of the sequence, both token-major and frame-major.
TEXT_PLACEMENT = "prefix"


@dataclass(frozen=True)
class LayoutSpec:
    text_len: int
    num_frames: int
    tokens_per_frame: int

    def __post_init__(self):
        if self.text_len < 0:
            raise ValueError(f"text_len must be >= 0, got {self.text_len}")
        if self.num_frames < 1:
            raise ValueError(f"num_frames must be >= 1, got {self.num_frames}")
        if self.tokens_per_frame < 1:
            raise ValueError(f"tokens_per_frame must be >= 1, got {self.tokens_per_frame}")

    @property
    def seq_len(self) -> int:
        return self.text_len + self.num_frames * self.tokens_per_frame

    @property
    def video_len(self) -> int:
        return self.num_frames * self.tokens_per_frame

    @cached_property
    def frame_index(self) -> np.ndarray:
        """Frame of every token, -1 for text."""
        out = np.full(self.seq_len, -1, dtype=np.int64)
        out[self.text_len:] = np.arange(self.video_len) // self.tokens_per_frame
        return out

    @cached_property
    def offset_index(self) -> np.ndarray:
        """Within-frame offset of every token, -1 for text."""
        out = np.full(self.seq_len, -1, dtype=np.int64)
        out[self.text_len:] = np.arange(self.video_len) % self.tokens_per_frame
        return out


# Real-model geometries; text length is not pinned by the source configs, so
# these carry video tokens only.
LAYOUT_PRESETS = {
    "cogvideox-1.5": LayoutSpec(0, 11, 4080),
    "hunyuan": LayoutSpec(0, 33, 3600),
    "cogvideo-mini": LayoutSpec(32, 11, 128),
    "hunyuan-mini": LayoutSpec(32, 33, 112),
}


@dataclass(frozen=True)
class Text:
    i: int


@dataclass(frozen=True)
class Video:
    frame: int
    offset: int


TokenCoord = Text | Video


def coord_of(i: int, spec: LayoutSpec) -> TokenCoord:
    if not 0 <= i < spec.seq_len:
        raise IndexError(f"token index {i} out of range [0, {spec.seq_len})")
    if i < spec.text_len:
        return Text(i)
    f, p = divmod(i - spec.text_len, spec.tokens_per_frame)
    return Video(f, p)


def index_of(c: TokenCoord, spec: LayoutSpec) -> int:
    if isinstance(c, Text):
        if not 0 <= c.i < spec.text_len:
            raise IndexError(f"text index {c.i} out of range [0, {spec.text_len})")
        return c.i
    if not (0 <= c.frame < spec.num_frames and 0 <= c.offset < spec.tokens_per_frame):
        raise IndexError(f"video coordinate {c} out of range for {spec}")
    return spec.text_len + c.frame * spec.tokens_per_frame + c.offset


@dataclass(frozen=True, eq=False)
class Permutation:
    """Row reindexing: row ``i`` moves to ``forward[i]``."""

    forward: np.ndarray
    inverse: np.ndarray = field(repr=False)

    @classmethod
    def from_forward(cls, forward) -> Permutation:
        fwd = np.asarray(forward, dtype=np.int64)
        n = fwd.shape[0]
        inv = np.full(n, -1, dtype=np.int64)
        inv[fwd] = np.arange(n)
        if fwd.ndim != 1 or (inv < 0).any() or not np.array_equal(np.sort(fwd), np.arange(n)):
            raise ValueError("forward is not a permutation of [0, n)")
        fwd.setflags(write=False)
        inv.setflags(write=False)
        return cls(fwd, inv)

    @classmethod
    def identity(cls, n: int) -> Permutation:
        return cls.from_forward(np.arange(n))

    def __len__(self) -> int:
        return self.forward.shape[0]

    def inverted(self) -> Permutation:
        return Permutation(self.inverse, self.forward)


def frame_major_permutation(spec: LayoutSpec) -> Permutation:
    """Text stays in place; video token (f, p) moves to ``T + p*N + f``."""
    fwd = np.arange(spec.seq_len, dtype=np.int64)
    video = fwd[spec.text_len:] - spec.text_len
    f, p = np.divmod(video, spec.tokens_per_frame)
    fwd[spec.text_len:] = spec.text_len + p * spec.num_frames + f
    return Permutation.from_forward(fwd)


def apply_row_permutation(m: np.ndarray, perm: Permutation) -> np.ndarray:
    m = np.asarray(m)
    if m.shape[0] != len(perm):
        raise ShapeError(f"matrix has {m.shape[0]} rows, permutation covers {len(perm)}")
    out = np.empty_like(m)
    out[perm.forward] = m
    return out
