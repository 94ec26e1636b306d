"""Spatial/temporal attention-mask predicates and their block-granular forms.

A predicate is a vectorised callable ``pred(q, k) -> bool`` over broadcastable
index arrays. Predicates also expose ``union_keys(rows)`` (keys attended by any
of ``rows``) and ``row_counts(rows)``; the generic versions enumerate pairs,
the structured ones below answer from frame/offset arithmetic so full-size
layouts stay tractable.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .layout import LayoutSpec, Permutation, frame_major_permutation

DEFAULT_BLOCK_SIZE = 64
_CHUNK_PAIRS = 1 << 22


@dataclass(frozen=True)
class MaskSpec:
    layout: LayoutSpec
    c_s: int
    c_t: int
    include_first_frame: bool = True
    include_text: bool = True

    def __post_init__(self):
        n, L = self.layout.num_frames, self.layout.tokens_per_frame
        if not 1 <= self.c_s <= n:
            raise ValueError(f"c_s must lie in [1, {n}], got {self.c_s}")
        if not 1 <= self.c_t <= n * L:
            raise ValueError(f"c_t must lie in [1, {n * L}], got {self.c_t}")

    @property
    def slash_half_width(self) -> int:
        """Offset half-width ``w`` of the temporal slash: ``(c_t - 1) // 2``."""
        return (self.c_t - 1) // 2

    @property
    def slash_width(self) -> int:
        """Number of offsets each video query attends per frame."""
        return min(2 * self.slash_half_width + 1, self.layout.tokens_per_frame)

    def sink_free(self) -> MaskSpec:
        return replace(self, include_first_frame=False, include_text=False)

    def spatial_window(self, frames):
        """Inclusive ``(lo, hi)`` attended-frame range for query frames.

        The window ``[i - (c_s-1)//2, i + c_s//2]`` is shifted (not clipped)
        at the ends of the video so it always spans ``c_s`` frames.
        """
        n = self.layout.num_frames
        lo = np.clip(np.asarray(frames) - (self.c_s - 1) // 2, 0, n - self.c_s)
        return lo, lo + self.c_s - 1

    def offset_window(self, offsets):
        """Inclusive ``(lo, hi)`` attended-offset range; shifted like the spatial window."""
        L = self.layout.tokens_per_frame
        width = self.slash_width
        lo = np.clip(np.asarray(offsets) - self.slash_half_width, 0, L - width)
        return lo, lo + width - 1


MASK_PRESETS = {
    "cogvideox-1.5": dict(c_s=4, c_t=1224),
    "hunyuan": dict(c_s=10, c_t=1200),
    "cogvideo-mini": dict(c_s=4, c_t=38),
    "hunyuan-mini": dict(c_s=10, c_t=37),
}


def _chunk_rows(n_rows: int, n_cols: int):
    step = max(1, _CHUNK_PAIRS // max(1, n_cols))
    for start in range(0, n_rows, step):
        yield np.arange(start, min(n_rows, start + step))


class Predicate:
    """Base element predicate over a ``q_len x k_len`` score matrix."""

    q_len: int
    k_len: int

    def _eval(self, q, k):
        raise NotImplementedError

    def __call__(self, q, k):
        q = np.asarray(q)
        k = np.asarray(k)
        if q.size and (q.min() < 0 or q.max() >= self.q_len):
            raise IndexError(f"query index out of range [0, {self.q_len})")
        if k.size and (k.min() < 0 or k.max() >= self.k_len):
            raise IndexError(f"key index out of range [0, {self.k_len})")
        out = self._eval(q, k)
        return bool(out) if np.ndim(out) == 0 else out

    def matrix(self, rows=None, cols=None) -> np.ndarray:
        rows = np.arange(self.q_len) if rows is None else np.asarray(rows)
        cols = np.arange(self.k_len) if cols is None else np.asarray(cols)
        return np.asarray(self._eval(rows[:, None], cols[None, :]), dtype=bool)

    def union_keys(self, rows) -> np.ndarray:
        rows = np.asarray(rows)
        keys = np.arange(self.k_len)
        return np.asarray(self._eval(rows[:, None], keys[None, :]), dtype=bool).any(axis=0)

    def row_counts(self, rows) -> np.ndarray:
        rows = np.asarray(rows)
        keys = np.arange(self.k_len)
        return np.asarray(self._eval(rows[:, None], keys[None, :]), dtype=bool).sum(axis=1)


@dataclass(eq=False)
class FunctionPredicate(Predicate):
    fn: object
    q_len: int
    k_len: int

    def _eval(self, q, k):
        return np.broadcast_to(self.fn(q, k), np.broadcast_shapes(np.shape(q), np.shape(k)))


def _mark_ranges(lo, hi, size: int) -> np.ndarray:
    """Boolean coverage of the union of inclusive ranges ``[lo, hi]``."""
    diff = np.zeros(size + 1, dtype=np.int64)
    np.add.at(diff, np.asarray(lo), 1)
    np.add.at(diff, np.asarray(hi) + 1, -1)
    return np.cumsum(diff[:-1]) > 0


@dataclass(eq=False)
class SpatialPredicate(Predicate):
    spec: MaskSpec

    def __post_init__(self):
        self.q_len = self.k_len = self.spec.layout.seq_len

    def _eval(self, q, k):
        s = self.spec
        fq = s.layout.frame_index[q]
        fk = s.layout.frame_index[k]
        q_text = fq < 0
        k_text = fk < 0
        lo, hi = s.spatial_window(fq)
        in_window = ~q_text & ~k_text & (fk >= lo) & (fk <= hi)
        return q_text | (k_text & s.include_text) | ((fk == 0) & s.include_first_frame) | in_window

    def union_keys(self, rows):
        s = self.spec
        lay = s.layout
        f = lay.frame_index[np.asarray(rows)]
        if (f < 0).any():
            return np.ones(self.k_len, dtype=bool)
        lo, hi = s.spatial_window(np.unique(f))
        covered = _mark_ranges(lo, hi, lay.num_frames)
        if s.include_first_frame:
            covered[0] = True
        out = np.empty(self.k_len, dtype=bool)
        out[: lay.text_len] = s.include_text
        out[lay.text_len:] = np.repeat(covered, lay.tokens_per_frame)
        return out

    def row_counts(self, rows):
        s = self.spec
        lay = s.layout
        f = lay.frame_index[np.asarray(rows)]
        lo, _ = s.spatial_window(np.maximum(f, 0))
        counts = s.c_s * lay.tokens_per_frame + s.include_text * lay.text_len
        counts = counts + np.where(s.include_first_frame & (lo > 0), lay.tokens_per_frame, 0)
        return np.where(f < 0, lay.seq_len, counts)


@dataclass(eq=False)
class TemporalPredicate(Predicate):
    spec: MaskSpec

    def __post_init__(self):
        self.q_len = self.k_len = self.spec.layout.seq_len

    def _eval(self, q, k):
        s = self.spec
        lay = s.layout
        pq = lay.offset_index[q]
        pk = lay.offset_index[k]
        q_text = pq < 0
        k_text = pk < 0
        lo, hi = s.offset_window(pq)
        in_slash = ~q_text & ~k_text & (pk >= lo) & (pk <= hi)
        first = (lay.frame_index[k] == 0) & s.include_first_frame
        return q_text | (k_text & s.include_text) | first | in_slash

    def union_keys(self, rows):
        s = self.spec
        lay = s.layout
        p = lay.offset_index[np.asarray(rows)]
        if (p < 0).any():
            return np.ones(self.k_len, dtype=bool)
        lo, hi = s.offset_window(np.unique(p))
        covered = _mark_ranges(lo, hi, lay.tokens_per_frame)
        out = np.empty(self.k_len, dtype=bool)
        out[: lay.text_len] = s.include_text
        out[lay.text_len:] = np.tile(covered, lay.num_frames)
        if s.include_first_frame:
            out[lay.text_len: lay.text_len + lay.tokens_per_frame] = True
        return out

    def row_counts(self, rows):
        s = self.spec
        lay = s.layout
        p = lay.offset_index[np.asarray(rows)]
        width = s.slash_width
        counts = width * lay.num_frames + s.include_text * lay.text_len
        counts += s.include_first_frame * (lay.tokens_per_frame - width)
        return np.where(p < 0, lay.seq_len, counts)


def spatial_predicate(spec: MaskSpec, q, k):
    return SpatialPredicate(spec)(q, k)


def temporal_predicate(spec: MaskSpec, q, k):
    return TemporalPredicate(spec)(q, k)


@dataclass(eq=False)
class ConjugatePredicate(Predicate):
    """``base`` viewed in permuted coordinates: ``p'(q', k') = base(inv[q'], inv[k'])``."""

    base: Predicate
    perm: Permutation

    def __post_init__(self):
        if len(self.perm) != self.base.q_len or len(self.perm) != self.base.k_len:
            raise ValueError("permutation length does not match predicate extent")
        self.q_len = self.base.q_len
        self.k_len = self.base.k_len

    def _eval(self, q, k):
        inv = self.perm.inverse
        return self.base._eval(inv[q], inv[k])

    def union_keys(self, rows):
        keys = self.base.union_keys(self.perm.inverse[np.asarray(rows)])
        out = np.empty_like(keys)
        out[self.perm.forward] = keys
        return out

    def row_counts(self, rows):
        return self.base.row_counts(self.perm.inverse[np.asarray(rows)])


def conjugate_predicate(predicate: Predicate, perm: Permutation) -> Predicate:
    return ConjugatePredicate(predicate, perm)


@dataclass(frozen=True, eq=False)
class BlockMask:
    """Tile bitmap: ``grid[bq, bk]`` says query block ``bq`` visits key block ``bk``."""

    grid: np.ndarray
    block_size: int
    q_len: int
    k_len: int

    def __post_init__(self):
        nq = -(-self.q_len // self.block_size)
        nk = -(-self.k_len // self.block_size)
        if self.grid.shape != (nq, nk):
            raise ValueError(f"grid shape {self.grid.shape} does not match ({nq}, {nk})")
        self.grid.setflags(write=False)

    @property
    def active_block_count(self) -> int:
        return int(np.count_nonzero(self.grid))

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def empty_rows(self) -> np.ndarray:
        return np.flatnonzero(~self.grid.any(axis=1))

    def _extents(self):
        b = self.block_size
        rq = np.minimum(b, self.q_len - b * np.arange(self.grid.shape[0]))
        rk = np.minimum(b, self.k_len - b * np.arange(self.grid.shape[1]))
        return rq, rk

    def covered_pairs(self) -> int:
        """Element pairs inside active tiles, counting edge tiles by true extent."""
        rq, rk = self._extents()
        return int(rq @ self.grid.astype(np.int64) @ rk)

    def covered_fraction(self) -> float:
        return self.covered_pairs() / (self.q_len * self.k_len)

    def expand(self) -> np.ndarray:
        """Element-level boolean matrix of the block expansion."""
        b = self.block_size
        full = np.repeat(np.repeat(self.grid, b, axis=0), b, axis=1)
        return full[: self.q_len, : self.k_len]


def density(mask: BlockMask, true_extents: bool = False) -> float:
    """Active fraction of ``mask``; padded-grid blocks unless ``true_extents``."""
    if true_extents:
        return mask.covered_fraction()
    return mask.active_block_count / mask.grid.size


def build_block_mask(predicate: Predicate, block_size: int = DEFAULT_BLOCK_SIZE) -> BlockMask:
    """Any-active block mask: a tile is on iff some element inside it is on."""
    if block_size < 1:
        raise ValueError(f"block size must be >= 1, got {block_size}")
    b = block_size
    nq = -(-predicate.q_len // b)
    nk = -(-predicate.k_len // b)
    pad = nk * b - predicate.k_len
    grid = np.zeros((nq, nk), dtype=bool)
    for bq in range(nq):
        rows = np.arange(bq * b, min(predicate.q_len, (bq + 1) * b))
        keys = predicate.union_keys(rows)
        if pad:
            keys = np.concatenate([keys, np.zeros(pad, dtype=bool)])
        grid[bq] = keys.reshape(nk, b).any(axis=1)
    return BlockMask(grid, b, predicate.q_len, predicate.k_len)


def block_expanded_predicate(mask: BlockMask) -> Predicate:
    b = mask.block_size
    grid = mask.grid
    return FunctionPredicate(lambda q, k: grid[q // b, k // b], mask.q_len, mask.k_len)


def element_count(predicate: Predicate) -> int:
    total = 0
    for rows in _chunk_rows(predicate.q_len, predicate.k_len):
        total += int(np.sum(predicate.row_counts(rows)))
    return total


def element_density(predicate: Predicate) -> float:
    return element_count(predicate) / (predicate.q_len * predicate.k_len)


# ---------------------------------------------------------------------------
# Frame-major temporal plan


@dataclass(eq=False)
class BandPredicate(Predicate):
    """Temporal slash over (frame-major query row, non-sink key slot).

    Key slot ``j`` holds original token ``band_keys[j]``; band keys are the
    non-sink tokens listed in frame-major order, so each video query's slash
    is one contiguous run of slots.
    """

    spec: MaskSpec
    perm: Permutation
    band_keys: np.ndarray

    def __post_init__(self):
        self.q_len = self.spec.layout.seq_len
        self.k_len = int(self.band_keys.shape[0])
        self._base = TemporalPredicate(self.spec)

    def _eval(self, q, k):
        return self._base._eval(self.perm.inverse[q], self.band_keys[k])

    def union_keys(self, rows):
        lay = self.spec.layout
        p = lay.offset_index[self.perm.inverse[np.asarray(rows)]]
        if (p < 0).any():
            return np.ones(self.k_len, dtype=bool)
        lo, hi = self.spec.offset_window(np.unique(p))
        covered = _mark_ranges(lo, hi, lay.tokens_per_frame)
        pk = lay.offset_index[self.band_keys]
        return (pk >= 0) & covered[np.maximum(pk, 0)]


@dataclass(eq=False)
class TemporalPlan:
    """Everything the frame-major temporal kernel needs, built once per spec."""

    spec: MaskSpec
    block_size: int
    perm: Permutation = field(init=False)
    is_sink: np.ndarray = field(init=False)
    sink_keys: np.ndarray = field(init=False)
    band_keys: np.ndarray = field(init=False)
    band_mask: BlockMask = field(init=False)

    def __post_init__(self):
        lay = self.spec.layout
        self.perm = frame_major_permutation(lay)
        sink = np.zeros(lay.seq_len, dtype=bool)
        if self.spec.include_text:
            sink[: lay.text_len] = True
        if self.spec.include_first_frame:
            sink[lay.frame_index == 0] = True
        self.is_sink = sink
        self.sink_keys = np.flatnonzero(sink)
        order = self.perm.inverse  # original token at each frame-major position
        self.band_keys = order[~sink[order]]
        self.band_mask = build_block_mask(BandPredicate(self.spec, self.perm, self.band_keys), self.block_size)

    @cached_property
    def band_slot(self) -> np.ndarray:
        slot = np.full(self.spec.layout.seq_len, -1, dtype=np.int64)
        slot[self.band_keys] = np.arange(self.band_keys.shape[0])
        return slot

    def reference_predicate(self) -> Predicate:
        """Token-major element predicate the two-pass kernel computes exactly."""
        b = self.block_size
        grid = self.band_mask.grid
        fwd = self.perm.forward
        slot = self.band_slot
        sink = self.is_sink

        def fn(q, k):
            if grid.shape[1] == 0:  # every key is a sink
                return np.broadcast_to(sink[k], np.broadcast_shapes(np.shape(q), np.shape(k)))
            s = slot[k]
            return sink[k] | ((s >= 0) & grid[fwd[q] // b, np.maximum(s, 0) // b])

        n = self.spec.layout.seq_len
        return FunctionPredicate(fn, n, n)

    def covered_pairs(self) -> int:
        return self.band_mask.covered_pairs() + self.spec.layout.seq_len * int(self.sink_keys.shape[0])


def slash_band_halfwidth(spec: MaskSpec) -> int:
    """Largest ``|q' - k'|`` of a slash pair in frame-major coordinates."""
    return spec.slash_width * spec.layout.num_frames - 1


def band_violations(spec: MaskSpec, block_size: int) -> int:
    """Active frame-major slash blocks lying wholly outside the diagonal band.

    Only video rows and columns are checked (text rows are dense by design).
    Zero means the conjugated temporal mask is banded.
    """
    lay = spec.layout
    perm = frame_major_permutation(lay)
    conj = conjugate_predicate(TemporalPredicate(spec.sink_free()), perm)
    h = slash_band_halfwidth(spec)
    b = block_size
    n, t = lay.seq_len, lay.text_len
    nk = -(-n // b)
    bad = 0
    # video rows and columns only; text rows are dense and would light up every tile
    for bq in range(-(-n // b)):
        rows = np.arange(max(bq * b, t), min((bq + 1) * b, n))
        if rows.size == 0:
            continue
        keys = conj.union_keys(rows)
        keys[:t] = False
        active = np.concatenate([keys, np.zeros(nk * b - n, dtype=bool)]).reshape(nk, b).any(axis=1)
        for bk in np.flatnonzero(active):
            k0, k1 = max(bk * b, t), min((bk + 1) * b, n) - 1
            if max(k0 - rows[-1], rows[0] - k1, 0) > h:
                bad += 1
    return bad


def write_pgm(path, grid: np.ndarray) -> None:
    """Binary PGM (P5), one pixel per block: 255 active, 0 inactive."""
    grid = np.asarray(grid, dtype=bool)
    rows, cols = grid.shape
    data = np.where(grid, 255, 0).astype(np.uint8)
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError("not a binary PGM file")
    cols, rows, maxval = (int(g) for g in m.groups())
    if maxval > 255:
        raise ValueError("16-bit PGM is not supported")
    data = np.frombuffer(raw[m.end(): m.end() + rows * cols], dtype=np.uint8)
    return data.reshape(rows, cols)
