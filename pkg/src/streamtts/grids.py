"""Multi-stream token grids, the delay pattern, prompt layout, and Clip&Shuffle.

Token grids are the unit the delay pattern and the product-quantized codec act
on: one row per codebook stream, one column per 40 ms frame. Semantic
sequences are the single-stream special case.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

# Frame/codebook constants at production scale. The toy configs elsewhere in
# this package use smaller codebooks; these document the reference system.
ACOUSTIC_STREAMS = 8
PAPER_CODEBOOK_SIZE = 16_384
PAPER_SEMANTIC_CODEBOOK_SIZE = 16_384
FRAMESHIFT_MS = 40
TOKEN_RATE_HZ = 25  # 1000 / FRAMESHIFT_MS

# Sentinel occupying the speaker-embedding slot in a flat prompt sequence.
SPEAKER_SLOT = -1

MSGRID_MAGIC = b"MSG1"
# Bit 31 of the stream-count header word flags a grid stored in delayed form.
_MSGRID_DELAYED_FLAG = 1 << 31


@dataclass(frozen=True)
class MultiStreamGrid:
    """S x T grid of token ids, one row per codebook stream.

    Args:
        tokens: (S, T) integer array; every id must lie in [0, codebook_size),
            except that a delayed grid may additionally contain the pad id.
        codebook_size: number of codewords K per stream.
    """

    tokens: np.ndarray
    codebook_size: int

    def __post_init__(self):
        tok = np.asarray(self.tokens, dtype=np.int64)
        if tok.ndim != 2:
            raise ValueError(f"grid tokens must be 2-D (S, T), got shape {tok.shape}")
        if tok.shape[0] < 1:
            raise ValueError("grid needs at least one stream")
        object.__setattr__(self, "tokens", tok)

    @property
    def streams(self) -> int:
        return self.tokens.shape[0]

    @property
    def frames(self) -> int:
        return self.tokens.shape[1]

    def validate(self, allow_token: int | None = None) -> None:
        """Check every id is inside the codebook, optionally allowing one extra id."""
        tok = self.tokens
        ok = (tok >= 0) & (tok < self.codebook_size)
        if allow_token is not None:
            ok |= tok == allow_token
        if not ok.all():
            r, c = np.argwhere(~ok)[0]
            raise ValueError(
                f"token id {tok[r, c]} at (row {r}, col {c}) outside codebook of size "
                f"{self.codebook_size}"
            )


@dataclass(frozen=True)
class SemanticSequence:
    """Single-stream token sequence at the 40 ms frame rate."""

    tokens: np.ndarray
    codebook_size: int = PAPER_SEMANTIC_CODEBOOK_SIZE
    frameshift_ms: int = FRAMESHIFT_MS

    def __post_init__(self):
        tok = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        if tok.size and (tok.min() < 0 or tok.max() >= self.codebook_size):
            raise ValueError("semantic token id outside codebook")
        object.__setattr__(self, "tokens", tok)

    def __len__(self) -> int:
        return self.tokens.size

    def as_grid(self) -> MultiStreamGrid:
        return MultiStreamGrid(self.tokens[None, :], self.codebook_size)


@dataclass(frozen=True)
class DelayConfig:
    """Delay-pattern parameters: one reserved pad id, one step of delay per row.

    The pad id sits just outside the codebook (pad_token = K by default) so the
    codebook itself is never shrunk.
    """

    pad_token: int
    per_row_delay: int = 1

    @classmethod
    def for_codebook(cls, codebook_size: int) -> "DelayConfig":
        return cls(pad_token=codebook_size)


def apply_delay_pattern(grid: MultiStreamGrid, cfg: DelayConfig) -> MultiStreamGrid:
    """Stagger each stream one step later than the previous one.

    Row r of the output holds pad for its first r and last S-1-r positions and
    the original tokens in between, so a single autoregressive step predicts
    one column across all streams with causal consistency.

    Raises:
        ValueError: if the pad id already appears in the input grid.
    """
    if np.any(grid.tokens == cfg.pad_token):
        r, c = np.argwhere(grid.tokens == cfg.pad_token)[0]
        raise ValueError(
            f"pad token {cfg.pad_token} already present in undelayed grid at "
            f"(row {r}, col {c})"
        )
    s, t = grid.streams, grid.frames
    d = cfg.per_row_delay
    out = np.full((s, t + d * (s - 1)), cfg.pad_token, dtype=np.int64)
    for r in range(s):
        out[r, r * d : r * d + t] = grid.tokens[r]
    return MultiStreamGrid(out, grid.codebook_size)


def remove_delay_pattern(grid: MultiStreamGrid, cfg: DelayConfig) -> MultiStreamGrid:
    """Invert :func:`apply_delay_pattern`.

    Raises:
        ValueError: if any cell's padness disagrees with the layout the delay
            pattern would have produced; the first offending (row, col) in
            row-major order is named.
    """
    s, tp = grid.streams, grid.frames
    d = cfg.per_row_delay
    t = tp - d * (s - 1)
    if t < 0:
        raise ValueError(
            f"delayed grid with {tp} frames is too short for {s} streams"
        )
    is_pad = grid.tokens == cfg.pad_token
    cols = np.arange(tp)
    for r in range(s):
        should_pad = (cols < r * d) | (cols >= r * d + t)
        bad = np.nonzero(is_pad[r] != should_pad)[0]
        if bad.size:
            c = int(bad[0])
            kind = "missing pad" if should_pad[c] else "unexpected pad"
            raise ValueError(f"malformed delay pattern: {kind} at (row {r}, col {c})")
    out = np.empty((s, t), dtype=np.int64)
    for r in range(s):
        out[r] = grid.tokens[r, r * d : r * d + t]
    return MultiStreamGrid(out, grid.codebook_size)


@dataclass(frozen=True)
class IclLayout:
    """Segments of an in-context-learning prompt for the semantic decoder.

    Serialization order is fixed: speaker slot, prompt text, target text,
    prompt semantic tokens.
    """

    prompt_text: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    target_text: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    prompt_semantic: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    def __post_init__(self):
        for name in ("prompt_text", "target_text", "prompt_semantic"):
            arr = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class IclSequence:
    """Flat prompt sequence plus the start index of each segment after the speaker."""

    tokens: np.ndarray
    boundaries: tuple[int, int, int]


def build_icl_sequence(layout: IclLayout) -> IclSequence:
    """Flatten a prompt layout into [speaker, prompt_text, target_text, prompt_semantic].

    The speaker slot is a single SPEAKER_SLOT sentinel at position 0;
    boundaries record where each of the three token segments begins. Empty
    segments are legal.
    """
    parts = [np.array([SPEAKER_SLOT], dtype=np.int64)]
    boundaries = []
    pos = 1
    for seg in (layout.prompt_text, layout.target_text, layout.prompt_semantic):
        boundaries.append(pos)
        parts.append(seg)
        pos += seg.size
    return IclSequence(np.concatenate(parts), tuple(boundaries))


def split_icl_sequence(seq: IclSequence) -> IclLayout:
    """Recover the segment layout from a flat sequence and its boundaries."""
    b1, b2, b3 = seq.boundaries
    tok = seq.tokens
    if b1 != 1 or not (b1 <= b2 <= b3 <= tok.size):
        raise ValueError(f"inconsistent segment boundaries {seq.boundaries}")
    if tok[0] != SPEAKER_SLOT:
        raise ValueError("flat sequence does not start with the speaker slot")
    return IclLayout(
        prompt_text=tok[b1:b2], target_text=tok[b2:b3], prompt_semantic=tok[b3:]
    )


def clip_and_shuffle(
    features: np.ndarray,
    frame_rate_hz: float,
    rng_seed: int,
    slice_seconds: float = 1.0,
    min_frac: float = 0.25,
    max_frac: float = 0.75,
) -> np.ndarray:
    """Clip a random 25-75% segment into 1 s slices and shuffle them.

    Strips short-time variant information from a feature sequence before
    global-embedding extraction. The segment start is uniform over valid
    positions, the final partial slice is kept and shuffled with the rest,
    and inputs shorter than one slice pass through unshuffled.

    Args:
        features: (n_frames, ...) frame sequence.
        frame_rate_hz: frames per second of `features`.
        rng_seed: seed; the transform is deterministic under it.
    """
    feats = np.asarray(features)
    n = feats.shape[0]
    if n == 0:
        raise ValueError("clip_and_shuffle needs a non-empty feature sequence")
    slice_frames = max(1, int(round(slice_seconds * frame_rate_hz)))
    if n < slice_frames:
        return feats.copy()
    rng = np.random.default_rng(rng_seed)
    lo = max(1, int(round(min_frac * n)))
    hi = max(lo, int(round(max_frac * n)))
    seg_len = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(0, n - seg_len + 1))
    segment = feats[start : start + seg_len]
    n_slices = -(-seg_len // slice_frames)
    order = rng.permutation(n_slices)
    slices = [segment[i * slice_frames : (i + 1) * slice_frames] for i in order]
    return np.concatenate(slices, axis=0)


def save_msgrid(path, grid: MultiStreamGrid, pad_token: int | None = None,
                delayed: bool = False) -> None:
    """Write a grid in MSGRID v1: 'MSG1', u32 S, u32 T, u32 K, u32 pad, u32 rows.

    All integers little-endian; tokens u32 row-major. Bit 31 of the S word is
    reserved to flag grids stored in delayed form.
    """
    if pad_token is None:
        pad_token = grid.codebook_size
    s_word = grid.streams | (_MSGRID_DELAYED_FLAG if delayed else 0)
    header = MSGRID_MAGIC + struct.pack(
        "<IIII", s_word, grid.frames, grid.codebook_size, pad_token
    )
    body = grid.tokens.astype("<u4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(body)


def load_msgrid(path) -> tuple[MultiStreamGrid, int, bool]:
    """Read an MSGRID v1 file; returns (grid, pad_token, delayed)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MSGRID_MAGIC:
        raise ValueError(f"{path}: not an MSGRID v1 file")
    s_word, t, k, pad = struct.unpack("<IIII", raw[4:20])
    delayed = bool(s_word & _MSGRID_DELAYED_FLAG)
    s = s_word & ~_MSGRID_DELAYED_FLAG
    expect = 20 + 4 * s * t
    if len(raw) != expect:
        raise ValueError(f"{path}: expected {expect} bytes, found {len(raw)}")
    tokens = np.frombuffer(raw[20:], dtype="<u4").reshape(s, t).astype(np.int64)
    return MultiStreamGrid(tokens, k), pad, delayed
