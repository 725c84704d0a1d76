"""Discrete codec token grids and the infilling layout built on them.

A grid is an ``(L, K)`` integer array: ``L`` frames, ``K`` codebook levels.
Masked spans are cut out, replaced by mask tokens and appended to the end of
the sequence (causal masking), after which the codebook delay pattern shifts
level ``k`` right by ``k`` frames (0-based) so coarse levels are produced first.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

MAX_SPANS = 3
MAX_SPAN_FRAMES = 600
TOKEN_MAGIC = b"MAVETOK1"


class MalformedSequenceError(ValueError):
    pass


class MalformedDelayError(ValueError):
    pass


@dataclass(frozen=True)
class SpecialVocab:
    """Special ids appended after the ``S`` codebook entries, shared by every level."""

    base_size: int = 1024
    num_masks: int = MAX_SPANS

    def mask(self, j: int) -> int:
        """Id of mask token ``j`` (1-based)."""
        if not 1 <= j <= self.num_masks:
            raise ValueError(f"mask index {j} outside 1..{self.num_masks}")
        return self.base_size + j - 1

    @property
    def eos(self) -> int:
        return self.base_size + self.num_masks

    @property
    def bos(self) -> int:
        return self.base_size + self.num_masks + 1

    @property
    def pad(self) -> int:
        return self.base_size + self.num_masks + 2

    @property
    def size(self) -> int:
        return self.base_size + self.num_masks + 3

    def is_mask(self, token: int) -> bool:
        return self.base_size <= token < self.base_size + self.num_masks

    def mask_index(self, token: int) -> int:
        return token - self.base_size + 1

    def is_special(self, token: int) -> bool:
        return token >= self.base_size

    def frame(self, token: int, levels: int) -> np.ndarray:
        return np.full(levels, token, dtype=np.int64)


@dataclass
class CodecGrid:
    tokens: np.ndarray
    codebook_size: int = 1024
    frame_rate_hz: int = 50

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1 or self.tokens.shape[1] < 1:
            raise ValueError(f"grid must be L x K with L, K >= 1, got {self.tokens.shape}")
        if self.tokens.min() < 0 or self.tokens.max() >= self.codebook_size:
            raise ValueError("grid tokens must lie in [0, codebook_size)")

    @property
    def num_frames(self) -> int:
        return self.tokens.shape[0]

    @property
    def num_levels(self) -> int:
        return self.tokens.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CodecGrid):
            return NotImplemented
        return (
            self.codebook_size == other.codebook_size
            and self.tokens.shape == other.tokens.shape
            and bool(np.array_equal(self.tokens, other.tokens))
        )


class Span(NamedTuple):
    start: int
    length: int


@dataclass
class SpanMask:
    spans: list[Span] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.spans = [Span(int(s), int(n)) for s, n in self.spans]

    def __len__(self) -> int:
        return len(self.spans)

    def __iter__(self):
        return iter(self.spans)

    def validate(self, num_frames: int, max_len: int = MAX_SPAN_FRAMES) -> None:
        prev_end = 0
        for start, length in self.spans:
            if not 1 <= length <= max_len:
                raise ValueError(f"span length {length} outside [1, {max_len}]")
            if start < prev_end:
                raise ValueError("spans must be sorted and non-overlapping")
            if start + length > num_frames:
                raise ValueError(f"span {start}:{length} exceeds {num_frames} frames")
            prev_end = start + length

    @classmethod
    def parse(cls, text: str) -> "SpanMask":
        """Parse ``"start:len[,start:len...]"``; an empty string is an empty mask."""
        spans = []
        for item in filter(None, (p.strip() for p in text.split(","))):
            try:
                a, b = item.split(":")
                spans.append(Span(int(a), int(b)))
            except ValueError as exc:
                raise ValueError(f"bad span {item!r}, expected start:len") from exc
        return cls(sorted(spans))

    def format(self) -> str:
        return ",".join(f"{s}:{n}" for s, n in self.spans)


def sample_spans(
    num_frames: int,
    rng: np.random.Generator,
    lam: float = 1.0,
    cap: int = MAX_SPANS,
    max_len: int = MAX_SPAN_FRAMES,
) -> SpanMask:
    """Draw ``min(Poisson(lam), cap)`` non-overlapping spans.

    Each span length is uniform on ``[1, min(max_len, longest free gap)]`` and
    its position uniform over all placements that avoid earlier spans.
    """
    if num_frames < 1:
        raise ValueError("need at least one frame")
    m = min(int(rng.poisson(lam)), cap, num_frames)
    gaps = [(0, num_frames)]  # free [start, end) intervals
    spans: list[Span] = []
    for _ in range(m):
        widest = max(e - s for s, e in gaps)
        if widest == 0:
            break
        length = int(rng.integers(1, min(max_len, widest) + 1))
        counts = [max(e - s - length + 1, 0) for s, e in gaps]
        pick = int(rng.integers(sum(counts)))
        for gi, c in enumerate(counts):
            if pick < c:
                break
            pick -= c
        s, e = gaps[gi]
        start = s + pick
        spans.append(Span(start, length))
        gaps[gi : gi + 1] = [g for g in ((s, start), (start + length, e)) if g[1] > g[0]]
        if not gaps:
            break
    spans.sort()
    return SpanMask(spans)


# ---------------------------------------------------------------------------
# causal-masking rearrangement


class SpanInfo(NamedTuple):
    mask_id: int
    start: int
    length: int


@dataclass
class RearrangedSequence:
    frames: np.ndarray  # (L', K) over the extended vocab
    spans: list[SpanInfo]
    vocab: SpecialVocab

    def __len__(self) -> int:
        return self.frames.shape[0]


def rearrange(grid: CodecGrid, spans: SpanMask, vocab: SpecialVocab) -> RearrangedSequence:
    """Move masked spans to the end: ``BOS, context.., M_j.., (M_j, span, EOS)..``."""
    if len(spans) > vocab.num_masks:
        raise ValueError(f"{len(spans)} spans exceeds the limit of {vocab.num_masks}")
    spans.validate(grid.num_frames)
    K = grid.num_levels
    tok = grid.tokens
    head = [vocab.frame(vocab.bos, K)[None]]
    tail = []
    info = []
    cursor = 0
    for j, (start, length) in enumerate(spans, start=1):
        m = vocab.frame(vocab.mask(j), K)[None]
        head.append(tok[cursor:start])
        head.append(m)
        tail.extend([m, tok[start : start + length], vocab.frame(vocab.eos, K)[None]])
        info.append(SpanInfo(vocab.mask(j), start, length))
        cursor = start + length
    head.append(tok[cursor:])
    frames = np.concatenate(head + tail, axis=0)
    return RearrangedSequence(frames, info, vocab)


def restore(seq: RearrangedSequence | np.ndarray, vocab: SpecialVocab | None = None) -> CodecGrid:
    """Splice each trailing ``M_j .. EOS`` block back into its placeholder.

    Works from the frames alone (span metadata is not needed), so it also
    converts generated infills of any length back into a grid.
    """
    if isinstance(seq, RearrangedSequence):
        frames, vocab = seq.frames, seq.vocab
    else:
        frames = np.asarray(seq)
        if vocab is None:
            raise TypeError("vocab required when restoring a raw frame array")
    lead = frames[:, 0]
    pos = 1 if len(lead) and lead[0] == vocab.bos else 0
    context: list[np.ndarray | int] = []  # frame rows or placeholder mask ids
    seen: list[int] = []
    while pos < len(lead):
        t = int(lead[pos])
        if vocab.is_mask(t):
            if t in seen:
                break
            seen.append(t)
            context.append(t)
        elif vocab.is_special(t):
            raise MalformedSequenceError(f"unexpected special token {t} in context at frame {pos}")
        else:
            context.append(frames[pos])
        pos += 1
    filled: dict[int, np.ndarray] = {}
    K = frames.shape[1]
    while pos < len(lead):
        t = int(lead[pos])
        if not vocab.is_mask(t) or t not in seen:
            raise MalformedSequenceError(f"expected a trailing mask trigger at frame {pos}, got {t}")
        end = pos + 1
        while end < len(lead) and lead[end] != vocab.eos:
            if vocab.is_mask(int(lead[end])):
                break
            end += 1
        if end >= len(lead) or lead[end] != vocab.eos:
            raise MalformedSequenceError(f"span for mask {vocab.mask_index(t)} has no EOS_SPAN")
        filled[t] = frames[pos + 1 : end].reshape(-1, K)
        pos = end + 1
    rows = []
    for item in context:
        if isinstance(item, int):
            if item not in filled:
                raise MalformedSequenceError(
                    f"mask {vocab.mask_index(item)} has no trailing block"
                )
            rows.append(filled[item])
        else:
            rows.append(item[None])
    out = np.concatenate(rows, axis=0) if rows else np.zeros((0, K), dtype=np.int64)
    return CodecGrid(out, codebook_size=vocab.base_size)


class EditPlan(NamedTuple):
    mask_ids: list[int]  # trigger ids still to be generated, in order (first is in the prompt)
    spans: list[SpanInfo]


def build_edit_prompt(
    grid: CodecGrid, spans: SpanMask, vocab: SpecialVocab
) -> tuple[np.ndarray, EditPlan]:
    """Rearranged frames cut right after the first trailing mask trigger."""
    seq = rearrange(grid, spans, vocab)
    if not seq.spans:
        return seq.frames, EditPlan([], [])
    context_len = grid.num_frames - sum(s.length for s in seq.spans) + len(seq.spans) + 1
    prompt = seq.frames[: context_len + 1]
    return prompt, EditPlan([s.mask_id for s in seq.spans], seq.spans)


# ---------------------------------------------------------------------------
# codebook delay pattern


def apply_delay(frames: np.ndarray, pad: int) -> np.ndarray:
    """Shift level ``k`` (0-based) right by ``k`` frames, padding the corners."""
    frames = np.asarray(frames)
    L, K = frames.shape
    out = np.full((L + K - 1, K), pad, dtype=np.int64)
    for k in range(K):
        out[k : k + L, k] = frames[:, k]
    return out


def undo_delay(delayed: np.ndarray, pad: int) -> np.ndarray:
    delayed = np.asarray(delayed)
    T, K = delayed.shape
    L = T - K + 1
    if L < 0:
        raise MalformedDelayError(f"{T} delayed frames cannot hold {K} levels")
    out = np.empty((L, K), dtype=np.int64)
    for k in range(K):
        col = delayed[:, k]
        if (col[:k] != pad).any() or (col[k + L :] != pad).any():
            raise MalformedDelayError(f"level {k + 1}: non-PAD token in the delay triangle")
        body = col[k : k + L]
        if (body == pad).any():
            raise MalformedDelayError(f"level {k + 1}: PAD outside the delay triangle")
        out[:, k] = body
    return out


# ---------------------------------------------------------------------------
# files


def write_token_file(path: str | Path, tokens: np.ndarray, codebook_size: int) -> None:
    tokens = np.asarray(tokens)
    L, K = tokens.shape
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) > 0xFFFF:
        raise ValueError("token ids must fit in u16")
    header = TOKEN_MAGIC + struct.pack("<IHI", L, K, codebook_size)
    Path(path).write_bytes(header + np.ascontiguousarray(tokens, dtype="<u2").tobytes())


def read_token_file(path: str | Path) -> tuple[np.ndarray, int]:
    """Return ``(tokens, codebook_size)``; extended-vocab ids are allowed."""
    buf = Path(path).read_bytes()
    if buf[:8] != TOKEN_MAGIC:
        raise ValueError(f"{path}: not a MAVETOK1 file")
    L, K, S = struct.unpack_from("<IHI", buf, 8)
    body = buf[18:]
    if len(body) != 2 * L * K:
        raise ValueError(f"{path}: expected {L}x{K} tokens, found {len(body) // 2}")
    tokens = np.frombuffer(body, dtype="<u2").reshape(L, K).astype(np.int64)
    return tokens, S


def save_grid(path: str | Path, grid: CodecGrid) -> None:
    write_token_file(path, grid.tokens, grid.codebook_size)


def load_grid(path: str | Path) -> CodecGrid:
    tokens, S = read_token_file(path)
    return CodecGrid(tokens, codebook_size=S)


@dataclass
class ManifestRecord:
    path: str
    text: str
    extra: list[str] = field(default_factory=list)


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    """Tab-separated ``grid path, transcript[, extra columns]``; relative paths resolve against the manifest."""
    base = Path(path).parent
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) < 2:
            raise ValueError(f"{path}:{lineno}: expected path<TAB>transcript")
        p = Path(cols[0])
        out.append(ManifestRecord(str(p if p.is_absolute() else base / p), cols[1], cols[2:]))
    return out


def write_manifest(path: str | Path, records: Sequence[ManifestRecord]) -> None:
    base = Path(path).parent.resolve()
    lines = []
    for r in records:
        p = Path(r.path)
        try:
            p = p.resolve().relative_to(base)
        except ValueError:
            pass
        lines.append("\t".join([str(p), r.text, *r.extra]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
