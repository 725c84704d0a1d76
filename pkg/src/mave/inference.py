"""Nucleus sampling and the two generation flows: span editing and zero-shot continuation.

Generation runs in the delayed domain.  The rearranged sequence ``R`` is
grown row by row; delayed frame ``t`` holds ``R[t - k][k]`` at level ``k``,
so when level 0 opens a new row the higher levels are still completing
earlier rows.  Cells already known (prompt, sentinels) are forced, the rest
are sampled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .codec_stream import (
    CodecGrid,
    SpanMask,
    apply_delay,
    build_edit_prompt,
    restore,
    undo_delay,
)
from .decoder import MaveModel, frames_tensor
from .text_frontend import PhonemeTable, phonemize

UNKNOWN = -1


@dataclass
class GenerationParams:
    top_p: float = 0.8
    temperature: float = 1.0
    max_frames_per_span: int = 600
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 1 <= self.max_frames_per_span <= 600:
            raise ValueError("max_frames_per_span must lie in [1, 600]")


def nucleus_set(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Ids of the smallest descending-probability prefix whose mass reaches ``top_p``.

    Ties sort by lower id first.  A 1e-12 slack absorbs rounding in the cumulative sum.
    """
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, top_p - 1e-12, side="left"))
    return order[: min(k, len(order) - 1) + 1]


def nucleus_sample(
    logits,
    rng: np.random.Generator,
    top_p: float = 0.8,
    temperature: float = 1.0,
    allowed: np.ndarray | None = None,
) -> int:
    """Temperature -> softmax -> top-p truncation -> renormalise -> draw one id.

    ``allowed`` optionally restricts the support (boolean mask over the vocab)
    before the nucleus is formed.
    """
    z = np.asarray(logits.detach().cpu() if isinstance(logits, torch.Tensor) else logits, dtype=np.float64)
    z = z / temperature
    if allowed is not None:
        z = np.where(allowed, z, -np.inf)
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    keep = nucleus_set(p, top_p)
    q = p[keep] / p[keep].sum()
    i = int(np.searchsorted(np.cumsum(q), rng.random(), side="right"))
    return int(keep[min(i, len(keep) - 1)])


@dataclass
class GenerationResult:
    grid: CodecGrid | None  # None when a continuation ended immediately
    truncated: bool = False
    span_lengths: list[int] = field(default_factory=list)
    frames_generated: int = 0
    delayed: np.ndarray | None = None


def _generate_spans(
    model: MaveModel,
    prompt: np.ndarray,
    triggers: Sequence[int],
    phonemes: Sequence[int],
    params: GenerationParams,
    rng: np.random.Generator,
):
    """Generate every trailing span block after ``prompt`` (which ends in the first trigger).

    Returns the completed rearranged rows, the delayed stream, per-span lengths
    and a truncation flag.
    """
    vocab = model.vocab
    K = model.config.decoder.num_levels
    S, V = vocab.base_size, vocab.size
    allow_first = np.zeros(V, dtype=bool)
    allow_first[:S] = True
    allow_first[vocab.eos] = True
    allow_rest = np.zeros(V, dtype=bool)
    allow_rest[:S] = True

    rows = [r.copy() for r in np.asarray(prompt, dtype=np.int64)]
    p = len(rows) - 1
    pending = list(triggers[1:])
    lengths = [0]
    truncated = False
    finished = False

    def cell(t: int, k: int) -> int:
        r = t - k
        if r < 0 or r >= len(rows):
            return vocab.pad
        return int(rows[r][k])

    delayed = [np.array([cell(t, k) for k in range(K)]) for t in range(p + 1)]
    model.eval()
    with torch.no_grad():
        phon = torch.tensor([list(phonemes)])
        state, logits = model.prefill(frames_tensor(np.stack(delayed))[None], phon)
        t = p
        while True:
            t += 1
            lg = logits[0]
            frame = np.empty(K, dtype=np.int64)
            for k in range(K):
                r = t - k
                if k == 0:
                    if r < len(rows):  # trigger row queued behind an EOS
                        frame[0] = rows[r][0]
                        continue
                    if finished:
                        frame[0] = vocab.pad
                        continue
                    if lengths[-1] >= params.max_frames_per_span:
                        tok = vocab.eos
                        truncated = True
                    else:
                        tok = nucleus_sample(lg[0], rng, params.top_p, params.temperature, allow_first)
                    if tok == vocab.eos:
                        rows.append(vocab.frame(vocab.eos, K))
                        if pending:
                            rows.append(vocab.frame(pending.pop(0), K))
                            lengths.append(0)
                        else:
                            finished = True
                    else:
                        row = np.full(K, UNKNOWN, dtype=np.int64)
                        row[0] = tok
                        rows.append(row)
                        lengths[-1] += 1
                    frame[0] = tok
                elif 0 <= r < len(rows) and rows[r][k] == UNKNOWN:
                    rows[r][k] = nucleus_sample(lg[k], rng, params.top_p, params.temperature, allow_rest)
                    frame[k] = rows[r][k]
                else:
                    frame[k] = cell(t, k)
            delayed.append(frame)
            if finished and t >= len(rows) - 1 + K - 1:
                break
            logits = model.step(state, frames_tensor(frame)[None])
    return np.stack(rows), np.stack(delayed), lengths, truncated


def generate_edit(
    model: MaveModel,
    grid: CodecGrid,
    spans: SpanMask,
    transcript: str,
    table: PhonemeTable,
    params: GenerationParams | None = None,
) -> GenerationResult:
    """Regenerate ``spans`` of ``grid`` so they match the (edited) ``transcript``; one pass."""
    params = params or GenerationParams()
    vocab = model.vocab
    if not len(spans):
        return GenerationResult(CodecGrid(grid.tokens.copy(), grid.codebook_size))
    prompt, plan = build_edit_prompt(grid, spans, vocab)
    rng = np.random.default_rng(params.seed)
    phonemes = phonemize(transcript, table)
    rows, delayed, lengths, truncated = _generate_spans(model, prompt, plan.mask_ids, phonemes, params, rng)
    rearranged = undo_delay(delayed, vocab.pad)
    if not np.array_equal(rearranged, rows):
        raise AssertionError("delayed stream disagrees with generated rows")
    out = restore(rearranged, vocab)
    return GenerationResult(out, truncated, lengths, sum(lengths), delayed)


def generate_tts(
    model: MaveModel,
    reference: CodecGrid,
    reference_text: str,
    target_text: str,
    table: PhonemeTable,
    params: GenerationParams | None = None,
) -> GenerationResult:
    """Continue a reference prompt with speech for ``target_text``.

    The target is laid out as a masked span at the end of the reference, so
    the prompt is ``BOS, reference, M1, M1`` and generation stops at EOS_SPAN.
    The text encoder sees reference and target transcripts concatenated.
    Only the continuation is returned.
    """
    params = params or GenerationParams()
    vocab = model.vocab
    K = reference.num_levels
    if reference.num_frames < 1:
        raise ValueError("reference grid is empty")
    m1 = vocab.frame(vocab.mask(1), K)
    prompt = np.concatenate([vocab.frame(vocab.bos, K)[None], reference.tokens, m1[None], m1[None]])
    text = f"{reference_text} {target_text}".strip()
    rng = np.random.default_rng(params.seed)
    phonemes = phonemize(text, table)
    rows, delayed, lengths, truncated = _generate_spans(model, prompt, [vocab.mask(1)], phonemes, params, rng)
    rearranged = undo_delay(delayed, vocab.pad)
    start = len(prompt)
    body = rearranged[start : start + lengths[0]]
    grid = CodecGrid(body, reference.codebook_size) if len(body) else None
    return GenerationResult(grid, truncated, lengths, lengths[0], delayed)
