"""Training examples, the level-weighted NLL, the training loop and synthetic data.

The synthetic corpus is a deterministic text -> token task: each phoneme
spans ``frames_per_phoneme`` frames and the token at (frame, level) is a fixed
hash of (phoneme, offset within phoneme, level, speaker).  Filling a masked
span correctly therefore needs the transcript (through cross-attention) and
the speaker (from surrounding tokens).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from . import numerics as nx
from .codec_stream import (
    CodecGrid,
    ManifestRecord,
    SpanMask,
    SpecialVocab,
    apply_delay,
    load_grid,
    read_manifest,
    rearrange,
    sample_spans,
    save_grid,
    write_manifest,
)
from .decoder import MaveModel, ModelConfig
from .text_frontend import PhonemeTable, phonemize

log = logging.getLogger(__name__)

DEFAULT_ALPHA = (0.25, 0.25, 0.25, 0.05, 0.05, 0.05, 0.05, 0.05)


class DegenerateBatchError(ValueError):
    pass


class NumericAbort(RuntimeError):
    pass


def loss_weights(num_levels: int) -> tuple[float, ...]:
    """The 8-level default, or its first ``num_levels`` entries renormalised to sum to 1."""
    if num_levels == len(DEFAULT_ALPHA):
        return DEFAULT_ALPHA
    if num_levels > len(DEFAULT_ALPHA):
        raise ValueError("no default weights beyond 8 levels")
    head = DEFAULT_ALPHA[:num_levels]
    total = sum(head)
    return tuple(a / total for a in head)


def validate_weights(alpha: Sequence[float]) -> None:
    if any(a <= 0 for a in alpha):
        raise ValueError("loss weights must be positive")
    if any(a < b for a, b in zip(alpha, alpha[1:])):
        raise ValueError("loss weights must be non-increasing over levels")


# ---------------------------------------------------------------------------
# examples and loss


@dataclass
class TrainExample:
    inputs: np.ndarray  # (T, K) delayed frames fed to the decoder
    targets: np.ndarray  # (T, K) next delayed frame
    valid: np.ndarray  # (T, K) bool, cell participates in the loss
    infill: np.ndarray  # (T, K) bool, target is audio from a trailing span block
    phonemes: list[int]
    spans: SpanMask


def example_from_spans(grid: CodecGrid, phonemes: Sequence[int], spans: SpanMask, vocab: SpecialVocab) -> TrainExample:
    seq = rearrange(grid, spans, vocab)
    delayed = apply_delay(seq.frames, vocab.pad)
    targets = delayed[1:]
    special = (targets >= vocab.base_size) & (targets != vocab.eos)
    # rearranged rows holding trailing span audio
    is_infill_row = np.zeros(len(seq), dtype=bool)
    row = len(seq) - sum(s.length + 2 for s in seq.spans)
    for s in seq.spans:
        is_infill_row[row + 1 : row + 1 + s.length] = True
        row += s.length + 2
    delayed_infill = apply_delay(np.repeat(is_infill_row[:, None], grid.num_levels, 1).astype(np.int64), 0)
    return TrainExample(
        inputs=delayed[:-1],
        targets=targets,
        valid=~special,
        infill=delayed_infill[1:].astype(bool),
        phonemes=list(phonemes),
        spans=spans,
    )


def make_training_example(
    grid: CodecGrid,
    phonemes: Sequence[int],
    rng: np.random.Generator,
    vocab: SpecialVocab,
    max_span_frames: int = 600,
) -> TrainExample:
    """Sample spans, rearrange, delay and shift into a next-frame prediction example."""
    spans = sample_spans(grid.num_frames, rng, max_len=max_span_frames)
    return example_from_spans(grid, phonemes, spans, vocab)


def weighted_nll(
    logits: torch.Tensor, targets: torch.Tensor, valid: torch.Tensor, alpha: Sequence[float]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sum over levels of ``alpha_k`` times the mean NLL of the valid cells of level k.

    ``logits`` is (..., K, V); ``targets`` and ``valid`` are (..., K).
    Returns the total and the per-level means.
    """
    if logits.shape[:-1] != targets.shape or targets.shape != valid.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} / {tuple(targets.shape)} / {tuple(valid.shape)}")
    K = logits.shape[-2]
    if len(alpha) != K:
        raise ValueError(f"{len(alpha)} weights for {K} levels")
    if not bool(valid.any()):
        raise DegenerateBatchError("no valid target in batch")
    logp = nx.log_softmax(logits, axis=-1)
    safe_t = torch.where(valid, targets, torch.zeros_like(targets))
    nll = -logp.gather(-1, safe_t[..., None])[..., 0]
    nll = torch.where(valid, nll, torch.zeros_like(nll))
    v = valid.reshape(-1, K)
    counts = v.sum(0)
    per_level = nll.reshape(-1, K).sum(0) / counts.clamp(min=1)
    w = torch.as_tensor(alpha, dtype=per_level.dtype)
    return (w * per_level).sum(), per_level.detach()


def collate(examples: Sequence[TrainExample], vocab: SpecialVocab):
    """Right-pad a list of examples into batch tensors."""
    T = max(len(e.inputs) for e in examples)
    M = max(len(e.phonemes) for e in examples)
    K = examples[0].inputs.shape[1]
    B = len(examples)
    inputs = np.full((B, T, K), vocab.pad, dtype=np.int64)
    targets = np.full((B, T, K), vocab.pad, dtype=np.int64)
    valid = np.zeros((B, T, K), dtype=bool)
    infill = np.zeros((B, T, K), dtype=bool)
    phon = np.zeros((B, M), dtype=np.int64)
    pmask = np.zeros((B, M), dtype=bool)
    for b, e in enumerate(examples):
        n = len(e.inputs)
        inputs[b, :n], targets[b, :n], valid[b, :n], infill[b, :n] = e.inputs, e.targets, e.valid, e.infill
        phon[b, : len(e.phonemes)] = e.phonemes
        pmask[b, : len(e.phonemes)] = True
    t = torch.from_numpy
    return t(inputs), t(targets), t(valid), t(infill), t(phon), t(pmask)


# ---------------------------------------------------------------------------
# synthetic corpus

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass
class SynthTask:
    codebook_size: int = 256
    num_levels: int = 4
    num_phonemes: int = 20  # letters a.. of the identity table
    frames_per_phoneme: int = 4
    num_speakers: int = 4
    min_phonemes: int = 8
    max_phonemes: int = 14
    max_word_len: int = 2
    salt: int = 0x4D415645

    @property
    def letters(self) -> str:
        return "abcdefghijklmnopqrstuvwxyz"[: self.num_phonemes]

    def token(self, phoneme: int, offset: int, level: int, speaker: int) -> int:
        key = (((phoneme * 256 + offset) * 64 + level) * 4096 + speaker) ^ (self.salt << 32)
        return splitmix64(key) % self.codebook_size

    def table(self) -> np.ndarray:
        """(num_phonemes, frames_per_phoneme, num_speakers, K) token lookup."""
        P, r, N, K = self.num_phonemes, self.frames_per_phoneme, self.num_speakers, self.num_levels
        out = np.empty((P, r, N, K), dtype=np.int64)
        for p in range(P):
            for o in range(r):
                for s in range(N):
                    for k in range(K):
                        out[p, o, s, k] = self.token(p, o, k, s)
        return out

    def render(self, letters: str, speaker: int) -> np.ndarray:
        """Token grid for a string of phoneme letters (spaces ignored)."""
        idx = [self.letters.index(ch) for ch in letters if ch != " "]
        tab = self.table()
        r = self.frames_per_phoneme
        return np.stack([tab[p, o, speaker] for p in idx for o in range(r)])

    def word_frames(self, transcript: str) -> list[tuple[int, int]]:
        """Frame (start, length) of every word, from the known alignment."""
        out, cursor = [], 0
        for w in transcript.split():
            n = len(w) * self.frames_per_phoneme
            out.append((cursor, n))
            cursor += n
        return out

    def decode(self, frames: np.ndarray) -> list[tuple[int, int, int] | None]:
        """Invert rendering frame by frame: (phoneme, offset, speaker) or None if no exact match."""
        tab = self.table()
        lookup = {tuple(tab[p, o, s]): (p, o, s) for p in range(tab.shape[0]) for o in range(tab.shape[1]) for s in range(tab.shape[2])}
        return [lookup.get(tuple(int(v) for v in f)) for f in np.asarray(frames)]

    def phoneme_table(self) -> PhonemeTable:
        return PhonemeTable.identity(self.letters)

    def sample_utterance(self, rng: np.random.Generator) -> tuple[str, int, np.ndarray]:
        n = int(rng.integers(self.min_phonemes, self.max_phonemes + 1))
        order = rng.choice(self.num_phonemes, size=n, replace=False)
        letters = "".join(self.letters[i] for i in order)
        words, i = [], 0
        while i < n:
            w = int(rng.integers(1, self.max_word_len + 1))
            words.append(letters[i : i + w])
            i += w
        transcript = " ".join(words)
        speaker = int(rng.integers(self.num_speakers))
        return transcript, speaker, self.render(transcript, speaker)


def synth_corpus(
    out_dir: str | Path, num_utterances: int, rng: np.random.Generator, task: SynthTask | None = None
) -> Path:
    """Write grids, ``manifest.tsv`` and ``task.json``; returns the manifest path."""
    task = task or SynthTask()
    out = Path(out_dir)
    (out / "grids").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(num_utterances):
        transcript, speaker, tokens = task.sample_utterance(rng)
        path = out / "grids" / f"utt{i:05d}.tok"
        save_grid(path, CodecGrid(tokens, codebook_size=task.codebook_size))
        records.append(ManifestRecord(str(path), transcript))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, records)
    (out / "task.json").write_text(json.dumps(asdict(task), indent=2) + "\n")
    return manifest


def load_task(manifest: str | Path) -> SynthTask | None:
    p = Path(manifest).parent / "task.json"
    return SynthTask(**json.loads(p.read_text())) if p.exists() else None


def make_word_masked_eval(
    records: Sequence[ManifestRecord], rng: np.random.Generator, task: SynthTask | None = None
) -> list[ManifestRecord]:
    """Mask one contiguous run of ``m ~ U[1, min(L-5, 15)]`` words per utterance.

    Utterances under five words are dropped.  The masked frames are written as
    a third column ``start:len``.
    """
    task = task or SynthTask()
    out = []
    for r in records:
        words = r.text.split()
        L = len(words)
        if L < 5:
            continue
        M = min(L - 5, 15)
        if M < 1:
            continue  # exactly five words: nothing may be masked
        m = int(rng.integers(1, M + 1))
        first = int(rng.integers(0, L - m + 1))
        frames = task.word_frames(r.text)
        start = frames[first][0]
        length = sum(n for _, n in frames[first : first + m])
        out.append(ManifestRecord(r.path, r.text, [f"{start}:{length}", f"words={first}:{m}"]))
    return out


def make_frame_masked_eval(
    records: Sequence[ManifestRecord], rng: np.random.Generator, max_span_frames: int = 600
) -> list[ManifestRecord]:
    out = []
    for r in records:
        grid = load_grid(r.path)
        spans = SpanMask()
        while not len(spans):
            spans = sample_spans(grid.num_frames, rng, max_len=max_span_frames)
        out.append(ManifestRecord(r.path, r.text, [spans.format()]))
    return out


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainerConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    warmup_steps: int = 500
    steps: int = 3500
    batch_frames: int = 800
    grad_accum: int = 1
    grad_clip: float = 1.0
    seed: int = 0
    max_span_frames: int = 32  # desk utterances are 32-56 frames
    min_frames: int = 1
    max_frames: int = 1000
    checkpoint_every: int = 500
    log_every: int = 1
    time_budget_s: float = 0.0  # 0 = no limit

    def __post_init__(self) -> None:
        for name in ("lr", "warmup_steps", "steps", "batch_frames", "grad_accum", "max_span_frames"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def lr_at(self, step: int) -> float:
        """Linear warmup then inverse square-root decay."""
        s = step + 1
        return self.lr * min(s / self.warmup_steps, math.sqrt(self.warmup_steps / s))


@dataclass
class Utterance:
    grid: CodecGrid
    phonemes: list[int]
    text: str


def load_utterances(manifest: str | Path, table: PhonemeTable) -> list[Utterance]:
    return [
        Utterance(load_grid(r.path), phonemize(r.text, table), r.text)
        for r in read_manifest(manifest)
    ]


def set_seed(seed: int) -> None:
    torch.manual_seed(seed)


def config_digest(*objs) -> str:
    blob = json.dumps([asdict(o) for o in objs], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class Trainer:
    def __init__(self, model: MaveModel, utterances: Sequence[Utterance], config: TrainerConfig, alpha: Sequence[float] | None = None):
        self.model = model
        self.config = config
        self.vocab = model.vocab
        K = model.config.decoder.num_levels
        self.alpha = tuple(alpha) if alpha is not None else loss_weights(K)
        validate_weights(self.alpha)
        self.utterances = [
            u for u in utterances if config.min_frames <= u.grid.num_frames <= config.max_frames
        ]
        if not self.utterances:
            raise ValueError("no utterances within the configured length limits")
        self.rng = np.random.default_rng(config.seed)
        self.opt = torch.optim.Adam(
            model.parameters(), lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps
        )
        self.step = 0
        self._order: list[int] = []

    def batches(self) -> Iterator[list[TrainExample]]:
        while True:
            batch, frames = [], 0
            while frames < self.config.batch_frames:
                if not self._order:
                    self._order = self.rng.permutation(len(self.utterances)).tolist()
                u = self.utterances[self._order.pop()]
                ex = make_training_example(u.grid, u.phonemes, self.rng, self.vocab, self.config.max_span_frames)
                batch.append(ex)
                frames += len(ex.inputs)
            yield batch

    def train_step(self, batches) -> dict:
        self.model.train()
        cfg = self.config
        lr = cfg.lr_at(self.step)
        for g in self.opt.param_groups:
            g["lr"] = lr
        self.opt.zero_grad(set_to_none=True)
        total, levels = 0.0, None
        for _ in range(cfg.grad_accum):
            inputs, targets, valid, _, phon, pmask = collate(next(batches), self.vocab)
            logits = self.model(inputs, phon, pmask)
            loss, per_level = weighted_nll(logits, targets, valid, self.alpha)
            if not bool(torch.isfinite(loss)):
                raise NumericAbort(f"non-finite loss at step {self.step}")
            (loss / cfg.grad_accum).backward()
            total += loss.item() / cfg.grad_accum
            levels = per_level / cfg.grad_accum if levels is None else levels + per_level / cfg.grad_accum
        gnorm = torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip).item()
        if not math.isfinite(gnorm):
            raise NumericAbort(f"non-finite gradient norm at step {self.step}")
        self.opt.step()
        self.step += 1
        return {
            "step": self.step,
            "loss": round(total, 6),
            "level_losses": [round(float(x), 6) for x in levels],
            "lr": lr,
            "grad_norm": round(gnorm, 6),
        }


def train(
    utterances: Sequence[Utterance],
    model_config: ModelConfig,
    config: TrainerConfig,
    out_dir: str | Path | None = None,
    log_fn=None,
) -> tuple[MaveModel, list[dict]]:
    """Train from scratch; deterministic for a given seed.

    When ``out_dir`` is given, writes ``metrics.jsonl`` plus ``model.ckpt`` /
    ``model.cfg`` every ``checkpoint_every`` steps and at the end.  A
    non-finite loss aborts with the last good checkpoint left in place.
    """
    from .config import save_model_config

    torch.use_deterministic_algorithms(True)
    set_seed(config.seed)
    model = MaveModel(model_config)
    trainer = Trainer(model, utterances, config)
    out = Path(out_dir) if out_dir is not None else None
    records: list[dict] = []
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_model_config(out / "model.cfg", model_config)
        metrics = (out / "metrics.jsonl").open("w")
        header = {
            "record": "header",
            "optimizer": "Adam with linear warmup + inverse-sqrt decay (replaces ScaledAdam/Eden)",
            "seed": config.seed,
            "config_digest": config_digest(model_config.decoder, model_config.encoder, config),
            "parameters": model.num_parameters(),
            "utterances": len(trainer.utterances),
        }
        metrics.write(json.dumps(header) + "\n")

    def checkpoint():
        if out is not None:
            nx.save_checkpoint(out / "model.ckpt", model.named_tensors())

    start = time.process_time()
    batches = trainer.batches()
    try:
        for _ in range(config.steps):
            rec = trainer.train_step(batches)
            records.append(rec)
            if metrics is not None and rec["step"] % config.log_every == 0:
                metrics.write(json.dumps(rec) + "\n")
            if log_fn is not None:
                log_fn(rec)
            if rec["step"] % config.checkpoint_every == 0:
                checkpoint()
            if config.time_budget_s and time.process_time() - start > config.time_budget_s:
                log.info("time budget reached at step %d", rec["step"])
                break
    finally:
        if metrics is not None:
            metrics.close()
    checkpoint()
    return model, records


# ---------------------------------------------------------------------------
# evaluation


def forced_spans(num_frames: int, rng: np.random.Generator, max_span_frames: int) -> SpanMask:
    spans = SpanMask()
    while not len(spans):
        spans = sample_spans(num_frames, rng, max_len=max_span_frames)
    return spans


@torch.no_grad()
def infill_accuracy(
    model: MaveModel,
    utterances: Sequence[Utterance],
    rng: np.random.Generator,
    max_span_frames: int,
    draws: int = 1,
    batch_size: int = 32,
) -> float:
    """Teacher-forced argmax accuracy on masked-span audio tokens (at least one span per draw)."""
    model.eval()
    vocab = model.vocab
    examples = [
        example_from_spans(u.grid, u.phonemes, forced_spans(u.grid.num_frames, rng, max_span_frames), vocab)
        for _ in range(draws)
        for u in utterances
    ]
    hit = total = 0
    for i in range(0, len(examples), batch_size):
        inputs, targets, _, infill, phon, pmask = collate(examples[i : i + batch_size], vocab)
        pred = model(inputs, phon, pmask).argmax(-1)
        hit += int(((pred == targets) & infill).sum())
        total += int(infill.sum())
    return hit / max(total, 1)
