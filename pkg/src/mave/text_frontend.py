"""Transcript to phoneme ids, and the bidirectional transformer text encoder."""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import torch
from torch import nn

from . import numerics as nx
from .layers import FeedForward, MultiHeadAttention, RMSNorm

UNK = 0
BOUNDARY = 1


class EmptyTextError(ValueError):
    pass


class TextTooLongError(ValueError):
    pass


@dataclass(frozen=True)
class PhonemeTable:
    """Grapheme -> phoneme id.  Ids 0 and 1 are reserved for UNK and the word boundary."""

    graphemes: Mapping[str, int]

    def __post_init__(self) -> None:
        bad = [g for g, i in self.graphemes.items() if i in (UNK, BOUNDARY) or not g]
        if bad:
            raise ValueError(f"graphemes may not map to reserved ids or be empty: {bad}")

    @property
    def size(self) -> int:
        return max(self.graphemes.values(), default=BOUNDARY) + 1

    @property
    def longest(self) -> int:
        return max((len(g) for g in self.graphemes), default=1)

    @classmethod
    def identity(cls, alphabet: str = string.ascii_lowercase + "'") -> "PhonemeTable":
        return cls({ch: i + 2 for i, ch in enumerate(alphabet)})

    @classmethod
    def load(cls, path: str | Path) -> "PhonemeTable":
        table = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                g, i = line.split("\t")
                table[g] = int(i)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: expected grapheme<TAB>phoneme_id") from exc
        return cls(table)

    def save(self, path: str | Path) -> None:
        lines = [f"{g}\t{i}" for g, i in sorted(self.graphemes.items(), key=lambda kv: kv[1])]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# A few English digraphs collapse to one phoneme; everything else is per letter.
_ENGLISH = [
    "th", "sh", "ch", "ng", "ph", "wh", "ee", "oo", "ou", "ai", "ea", "ck",
] + list(string.ascii_lowercase) + ["'"]


def english_table() -> PhonemeTable:
    ids = {g: i + 2 for i, g in enumerate(_ENGLISH)}
    ids["ck"] = ids["k"]
    ids["ph"] = ids["f"]
    return PhonemeTable(ids)


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


def phonemize(text: str, table: PhonemeTable) -> list[int]:
    """Greedy longest-match grapheme lookup; words are joined by the boundary id."""
    words = normalize(text).split(" ")
    if words == [""]:
        raise EmptyTextError("transcript is empty after normalization")
    out: list[int] = []
    for w, word in enumerate(words):
        if w:
            out.append(BOUNDARY)
        i = 0
        while i < len(word):
            for n in range(min(table.longest, len(word) - i), 0, -1):
                pid = table.graphemes.get(word[i : i + n])
                if pid is not None:
                    out.append(pid)
                    i += n
                    break
            else:
                out.append(UNK)
                i += 1
    return out


@dataclass
class EncoderConfig:
    num_layers: int = 4
    model_dim: int = 128
    num_heads: int = 4
    ffn_multiplier: int = 4
    max_positions: int = 512
    vocab_size: int = 64

    def __post_init__(self) -> None:
        if self.model_dim % self.num_heads:
            raise ValueError("encoder model_dim must be divisible by num_heads")


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, num_heads: int, ffn_multiplier: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm1 = RMSNorm(dim)
        self.ffn = FeedForward(dim, ffn_multiplier)
        self.norm2 = RMSNorm(dim)

    def forward(self, x, mask=None, return_weights=False):
        a = self.attn(x, self.attn.project_kv(x), key_mask=mask, return_weights=return_weights)
        if return_weights:
            a, w = a
        x = self.norm1(x + a)
        x = self.norm2(x + self.ffn(x))
        return (x, w) if return_weights else x


class TextEncoder(nn.Module):
    """Phoneme embeddings + sinusoidal positions through post-norm self-attention layers."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.embed = nn.Parameter(torch.randn(config.vocab_size, config.model_dim) * 0.5)
        self.layers = nn.ModuleList(
            EncoderLayer(config.model_dim, config.num_heads, config.ffn_multiplier)
            for _ in range(config.num_layers)
        )

    def embed_input(self, phonemes: torch.Tensor) -> torch.Tensor:
        M = phonemes.shape[-1]
        if M > self.config.max_positions:
            raise TextTooLongError(f"{M} phonemes exceeds max_positions={self.config.max_positions}")
        if phonemes.numel() and int(phonemes.max()) >= self.config.vocab_size:
            raise ValueError("phoneme id outside encoder vocabulary")
        pos = nx.sinusoidal_positions(torch.arange(M), self.config.model_dim)
        return self.embed[phonemes] + pos

    def forward(self, phonemes: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """(B, M) ids -> (B, M, d) contextual embeddings; ``mask`` marks real phonemes."""
        x = self.embed_input(phonemes)
        for layer in self.layers:
            x = layer(x, mask)
        return x


def encode_text(phonemes: Sequence[int], encoder: TextEncoder) -> torch.Tensor:
    """Single-utterance convenience wrapper returning an (M, d) matrix."""
    if not phonemes:
        raise EmptyTextError("no phonemes to encode")
    return encoder(torch.tensor([list(phonemes)]))[0]
