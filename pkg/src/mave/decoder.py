"""Hybrid autoregressive decoder: selective-SSM blocks with cross-attention onto text.

Three variants share one class:

* ``mamba_xattn``        Mamba block -> cross-attention, per layer (the main model)
* ``transformer_xattn``  causal self-attention block -> cross-attention (KV-cached baseline)
* ``mamba_concat``       Mamba blocks only; phonemes are prepended as pseudo-frames

Full-sequence ``forward`` is used for training; ``prefill`` + ``step`` for
generation.  Both paths compute the same function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .codec_stream import SpecialVocab
from .layers import FeedForward, Linear, MultiHeadAttention, RMSNorm
from .text_frontend import EncoderConfig, TextEncoder

VARIANTS = ("mamba_xattn", "transformer_xattn", "mamba_concat")


class VocabError(ValueError):
    pass


class ConditioningError(ValueError):
    pass


@dataclass
class DecoderConfig:
    variant: str = "mamba_xattn"
    num_layers: int = 4
    model_dim: int = 128
    ssm_state_dim: int = 16
    conv_width: int = 4
    expand: int = 2
    num_heads: int = 4
    num_levels: int = 4
    codebook_size: int = 256
    dt_rank: int = 0  # 0 -> ceil(model_dim / 16)
    ffn_multiplier: int = 4

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.variant != "mamba_concat" and self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if not self.dt_rank:
            self.dt_rank = math.ceil(self.model_dim / 16)

    @property
    def vocab(self) -> SpecialVocab:
        return SpecialVocab(self.codebook_size)

    @property
    def vocab_size(self) -> int:
        return self.vocab.size

    @property
    def d_inner(self) -> int:
        return self.expand * self.model_dim

    @property
    def uses_xattn(self) -> bool:
        return self.variant != "mamba_concat"

    @property
    def uses_mamba(self) -> bool:
        return self.variant != "transformer_xattn"


@dataclass
class ModelConfig:
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self) -> None:
        if self.decoder.uses_xattn and self.encoder.model_dim != self.decoder.model_dim:
            raise ValueError("encoder and decoder model_dim must match for cross-attention")


# ---------------------------------------------------------------------------
# selective SSM


def recurrence_step(s_prev, a_bar, bx, c):
    """One step of ``s = A_bar * s + B_bar x``, ``g = C s`` (diagonal A, state on the last axis)."""
    s = a_bar * s_prev + bx
    return s, (s * c).sum(-1)


def ssm_step(state: torch.Tensor, x: torch.Tensor, block: "MambaBlock"):
    """Advance the SSM of ``block`` by one input ``x`` (B, d_inner) -> (s_t, g_t)."""
    a_bar, bx, c = block.discretize(x)
    nx.add_macs(3 * a_bar.numel())
    s, g = recurrence_step(state, a_bar, bx, c[..., None, :])
    return nx.check_finite(s, "ssm state"), g


def ssm_scan(inputs: torch.Tensor, block: "MambaBlock", state: torch.Tensor | None = None):
    """Run the SSM over (B, T, d_inner) inputs; returns (outputs, final state)."""
    a_bar, bx, c = block.discretize(inputs)
    B, T, di, n = a_bar.shape
    nx.add_macs(3 * a_bar.numel())
    s = inputs.new_zeros(B, di, n) if state is None else state
    states = []
    for a_t, bx_t in zip(a_bar.unbind(1), bx.unbind(1)):  # unbind keeps backward O(T), slicing is O(T^2)
        s = a_t * s + bx_t
        states.append(s)
    hs = torch.stack(states, dim=1)
    return (hs * c[:, :, None, :]).sum(-1), s


class MambaBlock(nn.Module):
    """rmsnorm -> in-proj (main, gate) -> causal conv + SiLU -> selective SSM -> gate -> out-proj -> residual."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        d, di, n, w, r = cfg.model_dim, cfg.d_inner, cfg.ssm_state_dim, cfg.conv_width, cfg.dt_rank
        self.d_inner, self.state_dim, self.conv_width, self.dt_rank = di, n, w, r
        self.norm = RMSNorm(d)
        self.in_proj = Linear(d, 2 * di, bias=False)
        self.conv_weight = nn.Parameter(torch.randn(di, w) / math.sqrt(w))
        self.conv_bias = nn.Parameter(torch.zeros(di))
        self.x_proj = Linear(di, r + 2 * n, bias=False)
        self.dt_proj = Linear(r, di, std=r**-0.5)
        dt = torch.exp(torch.rand(di) * (math.log(0.1) - math.log(1e-3)) + math.log(1e-3))
        with torch.no_grad():
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))  # softplus^-1
        self.A_log = nn.Parameter(torch.log(torch.arange(1, n + 1, dtype=torch.get_default_dtype())).repeat(di, 1))
        self.D = nn.Parameter(torch.ones(di))
        self.out_proj = Linear(di, d, bias=False)

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def discretize(self, u: torch.Tensor):
        """Input-dependent (A_bar, B_bar*u, C) for u of shape (..., d_inner)."""
        xp = self.x_proj(u)
        dt_raw, Bm, Cm = xp.split([self.dt_rank, self.state_dim, self.state_dim], dim=-1)
        delta = nx.softplus(self.dt_proj(dt_raw))
        a_bar = torch.exp(delta[..., None] * self.A)
        bx = (delta * u)[..., None] * Bm[..., None, :]
        return a_bar, bx, Cm

    def _gate_out(self, x, y, u, z):
        y = y + self.D * u
        return x + self.out_proj(y * nx.silu(z))

    def forward(self, x: torch.Tensor, return_state: bool = False):
        B, T, _ = x.shape
        u, z = self.in_proj(self.norm(x)).chunk(2, dim=-1)
        w = self.conv_width
        upad = torch.cat([u.new_zeros(B, w - 1, self.d_inner), u], dim=1)
        conv = self.conv_bias + sum(upad[:, j : j + T] * self.conv_weight[:, j] for j in range(w))
        uc = nx.silu(conv)
        y, s = ssm_scan(uc, self)
        out = self._gate_out(x, y, uc, z)
        if not return_state:
            return out
        return out, {"ssm": s, "conv": upad[:, T:].transpose(1, 2).contiguous()}

    def step(self, x: torch.Tensor, state: dict) -> tuple[torch.Tensor, dict]:
        """x: (B, d) one frame; state holds ``ssm`` (B, di, n) and ``conv`` (B, di, w-1)."""
        u, z = self.in_proj(self.norm(x)).chunk(2, dim=-1)
        window = torch.cat([state["conv"], u[..., None]], dim=-1)
        uc = nx.silu((window * self.conv_weight).sum(-1) + self.conv_bias)
        s, g = ssm_step(state["ssm"], uc, self)
        return self._gate_out(x, g, uc, z), {"ssm": s, "conv": window[..., 1:]}


class CausalTransformerBlock(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.norm1 = RMSNorm(cfg.model_dim)
        self.attn = MultiHeadAttention(cfg.model_dim, cfg.num_heads)
        self.norm2 = RMSNorm(cfg.model_dim)
        self.ffn = FeedForward(cfg.model_dim, cfg.ffn_multiplier)

    def forward(self, x: torch.Tensor, return_state: bool = False):
        h = self.norm1(x)
        kv = self.attn.project_kv(h)
        x = x + self.attn(h, kv, causal=True)
        x = x + self.ffn(self.norm2(x))
        return (x, {"k": kv[0], "v": kv[1]}) if return_state else x

    def step(self, x: torch.Tensor, state: dict) -> tuple[torch.Tensor, dict]:
        h = self.norm1(x)[:, None]
        k, v = self.attn.project_kv(h)
        k = torch.cat([state["k"], k], dim=2)
        v = torch.cat([state["v"], v], dim=2)
        x = x + self.attn(h, (k, v))[:, 0]
        x = x + self.ffn(self.norm2(x))
        return x, {"k": k, "v": v}


class CrossAttention(nn.Module):
    """Queries from the decoder stream, keys/values from the text encoding; residual + rmsnorm."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.model_dim, cfg.num_heads)
        self.norm = RMSNorm(cfg.model_dim)

    def forward(self, x, kv, key_mask=None, return_weights=False):
        a = self.attn(x, kv, key_mask=key_mask, return_weights=return_weights)
        if return_weights:
            a, w = a
            return self.norm(x + a), w
        return self.norm(x + a)


def cross_attention(queries: torch.Tensor, text: torch.Tensor, layer: CrossAttention) -> torch.Tensor:
    """(T, d) queries attending to an (M, d) text encoding."""
    if text.shape[0] == 0:
        raise ConditioningError("cross-attention needs a non-empty text encoding")
    return layer(queries[None], layer.attn.project_kv(text[None]))[0]


# ---------------------------------------------------------------------------
# decoder


@dataclass
class DecoderState:
    """Constant-size generation state (mamba variants) or growing KV cache (transformer)."""

    layers: list[dict]
    text_kv: list[tuple[torch.Tensor, torch.Tensor]] | None
    text_mask: torch.Tensor | None
    position: int

    def decoder_bytes(self) -> int:
        return sum(t.numel() * t.element_size() for layer in self.layers for t in layer.values())

    def text_cache_bytes(self) -> int:
        if not self.text_kv:
            return 0
        return sum(t.numel() * t.element_size() for kv in self.text_kv for t in kv)

    def nbytes(self) -> int:
        return self.decoder_bytes() + self.text_cache_bytes()


class MaveDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, phoneme_vocab: int = 64):
        super().__init__()
        self.cfg = cfg
        K, V, d = cfg.num_levels, cfg.vocab_size, cfg.model_dim
        self.level_embed = nn.Parameter(torch.randn(K, V, d) * 0.5)
        block = MambaBlock if cfg.uses_mamba else CausalTransformerBlock
        self.blocks = nn.ModuleList(block(cfg) for _ in range(cfg.num_layers))
        self.xattn = (
            nn.ModuleList(CrossAttention(cfg) for _ in range(cfg.num_layers))
            if cfg.uses_xattn
            else None
        )
        if cfg.variant == "mamba_concat":
            self.phoneme_embed = nn.Parameter(torch.randn(phoneme_vocab, d) * 0.5)
            self.separator = nn.Parameter(torch.randn(d) * 0.5)
        self.final_norm = RMSNorm(d)
        self.head = Linear(d, K * V, bias=False)

    # -- embedding ---------------------------------------------------------

    def embed_frame(self, frames: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Sum of per-level embeddings plus sinusoidal position; frames (..., K)."""
        V = self.cfg.vocab_size
        if frames.numel() and (int(frames.max()) >= V or int(frames.min()) < 0):
            raise VocabError(f"frame token outside extended vocabulary [0, {V})")
        K = self.cfg.num_levels
        emb = sum(self.level_embed[k][frames[..., k]] for k in range(K))
        return emb + nx.sinusoidal_positions(positions.reshape(-1), self.cfg.model_dim).reshape(
            *positions.shape, -1
        )

    def _concat_inputs(self, frames, phonemes, phoneme_mask):
        """Per example: [phoneme pseudo-frames, separator, audio frames], right-padded."""
        B, T, _ = frames.shape
        if phoneme_mask is None:
            phoneme_mask = torch.ones_like(phonemes, dtype=torch.bool)
        lens = phoneme_mask.sum(1).tolist()
        d = self.cfg.model_dim
        total = max(lens) + 1 + T
        rows, offsets = [], []
        for b, m in enumerate(lens):
            pos = torch.arange(m + 1 + T)
            pe = nx.sinusoidal_positions(pos, d)
            prefix = torch.cat([self.phoneme_embed[phonemes[b, :m]], self.separator[None]]) + pe[: m + 1]
            audio = self.embed_frame(frames[b], pos[m + 1 :])
            row = torch.cat([prefix, audio])
            rows.append(torch.cat([row, row.new_zeros(total - row.shape[0], d)]))
            offsets.append(m + 1)
        return torch.stack(rows), offsets

    # -- full sequence -----------------------------------------------------

    def _stack(self, x, text_kv, text_mask, collect):
        states = []
        for i, block in enumerate(self.blocks):
            if collect:
                x, st = block(x, return_state=True)
                states.append(st)
            else:
                x = block(x)
            if self.xattn is not None:
                x = self.xattn[i](x, text_kv[i], text_mask)
        return x, states

    def _text_kv(self, text):
        if not self.cfg.uses_xattn:
            return None
        if text is None or text.shape[1] == 0:
            raise ConditioningError(f"variant {self.cfg.variant} needs a text encoding")
        return [layer.attn.project_kv(text) for layer in self.xattn]

    def _logits(self, h):
        out = self.head(self.final_norm(h))
        return out.view(*h.shape[:-1], self.cfg.num_levels, self.cfg.vocab_size)

    def forward(self, frames, text=None, text_mask=None, phonemes=None, phoneme_mask=None):
        """frames (B, T, K) -> logits (B, T, K, V); position t predicts frame t + 1.

        xattn variants take ``text`` (B, M, d) from the encoder; the concat
        variant takes raw ``phonemes`` (B, M).
        """
        B, T, _ = frames.shape
        if self.cfg.variant == "mamba_concat":
            if phonemes is None:
                raise ConditioningError("mamba_concat needs phoneme ids")
            x, offsets = self._concat_inputs(frames, phonemes, phoneme_mask)
            h, _ = self._stack(x, None, None, False)
            h = torch.stack([h[b, o : o + T] for b, o in enumerate(offsets)])
            return self._logits(h)
        x = self.embed_frame(frames, torch.arange(T).expand(B, T))
        h, _ = self._stack(x, self._text_kv(text), text_mask, False)
        return self._logits(h)

    # -- generation --------------------------------------------------------

    def prefill(self, frames, text=None, text_mask=None, phonemes=None, phoneme_mask=None):
        """Run the prompt once; returns (state, logits of the last prompt frame)."""
        B, T, _ = frames.shape
        if self.cfg.variant == "mamba_concat":
            if phonemes is None:
                raise ConditioningError("mamba_concat needs phoneme ids")
            if phoneme_mask is not None and not bool(phoneme_mask.all()):
                raise ValueError("prefill of the concat variant needs equal-length phonemes")
            x, offsets = self._concat_inputs(frames, phonemes, None)
            text_kv = None
            position = offsets[0] + T
        else:
            x = self.embed_frame(frames, torch.arange(T).expand(B, T))
            text_kv = self._text_kv(text)
            position = T
        h, states = self._stack(x, text_kv, text_mask, True)
        state = DecoderState(states, text_kv, text_mask, position)
        return state, self._logits(h[:, -1])

    def step(self, state: DecoderState, frame: torch.Tensor) -> torch.Tensor:
        """Feed one (B, K) frame; updates ``state`` and returns (B, K, V) logits."""
        B = frame.shape[0]
        x = self.embed_frame(frame, torch.full((B,), state.position))
        new_layers = []
        for i, block in enumerate(self.blocks):
            x, st = block.step(x, state.layers[i])
            new_layers.append(st)
            if self.xattn is not None:
                x = self.xattn[i](x[:, None], state.text_kv[i], state.text_mask)[:, 0]
        state.layers = new_layers
        state.position += 1
        return self._logits(x)


class MaveModel(nn.Module):
    """Text encoder (xattn variants only) plus decoder, with one conditioning interface."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = TextEncoder(config.encoder) if config.decoder.uses_xattn else None
        self.decoder = MaveDecoder(config.decoder, phoneme_vocab=config.encoder.vocab_size)

    @property
    def vocab(self) -> SpecialVocab:
        return self.config.decoder.vocab

    def _cond(self, phonemes, phoneme_mask):
        if self.encoder is not None:
            return {"text": self.encoder(phonemes, phoneme_mask), "text_mask": phoneme_mask}
        return {"phonemes": phonemes, "phoneme_mask": phoneme_mask}

    def forward(self, frames, phonemes, phoneme_mask=None):
        return self.decoder(frames, **self._cond(phonemes, phoneme_mask))

    def prefill(self, frames, phonemes, phoneme_mask=None):
        return self.decoder.prefill(frames, **self._cond(phonemes, phoneme_mask))

    def step(self, state: DecoderState, frame: torch.Tensor) -> torch.Tensor:
        return self.decoder.step(state, frame)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items()}

    def load_named_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        dtype = torch.get_default_dtype()
        self.load_state_dict({k: v.to(dtype) for k, v in tensors.items()})


def frames_tensor(frames: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(frames), dtype=torch.long)
