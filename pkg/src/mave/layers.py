"""Small building blocks shared by the text encoder and the decoder."""

from __future__ import annotations

import math

import torch
from torch import nn

from . import numerics as nx


class Linear(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, bias: bool = True, std: float | None = None):
        super().__init__()
        std = 1.0 / math.sqrt(in_dim) if std is None else std
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim) * std)
        self.bias = nn.Parameter(torch.zeros(out_dim)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.linear(x, self.weight, self.bias)


class RMSNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.rmsnorm(x, self.gain)


class FeedForward(nn.Module):
    def __init__(self, dim: int, multiplier: int = 4):
        super().__init__()
        self.up = Linear(dim, dim * multiplier)
        self.down = Linear(dim * multiplier, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down(nx.silu(self.up(x)))


def attend(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    key_mask: torch.Tensor | None = None,
    causal: bool = False,
    return_weights: bool = False,
):
    """Scaled dot-product attention over (B, H, T, dh) tensors.

    ``key_mask`` is (B, S) with True for keys that may be attended.  With
    ``causal`` query i sees keys ``<= i + (S - T)`` so a cached prefix works.
    """
    scores = nx.matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    if causal:
        T, S = q.shape[-2], k.shape[-2]
        allowed = torch.ones(T, S, dtype=torch.bool).tril(S - T)
        scores = scores.masked_fill(~allowed, float("-inf"))
    weights = nx.softmax(scores, axis=-1)
    out = nx.matmul(weights, v)
    return (out, weights) if return_weights else out


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"model dim {dim} not divisible by {num_heads} heads")
        self.dim, self.num_heads = dim, num_heads
        self.q = Linear(dim, dim, bias=False)
        self.k = Linear(dim, dim, bias=False)
        self.v = Linear(dim, dim, bias=False)
        self.o = Linear(dim, dim, bias=False)

    def split(self, x: torch.Tensor) -> torch.Tensor:
        B, T, _ = x.shape
        return x.view(B, T, self.num_heads, -1).transpose(1, 2)

    def merge(self, x: torch.Tensor) -> torch.Tensor:
        B, H, T, dh = x.shape
        return x.transpose(1, 2).reshape(B, T, H * dh)

    def project_kv(self, context: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.split(self.k(context)), self.split(self.v(context))

    def forward(
        self,
        x: torch.Tensor,
        kv: tuple[torch.Tensor, torch.Tensor],
        key_mask: torch.Tensor | None = None,
        causal: bool = False,
        return_weights: bool = False,
    ):
        q = self.split(self.q(x))
        res = attend(q, kv[0], kv[1], key_mask, causal, return_weights)
        if return_weights:
            out, w = res
            return self.o(self.merge(out)), w
        return self.o(self.merge(res))
