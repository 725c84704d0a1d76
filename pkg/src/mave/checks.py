"""Quick correctness suites behind the ``selfcheck`` and ``grad-check`` commands."""

from __future__ import annotations

import numpy as np
import torch

from . import numerics as nx
from .codec_stream import CodecGrid, SpecialVocab, apply_delay, rearrange, restore, sample_spans, undo_delay
from .config import named_config
from .decoder import MaveModel, ssm_scan, ssm_step
from .training import loss_weights, weighted_nll


def roundtrip_suite(trials: int = 200, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        K = int(rng.choice([1, 4, 8]))
        L = int(rng.integers(1, 400))
        vocab = SpecialVocab(1024)
        grid = CodecGrid(rng.integers(0, 1024, size=(L, K)), 1024)
        spans = sample_spans(L, rng, max_len=min(600, L))
        seq = rearrange(grid, spans, vocab)
        if restore(seq) != grid:
            return False, f"rearrange round-trip failed (L={L}, K={K}, spans={spans.format()})"
        if not np.array_equal(undo_delay(apply_delay(seq.frames, vocab.pad), vocab.pad), seq.frames):
            return False, f"delay round-trip failed (L={L}, K={K})"
    return True, f"{trials} grids"


def toy_loss(model: MaveModel, seed: int, T: int = 6):
    """Closure computing the weighted NLL of the toy model on a fixed random batch."""
    rng = np.random.default_rng(seed)
    cfg = model.config.decoder
    frames = torch.as_tensor(rng.integers(0, cfg.vocab_size, size=(1, T + 1, cfg.num_levels)))
    phon = torch.as_tensor(rng.integers(2, model.config.encoder.vocab_size, size=(1, 4)))
    alpha = loss_weights(cfg.num_levels)
    valid = torch.ones(1, T, cfg.num_levels, dtype=torch.bool)

    def f():
        logits = model(frames[:, :-1], phon)
        return weighted_nll(logits, frames[:, 1:], valid, alpha)[0]

    return f


def gradient_suite(seed: int = 0, variant: str = "mamba_xattn", max_entries: int | None = 8) -> tuple[bool, str]:
    with nx.precision("test"):
        torch.manual_seed(seed)
        model = MaveModel(named_config("toy", variant))
        f = toy_loss(model, seed)
        err = nx.check_gradients(f, list(model.parameters()), h=1e-5, max_entries=max_entries, floor=1e-6,
                                 generator=np.random.default_rng(seed))
    return err < 1e-4, f"max rel err {err:.2e}"


def scan_step_suite(seeds: int = 5) -> tuple[bool, str]:
    worst_scan = worst_dec = 0.0
    with nx.precision("test"), torch.no_grad():
        for seed in range(seeds):
            torch.manual_seed(seed)
            model = MaveModel(named_config("toy"))
            block = model.decoder.blocks[0]
            T = 5 + seed * 7
            u = torch.randn(1, T, block.d_inner)
            scanned, _ = ssm_scan(u, block)
            s = torch.zeros(1, block.d_inner, block.state_dim)
            folded = []
            for t in range(T):
                s, g = ssm_step(s, u[:, t], block)
                folded.append(g)
            worst_scan = max(worst_scan, (torch.stack(folded, 1) - scanned).abs().max().item())
            cfg = model.config.decoder
            frames = torch.randint(0, cfg.vocab_size, (1, T, cfg.num_levels))
            phon = torch.randint(2, model.config.encoder.vocab_size, (1, 4))
            full = model(frames, phon)
            state, first = model.prefill(frames[:, :1], phon)
            steps = [first] + [model.step(state, frames[:, t]) for t in range(1, T)]
            worst_dec = max(worst_dec, (torch.stack(steps, 1) - full).abs().max().item())
    ok = worst_scan < 1e-10 and worst_dec < 1e-8
    return ok, f"scan/step {worst_scan:.1e}, decoder step/forward {worst_dec:.1e}"


SUITES = {
    "round-trip": roundtrip_suite,
    "gradient": gradient_suite,
    "scan-step": scan_step_suite,
}
