"""Dense tensor primitives, MAC counting, gradient checking and checkpoint I/O.

Every matrix product and scan in the package goes through this module so the
benchmark harness can count multiply-accumulates with a single hook.
Differentiation is torch autograd; ``check_gradients`` is the independent
central-difference oracle used to verify it.
"""

from __future__ import annotations

import contextlib
import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

TEST_DTYPE = torch.float64
TRAIN_DTYPE = torch.float32

CHECKPOINT_MAGIC = b"MAVECKPT"
CHECKPOINT_VERSION = 1


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# precision modes


@contextlib.contextmanager
def precision(mode: str) -> Iterator[torch.dtype]:
    """Temporarily switch the default dtype: ``"test"`` is float64, ``"train"`` float32."""
    dtype = {"test": TEST_DTYPE, "train": TRAIN_DTYPE}[mode]
    old = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield dtype
    finally:
        torch.set_default_dtype(old)


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NumericError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# op counting


class OpCounter:
    """Accumulates multiply-accumulate counts while active."""

    def __init__(self) -> None:
        self.macs = 0

    def add(self, n: int) -> None:
        self.macs += int(n)


_counters: list[OpCounter] = []


@contextlib.contextmanager
def count_ops() -> Iterator[OpCounter]:
    counter = OpCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def add_macs(n: int) -> None:
    for c in _counters:
        c.add(n)


def counting() -> bool:
    return bool(_counters)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product ``a @ b`` with MAC accounting."""
    if a.dim() < 1 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul dimension mismatch: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    out = torch.matmul(a, b)
    if _counters:
        add_macs(out.numel() * a.shape[-1])
    return out


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` for a (out, in) weight, counted like matmul."""
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(
            f"linear dimension mismatch: {tuple(x.shape)} x {tuple(weight.shape)}^T"
        )
    out = F.linear(x, weight, bias)
    if _counters:
        add_macs(out.numel() * weight.shape[-1])
    return out


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=axis)


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return torch.log_softmax(x, dim=axis)


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


def softplus(x: torch.Tensor) -> torch.Tensor:
    return F.softplus(x)


def rmsnorm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Scale each row to unit RMS, then multiply by ``gain``."""
    rms = torch.sqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    return x / rms * gain


def exp(x: torch.Tensor) -> torch.Tensor:
    return torch.exp(x)


def log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a * b


def sinusoidal_positions(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos position table, one row per entry of ``positions``."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.get_default_dtype()) / max(half, 1)
    )
    angles = positions.to(torch.get_default_dtype())[:, None] * freqs[None, :]
    pe = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        pe = F.pad(pe, (0, 1))
    return pe


# ---------------------------------------------------------------------------
# gradient oracle


def check_gradients(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    generator: np.random.Generator | None = None,
    floor: float = 1e-12,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` re-evaluates a scalar from the current values of ``params``.  When
    ``max_entries`` is given only that many entries per parameter are probed,
    chosen by ``generator``.  ``floor`` is added to the denominator; at 64-bit
    and h=1e-5 the difference quotient carries ~1e-10 rounding noise, so
    whole-model checks raise it to keep near-zero gradients from dominating.
    """
    params = list(params)
    value = f()
    if value.numel() != 1 or not bool(torch.isfinite(value)):
        raise NumericError("gradient oracle needs a finite scalar objective")
    analytic = torch.autograd.grad(value, params, allow_unused=True)
    rng = generator or np.random.default_rng(0)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            idx: Iterable[int] = range(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = rng.choice(flat.numel(), size=max_entries, replace=False).tolist()
            gflat = g.reshape(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError("objective became non-finite under perturbation")
                central = (fp - fm) / (2 * h)
                a = gflat[i].item()
                rel = abs(a - central) / (abs(a) + abs(central) + floor)
                worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# checkpoint file


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor]) -> None:
    """Write named tensors as little-endian float32 in the MAVECKPT layout."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().to(torch.float32).numpy()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> dict[str, torch.Tensor]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out: dict[str, torch.Tensor] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            out[name] = torch.from_numpy(arr.copy())
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
