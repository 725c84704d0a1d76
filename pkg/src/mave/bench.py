"""Generation cost model and its check against instrumented decoder runs.

Predicted costs (exact rationals, constants absorbed):

* decoder-only transformer:  N_d * H_0 * (L_y * L_x + L_y**2 / 2)
* text encoder:              N_e * H * L_x**2
* Mamba decoder + x-attn:    M_d * H * L_y * (L_x + 1)

Measured cost is the multiply-accumulate count of every matmul and scan
executed while generating, collected through :func:`mave.numerics.count_ops`.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
import torch

from . import numerics as nx
from .decoder import MaveModel, ModelConfig


class BenchConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CostModel:
    L_x: int
    L_y: int
    N_d: int = 1
    H_0: int = 1
    N_e: int = 1
    M_d: int = 1
    H: int = 1

    def __post_init__(self) -> None:
        for name in ("L_x", "N_d", "H_0", "N_e", "M_d", "H"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.L_y < 0:
            raise ValueError("L_y must be non-negative")


def predict_decoder_only(m: CostModel) -> Fraction:
    return m.N_d * m.H_0 * (Fraction(m.L_y * m.L_x) + Fraction(m.L_y**2, 2))


def predict_encoder(m: CostModel) -> Fraction:
    return Fraction(m.N_e * m.H * m.L_x**2)


def predict_mamba_decoder(m: CostModel) -> Fraction:
    return Fraction(m.M_d * m.H * m.L_y * (m.L_x + 1))


def predict(variant: str, m: CostModel) -> Fraction:
    if variant == "transformer_xattn":
        return predict_decoder_only(m)
    return predict_mamba_decoder(m)


# ---------------------------------------------------------------------------
# measurement


@dataclass
class BenchPoint:
    variant: str
    L_x: int
    L_y: int
    predicted: Fraction
    predicted_encoder: Fraction
    encoder_ops: int
    prefill_ops: int
    decode_ops: int  # sum over generated tokens
    per_token_ops: list[int]
    state_bytes: list[int]  # decoder state/cache bytes after each generated token
    text_cache_bytes: int

    @property
    def total_ops(self) -> int:
        return self.prefill_ops + self.decode_ops


@dataclass
class Fit:
    coef: list[float]
    r2: float


@dataclass
class BenchReport:
    points: list[BenchPoint] = field(default_factory=list)
    fits: dict[str, dict[str, object]] = field(default_factory=dict)

    def variant_points(self, variant: str) -> list[BenchPoint]:
        return [p for p in self.points if p.variant == variant]


def least_squares(X: np.ndarray, y: np.ndarray) -> Fit:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return Fit([float(c) for c in coef], r2)


def cost_model_for(config: ModelConfig, L_x: int, L_y: int) -> CostModel:
    d = config.decoder
    return CostModel(
        L_x=L_x, L_y=L_y, N_d=d.num_layers, H_0=d.model_dim,
        N_e=max(config.encoder.num_layers, 1), M_d=d.num_layers, H=d.model_dim,
    )


@torch.no_grad()
def measure_point(model: MaveModel, L_x: int, L_y: int, seed: int = 0) -> BenchPoint:
    cfg = model.config
    rng = np.random.default_rng(seed)
    vocab = model.vocab
    K = cfg.decoder.num_levels
    phon = torch.as_tensor(rng.integers(2, cfg.encoder.vocab_size, size=(1, L_x)))
    frames = torch.as_tensor(rng.integers(0, vocab.base_size, size=(L_y, K)))
    bos = torch.full((1, 1, K), vocab.bos)
    model.eval()
    encoder_ops = 0
    if model.encoder is not None:
        with nx.count_ops() as c:
            text = model.encoder(phon)
        encoder_ops = c.macs
        with nx.count_ops() as c:
            state, _ = model.decoder.prefill(bos, text=text)
    else:
        with nx.count_ops() as c:
            state, _ = model.decoder.prefill(bos, phonemes=phon)
    prefill_ops = c.macs
    per_token, state_bytes = [], []
    for t in range(L_y):
        with nx.count_ops() as c:
            model.step(state, frames[t][None])
        per_token.append(c.macs)
        state_bytes.append(state.decoder_bytes())
    m = cost_model_for(cfg, L_x, L_y)
    return BenchPoint(
        variant=cfg.decoder.variant, L_x=L_x, L_y=L_y,
        predicted=predict(cfg.decoder.variant, m), predicted_encoder=predict_encoder(m),
        encoder_ops=encoder_ops, prefill_ops=prefill_ops, decode_ops=sum(per_token),
        per_token_ops=per_token, state_bytes=state_bytes, text_cache_bytes=state.text_cache_bytes(),
    )


def fit_variant(points: Sequence[BenchPoint]) -> dict[str, object]:
    """Shape fits for one variant.

    * ``total``: measured generation ops ~ a*predicted + b*L_y + c (the L_y
      term absorbs per-token feed-forward/projection work, which the
      asymptotic formulas leave out)
    * ``per_token``: per-token ops ~ slope*t + intercept, pooled per L_x
    * ``exponent``: slope of log(total) against log(L_y) at the largest L_x
    """
    if len(points) < 4:
        raise BenchConfigError(f"need at least 4 points for a fit, got {len(points)}")
    X = np.array([[float(p.predicted), p.L_y, 1.0] for p in points])
    y = np.array([p.total_ops for p in points], dtype=np.float64)
    total = least_squares(X, y)
    slopes = []
    for p in points:
        t = np.arange(1, p.L_y + 1, dtype=np.float64)
        f = least_squares(np.stack([t, np.ones_like(t)], 1), np.array(p.per_token_ops, dtype=np.float64))
        slopes.append({"L_x": p.L_x, "L_y": p.L_y, "slope": f.coef[0], "intercept": f.coef[1], "r2": f.r2})
    lx = max(p.L_x for p in points)
    pts = sorted((p for p in points if p.L_x == lx), key=lambda p: p.L_y)
    exponent = least_squares(
        np.stack([np.log([p.L_y for p in pts]), np.ones(len(pts))], 1),
        np.log([p.total_ops for p in pts]),
    ).coef[0]
    encoder = None
    enc_pts = [p for p in points if p.encoder_ops]
    if len(enc_pts) >= 2:
        encoder = least_squares(
            np.array([[float(p.predicted_encoder), p.L_x, 1.0] for p in enc_pts]),
            np.array([p.encoder_ops for p in enc_pts], dtype=np.float64),
        )
    return {
        "total": total,
        "per_token": slopes,
        "exponent": float(exponent),
        "encoder": encoder,
        "state_constant": all(len(set(p.state_bytes)) == 1 for p in points),
        "state_affine": all(len(set(np.diff(p.state_bytes).tolist())) <= 1 for p in points),
        "state_increasing": all(bool(np.all(np.diff(p.state_bytes) > 0)) for p in points if p.L_y > 1),
    }


def measure(
    config: ModelConfig,
    lx: Sequence[int],
    ly: Sequence[int],
    repetitions: int = 1,
    seed: int = 0,
) -> BenchReport:
    """Instrument generation over the (L_x, L_y) grid for one variant.

    Repeated runs must reproduce identical counts; a mismatch raises.
    """
    if len(lx) * len(ly) < 4:
        raise BenchConfigError("need at least 4 (L_x, L_y) points for a fit")
    torch.manual_seed(seed)
    model = MaveModel(config)
    report = BenchReport()
    for x in lx:
        for y in ly:
            point = measure_point(model, x, y, seed)
            for _ in range(repetitions - 1):
                again = measure_point(model, x, y, seed)
                if again.per_token_ops != point.per_token_ops:
                    raise RuntimeError("op counts are not reproducible")
            report.points.append(point)
    report.fits[config.decoder.variant] = fit_variant(report.points)
    return report


def merge(reports: Sequence[BenchReport]) -> BenchReport:
    out = BenchReport()
    for r in reports:
        out.points.extend(r.points)
        out.fits.update(r.fits)
    return out


# ---------------------------------------------------------------------------
# reporting

RECORD_FIELDS = [
    "variant", "L_x", "L_y", "predicted", "predicted_encoder", "encoder_ops",
    "prefill_ops", "decode_ops", "total_ops", "first_token_ops", "last_token_ops",
    "peak_state_bytes", "final_state_bytes", "text_cache_bytes",
]


def records(report: BenchReport) -> list[dict]:
    rows = []
    for p in report.points:
        rows.append({
            "variant": p.variant, "L_x": p.L_x, "L_y": p.L_y,
            "predicted": str(p.predicted), "predicted_encoder": str(p.predicted_encoder),
            "encoder_ops": p.encoder_ops, "prefill_ops": p.prefill_ops,
            "decode_ops": p.decode_ops, "total_ops": p.total_ops,
            "first_token_ops": p.per_token_ops[0] if p.per_token_ops else 0,
            "last_token_ops": p.per_token_ops[-1] if p.per_token_ops else 0,
            "peak_state_bytes": max(p.state_bytes, default=0),
            "final_state_bytes": p.state_bytes[-1] if p.state_bytes else 0,
            "text_cache_bytes": p.text_cache_bytes,
        })
    return rows


def to_tsv(rows: Sequence[dict], fields: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), delimiter="\t", lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def series(report: BenchReport) -> str:
    """Plot data as x/y rows: total ops vs L_y, per-token ops vs t, state bytes vs t."""
    rows = []
    for p in report.points:
        rows.append({"series": "total_ops", "variant": p.variant, "L_x": p.L_x, "x": p.L_y, "y": p.total_ops})
    for variant in dict.fromkeys(p.variant for p in report.points):
        longest = max(report.variant_points(variant), key=lambda p: (p.L_y, p.L_x))
        for t, (ops, b) in enumerate(zip(longest.per_token_ops, longest.state_bytes), 1):
            rows.append({"series": "per_token_ops", "variant": variant, "L_x": longest.L_x, "x": t, "y": ops})
            rows.append({"series": "state_bytes", "variant": variant, "L_x": longest.L_x, "x": t, "y": b})
    return to_tsv(rows, ["series", "variant", "L_x", "x", "y"])


def format_table(report: BenchReport) -> str:
    lines = [
        f"{'variant':<18} {'L_x':>4} {'L_y':>5} {'predicted':>12} {'measured':>12} "
        f"{'tok[0]':>8} {'tok[-1]':>8} {'state B':>9} {'text B':>8}"
    ]
    for r in records(report):
        lines.append(
            f"{r['variant']:<18} {r['L_x']:>4} {r['L_y']:>5} {float(Fraction(r['predicted'])):>12.0f} "
            f"{r['total_ops']:>12} {r['first_token_ops']:>8} {r['last_token_ops']:>8} "
            f"{r['final_state_bytes']:>9} {r['text_cache_bytes']:>8}"
        )
    lines.append("")
    for variant, fit in report.fits.items():
        total = fit["total"]
        slopes = fit["per_token"]
        worst = max(abs(s["slope"]) / max(abs(s["intercept"]), 1e-12) for s in slopes)
        lines.append(
            f"{variant}: R^2(total ~ predicted) = {total.r2:.6f}; "
            f"log-log exponent = {fit['exponent']:.3f}; "
            f"max |per-token slope| / intercept = {worst:.4%}; "
            f"state constant = {fit['state_constant']}, affine = {fit['state_affine']}"
        )
        if fit["encoder"] is not None:
            lines.append(f"{variant}: R^2(encoder ~ N_e H L_x^2) = {fit['encoder'].r2:.6f}")
    return "\n".join(lines) + "\n"


def report(bench: BenchReport) -> dict[str, str]:
    """Human table, tab-delimited records and plot series."""
    return {
        "table": format_table(bench),
        "records": to_tsv(records(bench), RECORD_FIELDS),
        "series": series(bench),
    }
