"""Matplotlib figures for benchmark reports, written next to the delimited output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import BenchReport  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (4.8, 3.2),
    "savefig.dpi": 150,
    # deterministic PNG bytes across runs
    "svg.hashsalt": "mave",
}

MARKS = ["o-", "s--", "^:", "d-."]  # one per L_x
COLORS = {"mamba_xattn": "#1b7837", "transformer_xattn": "#c51b7d", "mamba_concat": "#2166ac"}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_total_ops(report: BenchReport, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for variant in dict.fromkeys(p.variant for p in report.points):
            for i, lx in enumerate(sorted({p.L_x for p in report.variant_points(variant)})):
                pts = sorted((p for p in report.variant_points(variant) if p.L_x == lx), key=lambda p: p.L_y)
                ax.plot([p.L_y for p in pts], [p.total_ops for p in pts], MARKS[i % len(MARKS)],
                        color=COLORS.get(variant), label=f"{variant}, L_x={lx}")
        ax.set_xlabel("generated frames L_y")
        ax.set_ylabel("multiply-accumulates")
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_per_token(report: BenchReport, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for variant in dict.fromkeys(p.variant for p in report.points):
            p = max(report.variant_points(variant), key=lambda q: (q.L_y, q.L_x))
            ax.plot(range(1, p.L_y + 1), p.per_token_ops, color=COLORS.get(variant), label=f"{variant} (L_x={p.L_x})")
        ax.set_xlabel("generation step t")
        ax.set_ylabel("MACs per token")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_state_bytes(report: BenchReport, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for variant in dict.fromkeys(p.variant for p in report.points):
            p = max(report.variant_points(variant), key=lambda q: (q.L_y, q.L_x))
            ax.plot(range(1, p.L_y + 1), [b / 1024 for b in p.state_bytes], color=COLORS.get(variant), label=variant)
        ax.set_xlabel("generation step t")
        ax.set_ylabel("decoder state / KV cache (KiB)")
        ax.legend(frameon=False)
        return _save(fig, path)


def render_figures(report: BenchReport, out_dir: str | Path, stem: str = "bench") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [
        plot_total_ops(report, out / f"{stem}_total_ops.png"),
        plot_per_token(report, out / f"{stem}_per_token_ops.png"),
        plot_state_bytes(report, out / f"{stem}_state_bytes.png"),
    ]
