"""Command-line entry point: ``mave <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import numerics as nx

log = logging.getLogger("mave")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def write_provenance(out_dir: Path, command: str, args: argparse.Namespace, config_blob: str = "") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256(config_blob.encode()).hexdigest()[:16]
    lines = [
        f"command = {command}",
        f"argv = {json.dumps(sys.argv[1:] if args.argv is None else args.argv)}",
        f"seed = {getattr(args, 'seed', '')}",
        f"config_digest = {digest}",
        f"code_version = {__version__}",
    ]
    (out_dir / f"provenance_{command}.txt").write_text("\n".join(lines) + "\n")


def _table(args):
    from .text_frontend import PhonemeTable

    return PhonemeTable.load(args.phoneme_table) if args.phoneme_table else PhonemeTable.identity()


def _load_model(checkpoint: str):
    from .config import load_model_config
    from .decoder import MaveModel

    ckpt = Path(checkpoint)
    cfg_path = ckpt.with_suffix(".cfg")
    if not ckpt.exists() or not cfg_path.exists():
        raise DataError(f"checkpoint {ckpt} (and its {cfg_path.name}) not found")
    model = MaveModel(load_model_config(cfg_path))
    model.load_named_tensors(nx.load_checkpoint(ckpt))
    return model


def _gen_params(args):
    from .inference import GenerationParams

    return GenerationParams(top_p=args.top_p, temperature=args.temperature,
                            max_frames_per_span=args.max_frames, seed=args.seed)


def _write_report(path: Path, fields: dict) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in fields.items()))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .training import SynthTask, synth_corpus

    task = SynthTask(codebook_size=args.codebook_size, num_levels=args.levels)
    out = Path(args.out_dir)
    manifest = synth_corpus(out, args.utterances, np.random.default_rng(args.seed), task)
    write_provenance(out, "gen-data", args, json.dumps(asdict(task), sort_keys=True))
    print(manifest)
    return EXIT_OK


def cmd_make_eval(args) -> int:
    from .codec_stream import read_manifest, write_manifest
    from .training import load_task, make_frame_masked_eval, make_word_masked_eval

    records = read_manifest(args.manifest)
    rng = np.random.default_rng(args.seed)
    if args.mode == "words":
        out_records = make_word_masked_eval(records, rng, load_task(args.manifest))
    else:
        out_records = make_frame_masked_eval(records, rng, args.max_span_frames)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"eval_{args.mode}.tsv"
    write_manifest(path, out_records)
    write_provenance(out, "make-eval", args, args.mode)
    print(f"{path}\t{len(out_records)} of {len(records)} utterances")
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import load_config
    from .training import config_digest, load_utterances, train

    cfg = load_config(args.config, name=args.base, variant=args.variant)
    tcfg = cfg["training"]
    tcfg.seed = args.seed
    if args.steps is not None:
        tcfg.steps = args.steps
    out = Path(args.out_dir)
    utts = load_utterances(args.manifest, _table(args))
    write_provenance(out, "train", args, config_digest(cfg["model"].decoder, cfg["model"].encoder, tcfg))

    def echo(rec):
        if args.verbose and rec["step"] % 10 == 0:
            log.info("step %d loss %.4f", rec["step"], rec["loss"])

    train(utts, cfg["model"], tcfg, out_dir=out, log_fn=echo)
    print(out / "model.ckpt")
    return EXIT_OK


def cmd_edit(args) -> int:
    from .codec_stream import SpanMask, load_grid, save_grid
    from .inference import generate_edit

    try:
        spans = SpanMask.parse(args.spans)
    except ValueError as exc:
        raise DataError(f"span syntax: {exc}") from exc
    grid = load_grid(args.grid)
    try:
        spans.validate(grid.num_frames)
    except ValueError as exc:
        raise DataError(f"invalid spans: {exc}") from exc
    model = _load_model(args.checkpoint)
    res = generate_edit(model, grid, spans, args.text, _table(args), _gen_params(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_grid(out, res.grid)
    _write_report(out.with_suffix(".report.txt"), {
        "frames_generated": res.frames_generated,
        "truncated": str(res.truncated).lower(),
        "span_lengths": ",".join(map(str, res.span_lengths)),
        "output_frames": res.grid.num_frames,
    })
    write_provenance(out.parent, "edit", args, args.checkpoint)
    print(out)
    return EXIT_OK


def cmd_tts(args) -> int:
    from .codec_stream import CodecGrid, load_grid, write_token_file
    from .inference import generate_tts

    model = _load_model(args.checkpoint)
    ref = load_grid(args.ref_grid)
    res = generate_tts(model, ref, args.ref_text, args.text, _table(args), _gen_params(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    K = ref.num_levels
    tokens = res.grid.tokens if res.grid is not None else np.zeros((0, K), dtype=np.int64)
    write_token_file(out, tokens, ref.codebook_size)
    _write_report(out.with_suffix(".report.txt"), {
        "frames_generated": res.frames_generated,
        "truncated": str(res.truncated).lower(),
        "span_lengths": ",".join(map(str, res.span_lengths)),
    })
    write_provenance(out.parent, "tts", args, args.checkpoint)
    print(out)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import measure, merge, report
    from .config import load_config
    from .plotting import render_figures

    reports = []
    for variant in [v for v in args.variants.split(",") if v]:
        cfg = load_config(args.config, name=args.base, variant=variant)["model"]
        reports.append(measure(cfg, args.lx, args.ly, args.repetitions, args.seed))
    rep = merge(reports)
    text = report(rep)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text["table"])
    out.with_suffix(".tsv").write_text(text["records"])
    out.with_name(out.stem + "_series.tsv").write_text(text["series"])
    if not args.no_figures:
        render_figures(rep, out.parent, out.stem)
    write_provenance(out.parent, "bench", args, f"{args.variants}|{args.lx}|{args.ly}|{args.base}")
    print(text["table"], end="")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .checks import gradient_suite

    ok, detail = gradient_suite(args.seed, args.variant, max_entries=None if args.full else 8)
    print(f"{'PASS' if ok else 'FAIL'} gradient ({args.variant}): {detail}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_selfcheck(args) -> int:
    from .checks import SUITES

    failed = False
    for name, fn in SUITES.items():
        ok, detail = fn()
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mave", description="Mamba + cross-attention codec language model toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def gen_opts(sp):
        sp.add_argument("--top-p", type=float, default=0.8)
        sp.add_argument("--temperature", type=float, default=1.0)
        sp.add_argument("--max-frames", type=int, default=600, help="frame budget per span")
        sp.add_argument("--phoneme-table")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("gen-data", help="write a synthetic corpus")
    sp.add_argument("--utterances", type=int, required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out-dir", default="data")
    sp.add_argument("--codebook-size", type=int, default=256)
    sp.add_argument("--levels", type=int, default=4)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("make-eval", help="build a masked evaluation manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--mode", choices=["words", "frames"], default="words")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out-dir", default="eval")
    sp.add_argument("--max-span-frames", type=int, default=600)
    sp.set_defaults(fn=cmd_make_eval)

    sp = sub.add_parser("train", help="train a model on a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--config")
    sp.add_argument("--base", default="desk", help="named config the file overrides")
    sp.add_argument("--variant")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out-dir", default="run")
    sp.add_argument("--phoneme-table")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("edit", help="regenerate masked spans of a token grid")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--grid", required=True)
    sp.add_argument("--spans", required=True, help="start:len[,start:len...] in frames")
    sp.add_argument("--text", required=True, help="transcript after the edit")
    sp.add_argument("--out", default="edited.tok")
    gen_opts(sp)
    sp.set_defaults(fn=cmd_edit)

    sp = sub.add_parser("tts", help="continue a reference prompt with new text")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--ref-grid", required=True)
    sp.add_argument("--ref-text", required=True)
    sp.add_argument("--text", required=True)
    sp.add_argument("--out", default="tts.tok")
    gen_opts(sp)
    sp.set_defaults(fn=cmd_tts)

    sp = sub.add_parser("bench", help="measure generation cost against the cost model")
    sp.add_argument("--variants", default="mamba_xattn,transformer_xattn")
    sp.add_argument("--lx", type=_ints, default=[16, 32])
    sp.add_argument("--ly", type=_ints, default=[64, 128, 256, 512])
    sp.add_argument("--config")
    sp.add_argument("--base", default="bench")
    sp.add_argument("--repetitions", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="report.txt")
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("grad-check", help="finite-difference check of a toy decoder")
    sp.add_argument("--variant", default="mamba_xattn")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--full", action="store_true", help="probe every parameter entry")
    sp.set_defaults(fn=cmd_grad_check)

    sp = sub.add_parser("selfcheck", help="round-trip, gradient and scan/step suites")
    sp.set_defaults(fn=cmd_selfcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .training import NumericAbort

    try:
        return args.fn(args)
    except (nx.NumericError, NumericAbort) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, KeyError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
