"""Command-line entry point: gen-data, train, caption, eval, video, plot-loss.

Every command echoes its resolved configuration to stderr as one JSON line.
Failures print a one-line JSON error to stderr and exit with 2 (missing
file), 3 (invalid input or config) or 4 (numeric failure).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import corpus, trainer
from .encoder import KINDS, EncoderSpec
from .errors import CaptionForgeError, ConfigError, MissingFileError, ParseError
from .infer import beam_search
from .metrics import evaluate_corpus
from .model import CaptionModel
from .video import MODES, StabilizerConfig, caption_stream, load_frames

THREADS_ENV = "CAPTION_FORGE_THREADS"
MODEL_DEFAULTS = {"encoder": "plain_conv", "embed_size": 512, "hidden_size": 512, "layers": 1, "finetune_top_only": True}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _train_flags(p):
    d = trainer.TrainConfig()
    p.add_argument("--lr", type=float, default=None, help=f"initial learning rate (default {d.lr0})")
    p.add_argument("--decay-factor", type=float, default=None, help=f"LR multiplier per decay step (default {d.decay_factor})")
    p.add_argument("--decay-every", type=int, default=None, help=f"iterations between LR decays (default {d.decay_every})")
    p.add_argument("--batch-size", type=int, default=None, help=f"captions per batch (default {d.batch_size})")
    p.add_argument("--clip", type=float, default=None, help=f"element-wise gradient clamp (default {d.clip})")
    p.add_argument("--max-seq-len", type=int, default=None, help=f"longest caption kept, in words (default {d.max_seq_len})")
    p.add_argument("--dropout", type=float, default=None, help=f"dropout rate on LSTM outputs (default {d.dropout})")
    p.add_argument("--max-iters", type=int, default=None, help=f"total iterations (default {d.max_iters})")
    p.add_argument("--seed", type=int, default=None, help=f"seed for init, shuffling and dropout (default {d.seed})")
    p.add_argument("--checkpoint-every", type=int, default=None, help=f"iterations between checkpoints (default {d.checkpoint_every})")
    p.add_argument("--encoder", choices=KINDS, default=None, help=f"encoder kind (default {MODEL_DEFAULTS['encoder']})")
    p.add_argument("--embed-size", type=int, default=None, help=f"word/image embedding size (default {MODEL_DEFAULTS['embed_size']})")
    p.add_argument("--hidden-size", type=int, default=None, help=f"LSTM hidden size (default {MODEL_DEFAULTS['hidden_size']})")
    p.add_argument("--layers", type=int, default=None, help=f"stacked LSTM layers (default {MODEL_DEFAULTS['layers']})")
    p.add_argument("--end-to-end", action="store_true", help="train the conv trunk too (default: only the projection and decoder)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="caption-forge", description="CNN encoder + LSTM decoder image captioning")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic captioned corpus")
    p.add_argument("--n", type=int, default=10, help="number of images (default 10)")
    p.add_argument("--seed", type=int, default=0, help="scene seed (default 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--id-offset", type=int, default=0, help="first image id (default 0)")
    p.add_argument("--vocab-from", default=None, help="checkpoint whose vocabulary the captions must use")

    p = sub.add_parser("train", help="train from scratch, resume, or transfer")
    p.add_argument("--data", required=True, help="annotation document")
    p.add_argument("--config", default=None, help="JSON file of training/model settings; flags override it")
    p.add_argument("--out-checkpoint", required=True, help="checkpoint path to write")
    p.add_argument("--loss-log", default=None, help="loss log path (default: <out-checkpoint>.loss.csv)")
    start = p.add_mutually_exclusive_group()
    start.add_argument("--resume", default=None, help="continue a run from this checkpoint")
    start.add_argument("--transfer-from", default=None, help="initialize weights from this checkpoint")
    _train_flags(p)

    p = sub.add_parser("caption", help="caption one image or feature vector")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", help=".npy H×W×3 image")
    src.add_argument("--feature", help=".npy or .json encoder-output vector of length D")
    p.add_argument("--beam", type=int, default=20, help="beam width (default 20)")
    p.add_argument("--max-len", type=int, default=16, help="longest caption in words (default 16)")

    p = sub.add_parser("eval", help="BLEU_4 and CIDEr on an annotated split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beam", type=int, default=20, help="beam width (default 20)")
    p.add_argument("--max-len", type=int, default=16, help="longest caption in words (default 16)")
    p.add_argument("--report-out", default=None, help="write the JSON report here")

    d = StabilizerConfig()
    p = sub.add_parser("video", help="caption a frame stream with stabilization")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", required=True, help="directory of .npy frames or a feature-sequence document")
    p.add_argument("--mode", choices=MODES, default=d.mode, help=f"stabilization mode (default {d.mode})")
    p.add_argument("--delta", type=float, default=d.delta, help=f"switch margin in nats (default {d.delta})")
    p.add_argument("--alpha", type=float, default=d.alpha, help=f"feature EMA weight of the new frame (default {d.alpha})")
    p.add_argument("--beam", type=int, default=d.beam, help=f"beam width (default {d.beam})")
    p.add_argument("--max-len", type=int, default=d.max_len, help=f"longest caption in words (default {d.max_len})")

    p = sub.add_parser("plot-loss", help="render a loss log as SVG")
    p.add_argument("--log", required=True)
    p.add_argument("--out-svg", required=True)
    return parser


def _echo_config(command: str, config: dict) -> None:
    print(json.dumps({"command": command, "config": config}, sort_keys=True, default=str), file=sys.stderr)


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"config not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: expected a JSON object")
    return doc


_FLAG_TO_FIELD = {
    "lr": "lr0",
    "decay_factor": "decay_factor",
    "decay_every": "decay_every",
    "batch_size": "batch_size",
    "clip": "clip",
    "max_seq_len": "max_seq_len",
    "dropout": "dropout",
    "max_iters": "max_iters",
    "seed": "seed",
    "checkpoint_every": "checkpoint_every",
}


def resolve_train_config(args) -> tuple[trainer.TrainConfig, dict]:
    """Defaults, then the --config file, then explicit flags."""
    doc = _read_json(args.config) if args.config else {}
    model = dict(MODEL_DEFAULTS)
    extra = doc.pop("model", {})
    unknown = set(extra) - set(MODEL_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown model keys: {sorted(unknown)}")
    model.update(extra)
    values = asdict(trainer.TrainConfig.from_dict(doc))
    for flag, name in _FLAG_TO_FIELD.items():
        if getattr(args, flag) is not None:
            values[name] = getattr(args, flag)
    for key in ("encoder", "embed_size", "hidden_size", "layers"):
        if getattr(args, key) is not None:
            model[key] = getattr(args, key)
    if args.end_to_end:
        model["finetune_top_only"] = False
    return trainer.TrainConfig(**values), model


def cmd_gen_data(args) -> int:
    _echo_config("gen-data", {"n": args.n, "seed": args.seed, "out": args.out, "id_offset": args.id_offset, "vocab_from": args.vocab_from})
    vocab = trainer.load_checkpoint(args.vocab_from).model.vocab if args.vocab_from else None
    split, _ = corpus.gen_synthetic(args.n, args.seed, vocab=vocab, id_offset=args.id_offset)
    path = corpus.write_annotations(split, args.out)
    print(path)
    return 0


def cmd_train(args) -> int:
    config, model_cfg = resolve_train_config(args)
    log_path = args.loss_log or args.out_checkpoint + ".loss.csv"
    if args.resume or args.transfer_from:
        ckpt = trainer.load_checkpoint(args.resume or args.transfer_from)
        split = corpus.load_annotations(args.data, vocab=ckpt.model.vocab, max_seq_len=config.max_seq_len)
        model = ckpt.model
        start, history = (ckpt.iteration, ckpt.history) if args.resume else (0, [])
    else:
        split = corpus.load_annotations(args.data, max_seq_len=config.max_seq_len)
        spec = EncoderSpec(kind=model_cfg["encoder"], embed_size=model_cfg["embed_size"], finetune_top_only=model_cfg["finetune_top_only"])
        model = CaptionModel.build(split.vocab, spec, model_cfg["hidden_size"], model_cfg["layers"], seed=config.seed)
        start, history = 0, []
    _echo_config(
        "train",
        {"train": asdict(config), "model": model.architecture(), "data": args.data, "resume": args.resume, "transfer_from": args.transfer_from, "loss_log": log_path},
    )
    model, history = trainer.train(model, split, config, args.out_checkpoint, start_iteration=start, history=history)
    trainer.write_loss_log(history, log_path)
    last = history[-1].loss if history else float("nan")
    print(f"iterations={len(history)} final_loss_per_token={last:.6f} checkpoint={args.out_checkpoint}")
    return 0


def _load_vector(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"input not found: {path}")
    try:
        if path.suffix == ".json":
            doc = json.loads(path.read_text())
            return np.asarray(doc["feature"] if isinstance(doc, dict) else doc, dtype=np.float32)
        return np.load(path).astype(np.float32)
    except (ValueError, KeyError, TypeError) as e:
        raise ParseError(f"{path}: cannot read array: {e}") from None


def cmd_caption(args) -> int:
    _echo_config("caption", {"checkpoint": args.checkpoint, "image": args.image, "feature": args.feature, "beam": args.beam, "max_len": args.max_len})
    model = trainer.load_checkpoint(args.checkpoint).model
    if args.image:
        feature = model.feature(_load_vector(args.image))
    else:
        # already in the decoder's embedding space
        feature = _load_vector(args.feature)
    hyp = beam_search(model, feature, k=args.beam, max_len=args.max_len)
    print(" ".join(model.vocab.words(hyp.tokens)))
    return 0


def cmd_eval(args) -> int:
    _echo_config("eval", {"checkpoint": args.checkpoint, "data": args.data, "beam": args.beam, "max_len": args.max_len, "report_out": args.report_out})
    model = trainer.load_checkpoint(args.checkpoint).model
    split = corpus.load_annotations(args.data, vocab=model.vocab)
    report = evaluate_corpus(model, split, beam_k=args.beam, max_len=args.max_len)
    if args.report_out:
        Path(args.report_out).write_text(report.to_json())
    print(report.summary_line())
    return 0


def cmd_video(args) -> int:
    config = StabilizerConfig(args.delta, args.alpha, args.mode, args.beam, args.max_len)
    _echo_config("video", {"checkpoint": args.checkpoint, "frames": args.frames, **asdict(config)})
    model = trainer.load_checkpoint(args.checkpoint).model
    result = caption_stream(load_frames(args.frames), model, config)
    for f in result.frames:
        print(f.line(model.vocab))
    print(f"switches={result.switches}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------- loss plot

SVG_W, SVG_H = 640, 400
MARGIN = 60


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def plot_loss(records: list) -> str:
    """SVG of per-token loss against iteration, with a marker at each LR change."""
    if not records:
        raise ParseError("loss log is empty")
    xs = [r.iteration for r in records]
    ys = [r.loss for r in records]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    xspan = (x1 - x0) or 1
    yspan = (y1 - y0) or 1.0
    if y1 == y0:
        y0 -= 0.5
    plot_w, plot_h = SVG_W - 2 * MARGIN, SVG_H - 2 * MARGIN

    def px(x):
        return MARGIN + (x - x0) / xspan * plot_w

    def py(y):
        return SVG_H - MARGIN - (y - y0) / yspan * plot_h

    points = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys))
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">',
        f'<line x1="{MARGIN}" y1="{SVG_H - MARGIN}" x2="{SVG_W - MARGIN}" y2="{SVG_H - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{SVG_H - MARGIN}" stroke="black"/>',
        f'<text x="{SVG_W // 2}" y="{SVG_H - 15}" text-anchor="middle">iteration</text>',
        f'<text x="15" y="{SVG_H // 2}" text-anchor="middle" transform="rotate(-90 15 {SVG_H // 2})">cross-entropy loss per token</text>',
        f'<text x="{MARGIN}" y="{SVG_H - MARGIN + 15}" text-anchor="middle">{x0}</text>',
        f'<text x="{SVG_W - MARGIN}" y="{SVG_H - MARGIN + 15}" text-anchor="middle">{x1}</text>',
        f'<text x="{MARGIN - 5}" y="{_fmt(py(max(ys)))}" text-anchor="end">{max(ys):.4g}</text>',
        f'<text x="{MARGIN - 5}" y="{_fmt(py(min(ys)))}" text-anchor="end">{min(ys):.4g}</text>',
    ]
    for prev, rec in zip(records, records[1:]):
        if rec.lr != prev.lr:
            x = _fmt(px(rec.iteration))
            label = escape(f"lr {rec.lr:.3g}")
            out.append(
                f'<g class="lr-decay" data-iteration="{rec.iteration}">'
                f'<line x1="{x}" y1="{MARGIN}" x2="{x}" y2="{SVG_H - MARGIN}" stroke="gray" stroke-dasharray="4 3"/>'
                f'<text x="{x}" y="{MARGIN - 5}" text-anchor="middle">{label}</text></g>'
            )
    out.append(f'<polyline fill="none" stroke="steelblue" points="{points}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot_loss(args) -> int:
    _echo_config("plot-loss", {"log": args.log, "out_svg": args.out_svg})
    Path(args.out_svg).write_text(plot_loss(trainer.read_loss_log(args.log)))
    print(args.out_svg)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "caption": cmd_caption,
    "eval": cmd_eval,
    "video": cmd_video,
    "plot-loss": cmd_plot_loss,
}


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with _thread_limit():
            return COMMANDS[args.command](args)
    except CaptionForgeError as e:
        return _fail(e.kind, str(e), e.exit_code)
    except FileNotFoundError as e:
        return _fail("missing_file", str(e), 2)
    except (ValueError, KeyError, TypeError) as e:
        return _fail("validation", f"{type(e).__name__}: {e}", 3)
    except (ArithmeticError, FloatingPointError) as e:
        return _fail("numeric", f"{type(e).__name__}: {e}", 4)


def main() -> None:
    sys.exit(run())
