"""Command-line entry point: ``taris {gen-data,train,eval,stream,masks,hist}``.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 numerical error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import segmentation as seg
from .checkpoint import CheckpointError, load_checkpoint, restore_model, save_checkpoint
from .config import ConfigError, TarisConfig, load_config, parse_count
from .diffcore import NumericalError
from .synthdata import CorpusError, build_lexicon, load_manifest, make_corpus, read_corpus
from .transformer import BOS

log = logging.getLogger("taris")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

# CLI flag -> config field
_OVERRIDES = {
    "modality": "modality", "fusion": "fusion", "gate": "gate", "e_la": "e_la", "e_lb": "e_lb",
    "d_la": "d_la", "d_lb": "d_lb", "window_b": "window_b", "lam": "lam", "layers": "layers",
    "hidden": "hidden", "dff": "dff", "epochs": "epochs", "lr": "lr", "seed": "seed",
    "batch_size": "batch_size", "dropout": "dropout",
}


def _snr(text: str) -> float:
    return math.inf if text.lower() == "clean" else float(parse_count(text))


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model configuration")
    g.add_argument("--preset", choices=("desk", "paper"), default="desk")
    g.add_argument("--config", type=Path, help="JSON config file (overrides the preset)")
    g.add_argument("--modality", choices=("audio", "av"))
    g.add_argument("--fusion", choices=("add", "concat"))
    g.add_argument("--gate", choices=("sigmoid", "scaled-sigmoid", "tanh"))
    for flag in ("--e-la", "--e-lb", "--d-la", "--d-lb"):
        g.add_argument(flag, type=parse_count, metavar="N|inf")
    g.add_argument("--window-b", type=int)
    g.add_argument("--lambda", dest="lam", type=float, help="word-loss weight (default 0.01)")
    g.add_argument("--layers", type=int)
    g.add_argument("--hidden", type=int)
    g.add_argument("--dff", type=int)
    g.add_argument("--dropout", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def config_from_args(args, base: TarisConfig | None = None) -> TarisConfig:
    overrides = {field: getattr(args, flag, None) for flag, field in _OVERRIDES.items()}
    if base is None:
        return load_config(args.preset, args.config, **overrides)
    data = base.to_dict()
    if getattr(args, "config", None) is not None:
        try:
            data.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    return TarisConfig.from_dict(data).replace(**{k: v for k, v in overrides.items() if v is not None})


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _write_csv(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        if not rows:
            return
        fields = list(dict.fromkeys(k for r in rows for k in r))
        writer = csv.DictWriter(fh, fieldnames=fields, restval="")
        writer.writeheader()
        writer.writerows(rows)


def _load_split(data_dir: Path, split: str, limit: int | None):
    samples = read_corpus(data_dir / f"{split}.bin")
    return samples[:limit] if limit else samples


def _model_from(args):
    ckpt = load_checkpoint(args.checkpoint)
    config = config_from_args(args, ckpt.config)
    return restore_model(ckpt, config), ckpt


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    lexicon = build_lexicon(args.seed or 0, args.vocab, args.d_audio, args.d_video,
                            (args.min_frames, args.max_frames))
    manifest = make_corpus(args.out, lexicon, args.n_train, args.n_test, args.snr,
                           args.video_informativeness, args.seed or 0,
                           (args.min_words, args.max_words), args.silence_rate)
    print(json.dumps({k: manifest[k] for k in ("n_train", "n_test", "vocab_size", "snr_db")}))
    return 0


def cmd_train(args) -> int:
    from .evaluation import evaluate
    from .plotting import plot_training
    from .training import train

    config = config_from_args(args)
    manifest = load_manifest(args.data)
    changes = {"d_audio": manifest["d_audio"], "d_video": manifest["d_video"]}
    if args.stages is not None:
        changes["stages"] = [_snr(s) for s in args.stages.split(",")]
    elif args.snr is not None:
        changes["stages"] = [args.snr]
    config = config.replace(**changes)
    samples = _load_split(args.data, "train", args.limit)
    resume = load_checkpoint(args.resume) if args.resume else None
    probe = None
    if args.eval_subset:
        held = _load_split(args.data, "test", args.eval_subset)

        def probe(model):
            rep = evaluate(model, held)
            return {"cer": rep.cer, "word_mae": rep.word_mae}
    out = Path(args.out)
    result = train(config, samples, resume=resume, stop_after=args.stop_after,
                   checkpoint_dir=out, evaluate=probe,
                   on_epoch=lambda e: print(json.dumps(e, default=_json_default), flush=True))
    _write_json(out / "config.json", config.to_dict())
    _write_json(out / "history.json", result.history)
    _write_csv(out / "history.csv", result.history)
    if result.history:
        plot_training(result.history, out / "training.png")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate
    from .plotting import plot_histogram

    model, _ = _model_from(args)
    samples = _load_split(args.data, args.split, args.limit)
    snr = math.inf if args.snr is None else args.snr
    report = evaluate(model, samples, args.mode, snr_db=snr, seed=args.seed or 0, workers=args.workers)
    summary = report.summary()
    print(json.dumps(summary, default=_json_default))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "report.json", summary)
        _write_csv(out / "sentences.csv", report.sentence_rows())
        _write_csv(out / "histogram.csv", report.histogram.rows())
        plot_histogram(report.histogram, out / "histogram.png")
    return 0


def cmd_stream(args) -> int:
    from .streaming import iter_stream
    from .synthdata import iter_corpus

    model, _ = _model_from(args)
    if args.input is not None:
        source = sys.stdin.buffer if str(args.input) == "-" else args.input
    elif args.data is not None:
        source = args.data / f"{args.split}.bin"
    else:
        raise ConfigError("stream needs --input or --data")
    sample = None
    for i, s in enumerate(iter_corpus(source)):
        if i == args.index:
            sample = s
            break
    if sample is None:
        raise CorpusError(f"no sample with index {args.index}")
    gen = iter_stream(model, sample.audio, sample.video, args.mode)
    records = []
    while True:
        try:
            event = next(gen)
        except StopIteration as stop:
            state = stop.value
            break
        records.append(event.to_record())
        print(json.dumps(records[-1], default=_json_default), flush=True)
    result = {"reference": sample.text, "transcript": state.transcript, "truncated": state.truncated,
              "latency": state.report().summary()}
    print(json.dumps(result, default=_json_default))
    if args.out:
        _write_json(Path(args.out), {**result, "events": records})
    return 0


def cmd_masks(args) -> int:
    config = config_from_args(args)
    n = args.frames
    out = {}
    if args.kind == "encoder":
        bias = seg.encoder_window_mask(n, seg.ConnectivitySpec(config.e_lb, config.e_la))
    elif args.kind == "causal":
        bias = seg.causal_mask(n)
    elif args.kind == "av":
        m = args.video_frames or math.ceil(n / 2)
        bias = seg.av_mask(n, m, config.window_b, None if args.video_frames else config.av_ratio)
    else:
        if args.alpha is None or args.text is None:
            raise ConfigError("segment masks need --alpha and --text")
        alpha = [float(a) for a in args.alpha.split(",")]
        ids = seg.text_to_ids(args.text)
        # rows are decoder inputs: BOS followed by all but the last grapheme
        w = seg.word_indices([BOS] + ids[:-1])
        w_hat = seg.segment_indices(alpha)
        bias, empty = seg.segment_mask(w, w_hat, seg.SegmentSpec(config.d_lb, config.d_la), fallback=False)
        out.update(word_indices=w.tolist(), segment_indices=w_hat.tolist(), empty_rows=np.flatnonzero(empty).tolist())
    rows = seg.mask_rows(bias)
    for r in rows:
        print(r)
    if args.out:
        _write_json(Path(args.out), {"kind": args.kind, "rows": rows, **out})
    return 0


def cmd_hist(args) -> int:
    from .evaluation import evaluate
    from .plotting import plot_histogram

    model, _ = _model_from(args)
    samples = _load_split(args.data, args.split, args.limit)
    report = evaluate(model, samples, "offline", seed=args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "histogram.csv", report.histogram.rows())
    _write_json(out / "histogram.json", report.histogram.summary())
    plot_histogram(report.histogram, out / "histogram.png")
    print(json.dumps(report.histogram.summary()))
    return 0


def cmd_export(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ckpt.tensors = {k: v for k, v in ckpt.tensors.items() if k.startswith("param/")}
    save_checkpoint(args.out, ckpt, precision="f32")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taris", description="Online speech recognition with word-count gating.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--vocab", type=int, default=20)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--min-words", type=int, default=3)
    p.add_argument("--max-words", type=int, default=8)
    p.add_argument("--min-frames", type=int, default=4, help="shortest word template")
    p.add_argument("--max-frames", type=int, default=8, help="longest word template")
    p.add_argument("--d-audio", type=int, default=16)
    p.add_argument("--d-video", type=int, default=16)
    p.add_argument("--snr", type=_snr, default=math.inf, help="audio SNR in dB ('inf' for clean)")
    p.add_argument("--video-informativeness", type=float, default=1.0)
    p.add_argument("--silence-rate", type=float, default=0.0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a corpus")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--snr", type=_snr, help="train one stage at this SNR")
    p.add_argument("--stages", help="comma-separated SNR curriculum, e.g. inf,10,0,-5")
    p.add_argument("--resume", type=Path)
    p.add_argument("--stop-after", type=int, help="stop after this many epochs in total")
    p.add_argument("--limit", type=int, help="use only the first N training sentences")
    p.add_argument("--eval-subset", type=int, default=0, help="score N test sentences at each stage end")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "score a checkpoint"),
                                 ("hist", cmd_hist, "segment-length histogram")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        _add_model_flags(p)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--split", choices=("train", "test"), default="test")
        p.add_argument("--limit", type=int)
        if name == "eval":
            p.add_argument("--mode", choices=("offline", "stream-final", "stream-eager"), default="offline")
            p.add_argument("--snr", type=_snr, help="extra evaluation noise in dB")
            p.add_argument("--workers", type=int, default=1)
            p.add_argument("--out", type=Path)
        else:
            p.add_argument("--out", type=Path, required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("stream", help="stream one sentence and print events")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, help="corpus file to read, or '-' for standard input")
    p.add_argument("--data", type=Path, help="corpus directory (used when --input is absent)")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--mode", choices=("final", "eager"), default="final")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("masks", help="print an attention mask as 0/1 rows")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--kind", choices=("encoder", "causal", "segment", "av"), default="encoder")
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--video-frames", type=int)
    p.add_argument("--alpha", help="comma-separated gate values (segment masks)")
    p.add_argument("--text", help="transcript (segment masks)")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_masks)

    p = sub.add_parser("export", help="write a parameters-only f32 checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"taris: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, CheckpointError, FileNotFoundError) as exc:
        print(f"taris: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"taris: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"taris: invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
