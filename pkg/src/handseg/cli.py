"""Command-line entry point: ``handseg <subcommand> [flags]``.

Every subcommand writes its outputs, a ``config.json`` with the fully
resolved settings and a ``handseg.log`` under ``--out``, and prints a
single summary line. Exit codes: 0 success, 1 usage or validation error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data_io, trainer
from . import model as mdl
from . import segmenter as sg
from .errors import ContractError, DataError, HandsegError
from .hand_graph import TopologyKind, build_topology, export_edge_list

logger = logging.getLogger("handseg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
_DEFAULT_MODEL = mdl.ModelConfig()
_DEFAULT_TRAIN = trainer.TrainConfig()


class UsageError(Exception):
    pass


class GradientMismatch(HandsegError, RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; usage errors here exit with 1
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _widths(text):
    try:
        widths = tuple(int(w) for w in text.replace("-", ",").split(",") if w.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not widths or min(widths) < 1:
        raise argparse.ArgumentTypeError(f"widths must be positive integers, got {text!r}")
    return widths


def _topology(text):
    try:
        return str(TopologyKind.parse(text))
    except ContractError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_model_flags(p):
    p.add_argument("--topology", type=_topology, default=_DEFAULT_MODEL.topology,
                   help="anatomical | finger:<thumb|index|middle|ring|little> | star (default: %(default)s)")
    p.add_argument("--depth", type=int, default=_DEFAULT_MODEL.depth,
                   help="stacked BiLSTM layers (default: %(default)s)")
    p.add_argument("--gcn-width", type=int, default=_DEFAULT_MODEL.gcn_widths[0],
                   help="width of both GCN layers (default: %(default)s)")
    p.add_argument("--hidden", type=int, default=_DEFAULT_MODEL.hidden,
                   help="LSTM hidden units per direction (default: %(default)s)")
    p.add_argument("--fc", type=_widths, default=_DEFAULT_MODEL.fc_widths,
                   help="hidden FC widths before the class layer (default: 512,256,128)")


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=_DEFAULT_TRAIN.learning_rate,
                   help="Adam learning rate (default: %(default)s)")
    p.add_argument("--weight-decay", type=float, default=_DEFAULT_TRAIN.weight_decay,
                   help="L2 weight decay (default: %(default)s)")
    p.add_argument("--batch", type=int, default=_DEFAULT_TRAIN.batch_size,
                   help="batch size (default: %(default)s)")
    p.add_argument("--epochs", type=int, default=_DEFAULT_TRAIN.max_epochs,
                   help="maximum epochs (default: %(default)s)")
    p.add_argument("--patience", type=int, default=_DEFAULT_TRAIN.early_stop_patience,
                   help="early-stopping patience in epochs (default: %(default)s)")
    p.add_argument("--test-fraction", type=float, default=_DEFAULT_TRAIN.test_fraction,
                   help="held-out test share (default: %(default)s)")
    p.add_argument("--seed", type=int, default=_DEFAULT_TRAIN.seed,
                   help="seed for split, init and batch order (default: %(default)s)")
    p.add_argument("--threads", type=int, default=1,
                   help="gradient worker threads; 1 is bit-for-bit deterministic (default: %(default)s)")


def build_parser():
    parser = _Parser(prog="handseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="<subcommand>", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="write a seeded synthetic gesture dataset")
    p.add_argument("--classes", type=int, default=10, help="number of classes (default: %(default)s)")
    p.add_argument("--per-class", type=int, default=50, help="samples per class (default: %(default)s)")
    p.add_argument("--frames-min", type=int, default=40, help="shortest sample (default: %(default)s)")
    p.add_argument("--frames-max", type=int, default=60, help="longest sample (default: %(default)s)")
    p.add_argument("--noise", type=float, default=0.05,
                   help="coordinate noise in hand lengths (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: %(default)s)")
    p.add_argument("--out", type=Path, default=Path("out/data"), help="output directory (default: %(default)s)")

    p = sub.add_parser("train", help="train a model and evaluate it on a held-out split")
    p.add_argument("--data", type=Path, required=True, help="dataset file (.jsonl)")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", type=Path, default=Path("out/train"), help="output directory (default: %(default)s)")

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a model on a dataset")
    p.add_argument("--model", type=Path, required=True, help="checkpoint file")
    p.add_argument("--data", type=Path, required=True, help="dataset file (.jsonl)")
    p.add_argument("--out", type=Path, default=Path("out/eval"), help="output directory (default: %(default)s)")

    p = sub.add_parser("segment", help="cut continuous streams into gestures with a sliding window")
    p.add_argument("--model", type=Path, required=True, help="checkpoint file")
    p.add_argument("--stream", type=Path, required=True,
                   help="dataset file whose samples are played back to back as a stream")
    p.add_argument("--per-stream", type=int, default=0,
                   help="split the file into streams of this many samples; 0 = one stream (default: %(default)s)")
    p.add_argument("--streams", type=int, default=0,
                   help="instead of playing the file in order, draw this many streams of --per-stream "
                        "samples with no class twice in a row (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for drawing streams with --streams (default: %(default)s)")
    p.add_argument("--window", type=int, default=sg.SegmenterConfig.window_len,
                   help="window length in frames (default: %(default)s)")
    p.add_argument("--stride", type=int, default=sg.SegmenterConfig.stride,
                   help="window stride in frames (default: %(default)s)")
    p.add_argument("--threshold", type=float, default=sg.SegmenterConfig.accept_threshold,
                   help="acceptance threshold on the top probability (default: %(default)s)")
    p.add_argument("--min-run", type=int, default=sg.SegmenterConfig.min_consecutive,
                   help="windows a run needs to become a segment (default: %(default)s)")
    p.add_argument("--tune-on", type=Path, default=None,
                   help="dataset of development streams (same --per-stream layout) used to pick "
                        "--window and --min-run instead of the flags")
    p.add_argument("--out", type=Path, default=Path("out/segment"), help="output directory (default: %(default)s)")

    p = sub.add_parser("ablate", help="train every (topology, depth) cell and write a CSV report")
    p.add_argument("--data", type=Path, required=True, help="dataset file (.jsonl)")
    p.add_argument("--grid", type=str, default=None,
                   help="cells as topology@depth,... (default: the three topologies x depth 2 and 3)")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", type=Path, default=Path("out/ablate"), help="output directory (default: %(default)s)")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model's gradients")
    p.add_argument("--tiny", action="store_true",
                   help="use the tiny configuration (widths 4/8, 3 frames, 5 classes); "
                        "otherwise a 10-class model with widths 8/16")
    p.add_argument("--seed", type=int, default=0, help="seed for weights and inputs (default: %(default)s)")
    p.add_argument("--eps", type=float, default=1e-5, help="central-difference step (default: %(default)s)")
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="largest accepted relative error (default: %(default)s)")
    p.add_argument("--out", type=Path, default=Path("out/gradcheck"), help="output directory (default: %(default)s)")
    return parser


# -- helpers ----------------------------------------------------------------

def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return list(value)
    return value


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _record_config(out, args, **extra):
    resolved = {k: _jsonable(v) for k, v in sorted(vars(args).items())}
    _write_json(out / "config.json", {"command": args.command, "args": resolved, **extra})


def _model_config(args, n_classes):
    return mdl.ModelConfig(n_classes=n_classes, topology=args.topology,
                           gcn_widths=(args.gcn_width, args.gcn_width), hidden=args.hidden,
                           depth=args.depth, fc_widths=args.fc)


def _train_config(args):
    return trainer.TrainConfig(learning_rate=args.lr, weight_decay=args.weight_decay,
                               batch_size=args.batch, max_epochs=args.epochs,
                               test_fraction=args.test_fraction, bilstm_depth=args.depth,
                               seed=args.seed, early_stop_patience=args.patience)


def _n_classes(samples):
    if not samples:
        raise DataError("dataset is empty")
    return max(s.label for s in samples) + 1


def _streams(samples, per_stream, n_streams=0, seed=0):
    normed = [data_io.normalize_sequence(s) for s in samples]
    if not normed:
        raise DataError("stream file is empty")
    if n_streams > 0:
        if per_stream <= 0:
            raise ContractError("--streams needs --per-stream")
        return data_io.build_streams(normed, n_streams, per_stream, seed=seed)
    if per_stream <= 0:
        return [data_io.concatenate(normed)]
    return [data_io.concatenate(normed[i:i + per_stream]) for i in range(0, len(normed), per_stream)]


# -- subcommands ------------------------------------------------------------

def cmd_gen_data(args):
    samples = data_io.generate_synthetic(args.classes, args.per_class, (args.frames_min, args.frames_max),
                                         seed=args.seed, noise=args.noise)
    data_io.save_dataset(samples, args.out / "dataset.jsonl")
    lengths = [s.n_frames for s in samples]
    _write_json(args.out / "manifest.json", {
        "file": "dataset.jsonl",
        "n_samples": len(samples),
        "n_classes": args.classes,
        "per_class": args.per_class,
        "frames_min": min(lengths),
        "frames_max": max(lengths),
    })
    _record_config(args.out, args)
    return f"wrote {len(samples)} samples ({args.classes} classes) to {args.out / 'dataset.jsonl'}"


def cmd_train(args):
    samples = data_io.load_dataset(args.data)
    mc = _model_config(args, _n_classes(samples))
    tc = _train_config(args)
    _record_config(args.out, args, model_config=mc.to_dict(), train_config=tc.to_dict())
    params, report = trainer.train(samples, mc, tc, threads=args.threads)
    trainer.save_checkpoint(args.out / "model.ckpt", params, tc)
    data_io.save_dataset([samples[i] for i in report.test_indices], args.out / "test.jsonl")
    logger.info("wall time %.1f s", report.wall_time)
    summary = report.to_dict()
    summary.pop("wall_time")  # keep the report byte-stable across reruns
    _write_json(args.out / "report.json", summary)
    return (f"test accuracy {report.test_accuracy:.4f} after {len(report.epochs)} epochs "
            f"(best epoch {report.best_epoch}); model at {args.out / 'model.ckpt'}")


def cmd_eval(args):
    params, _ = trainer.load_checkpoint(args.model)
    samples = data_io.load_dataset(args.data, params.config.n_classes)
    if not samples:
        raise DataError(f"{args.data}: no samples")
    acc, confusion = trainer.evaluate(params, [data_io.normalize_sequence(s) for s in samples])
    _record_config(args.out, args, model_config=params.config.to_dict())
    _write_json(args.out / "eval.json", {"accuracy": acc, "n_samples": len(samples),
                                         "confusion": confusion.tolist()})
    return f"accuracy {acc:.4f} on {len(samples)} samples"


def cmd_segment(args):
    params, _ = trainer.load_checkpoint(args.model)
    n_classes = params.config.n_classes
    cfg = sg.SegmenterConfig(window_len=args.window, stride=args.stride,
                             accept_threshold=args.threshold, min_consecutive=args.min_run)
    tuned = None
    if args.tune_on is not None:
        dev = _streams(data_io.load_dataset(args.tune_on, n_classes), args.per_stream, args.streams, args.seed)
        cfg, table = sg.tune_segmenter(dev, params, base=cfg)
        tuned = {f"{w}@{m}": f for (w, m), f in sorted(table.items())}
    streams = _streams(data_io.load_dataset(args.stream, n_classes), args.per_stream, args.streams, args.seed)
    _record_config(args.out, args, segmenter={"window_len": cfg.window_len, "stride": cfg.stride,
                                              "accept_threshold": cfg.accept_threshold,
                                              "min_consecutive": cfg.min_consecutive},
                   tuning_false_recognitions=tuned)
    totals = {"segments": 0, "false": 0, "conf": []}
    for k, stream in enumerate(streams):
        where = args.out if len(streams) == 1 else args.out / f"stream_{k:03d}"
        where.mkdir(parents=True, exist_ok=True)
        trace = sg.trace_stream(stream, params, cfg)
        if trace.too_short:
            logger.warning("stream %d has %d frames, shorter than half a window", k, stream.n_frames)
        segments = sg.segment_trace(trace, cfg)
        score = sg.score_segments(segments, stream.labels)
        (where / "trace.csv").write_text(sg.trace_csv(trace), encoding="utf-8")
        (where / "trace_probs.csv").write_text(sg.trace_probs_csv(trace), encoding="utf-8")
        (where / "segments.csv").write_text(sg.segments_csv(segments), encoding="utf-8")
        (where / "score.json").write_text(sg.score_json(score), encoding="utf-8")
        logger.info("stream %d: %d segments, %d false recognitions", k, len(segments),
                    score.false_recognitions)
        totals["segments"] += len(segments)
        totals["false"] += score.false_recognitions
        totals["conf"] += [r.confidence for r in score.alignment if r.confidence is not None]
    avg = float(np.mean(totals["conf"])) if totals["conf"] else float("nan")
    return (f"{len(streams)} stream(s): {totals['segments']} segments, "
            f"{totals['false']} false recognitions, avg recognized softmax {avg:.3f}")


def cmd_ablate(args):
    samples = data_io.load_dataset(args.data)
    grid = trainer.parse_grid(args.grid) if args.grid else list(trainer.DEFAULT_GRID)
    mc = _model_config(args, _n_classes(samples))
    tc = _train_config(args)
    _record_config(args.out, args, model_config=mc.to_dict(), train_config=tc.to_dict(),
                   grid=[f"{k}@{d}" for k, d in grid])
    topo_dir = args.out / "topologies"
    topo_dir.mkdir(parents=True, exist_ok=True)
    for kind in dict.fromkeys(k for k, _ in grid):
        name = str(kind).replace(":", "-")
        (topo_dir / f"{name}.txt").write_text(export_edge_list(build_topology(kind)), encoding="utf-8")
    rows = trainer.ablate(samples, grid, mc, tc, threads=args.threads)
    (args.out / "ablation.csv").write_text(trainer.ablation_csv(rows), encoding="utf-8")
    failed = [r for r in rows if r["error"]]
    done = [r for r in rows if not r["error"]]
    if not done:
        raise trainer.TrainingError("every ablation cell failed; see the log")
    best = max(done, key=lambda r: float(r["accuracy"]))
    msg = (f"{len(rows)} cells; best {best['topology']} depth {best['depth']} "
           f"accuracy {float(best['accuracy']):.4f}")
    return msg + (f"; {len(failed)} failed" if failed else "")


def cmd_gradcheck(args):
    config = mdl.TINY_CONFIG if args.tiny else mdl.ModelConfig(
        n_classes=10, gcn_widths=(8, 8), hidden=16, depth=3, attention_width=16, fc_widths=(16, 16, 16))
    _record_config(args.out, args, model_config=config.to_dict())
    report = trainer.grad_check_model(config, seed=args.seed, eps=args.eps, tolerance=args.tolerance)
    (args.out / "gradcheck.txt").write_text("\n".join(report.lines()) + "\n", encoding="utf-8")
    for line in report.lines():
        logger.info("%s", line)
    if not report.passed:
        raise GradientMismatch(report.lines()[-1] + f" failing={','.join(report.failing_blocks())}")
    return report.lines()[-1]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "segment": cmd_segment,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def _attach_log(out):
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "handseg.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("handseg")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def run(argv=None):
    """Parse ``argv`` and run one subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    handler = _attach_log(args.out)
    try:
        logger.info("handseg %s %s", args.command, " ".join(argv if argv is not None else sys.argv[1:]))
        summary = COMMANDS[args.command](args)
    except (FileNotFoundError, ContractError, DataError) as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HandsegError, OSError, ArithmeticError, RuntimeError) as exc:
        logger.exception("runtime failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        logging.getLogger("handseg").removeHandler(handler)
        handler.close()
    print(summary)
    return EXIT_OK


def main():
    sys.exit(run())
