"""Command-line entry point.

Subcommands: synth (generate a synthetic corpus), build (corpus -> AFD1
dataset at a given epsilon), xval (leave-one-video-out run), train (single
90/10 split, writes an AFM1 checkpoint), eval (checkpoint accuracy on a
dataset), gradcam (heatmap PGMs for selected segments).

Configuration comes from flags, optionally seeded by a key=value config
file (flags win). All randomness flows from --seed. Every artifact-writing
command drops a run manifest JSON next to its outputs recording the full
configuration; reruns with identical inputs and seeds produce byte-identical
artifacts, manifests differing only in their timestamp.

Exit codes: 0 success, 2 usage or configuration error, 3 empty result or
bad data, 4 runtime/training failure. Log level comes from PIX2AFFECT_LOG
(error, info, debug; default error).
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import sys

import numpy as np

from . import __version__, dataset as ds_mod, gradcam as gc_mod, harness, models, synth as synth_mod
from .errors import ConfigError, DataError, NumericError, PixelAffectError, TrainingError
from .tensors import Rng
from .traces import format_trace, parse_trace
from .video import SEGMENT_FRAMES, ingest_video, write_pgm

log = logging.getLogger("pix2affect.cli")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_EMPTY = 3
EXIT_RUNTIME = 4


def _setup_logging() -> None:
    level = os.environ.get("PIX2AFFECT_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"PIX2AFFECT_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level],
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _write_manifest(out_dir: str, command: str, config: dict, inputs: list[str],
                    outputs: list[str], name: str = "run_manifest.json") -> None:
    doc = {
        "command": command,
        "tool_version": __version__,
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config_values(args: argparse.Namespace, keys: list[str]) -> dict:
    return {k: getattr(args, k) for k in keys}


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = synth_mod.SynthConfig(
        num_videos=args.videos, duration_s=args.duration, seed=args.seed,
        noise_sigma=args.noise_sigma, annotator_lag_s=args.annotator_lag,
        annotator_noise=args.annotator_noise)
    clips, traces = synth_mod.synth_corpus(cfg)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for clip, trace in zip(clips, traces):
        vdir = os.path.join(args.out, clip.video_id)
        os.makedirs(vdir, exist_ok=True)
        for i in range(clip.frames.shape[0]):
            frame = np.round(clip.frames[i] * 255.0).astype(np.uint8)
            write_pgm(os.path.join(vdir, f"frame_{i:05d}.pgm"), frame)
        trace_path = os.path.join(vdir, "trace.csv")
        with open(trace_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(format_trace(trace))
        outputs.append(vdir)
    region = ",".join(str(v) for v in cfg.signal_region)
    _write_manifest(args.out, "synth",
                    dict(_config_values(args, ["videos", "duration", "seed", "noise_sigma",
                                               "annotator_lag", "annotator_noise"]),
                         signal_region=region),
                    inputs=[], outputs=outputs)
    print(f"wrote {len(clips)} videos x {clips[0].frames.shape[0]} frames to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# build
# ---------------------------------------------------------------------------

def _load_corpus(corpus_dir: str):
    subdirs = sorted(d for d in os.listdir(corpus_dir)
                     if os.path.isdir(os.path.join(corpus_dir, d)))
    if not subdirs:
        raise DataError(f"{corpus_dir}: no per-video directories found")
    clips, traces = [], []
    for name in subdirs:
        vdir = os.path.join(corpus_dir, name)
        trace_files = sorted(f for f in os.listdir(vdir)
                             if f.lower().endswith((".csv", ".txt")))
        if len(trace_files) != 1:
            raise DataError(f"{vdir}: expected exactly one trace file, found {trace_files}")
        with open(os.path.join(vdir, trace_files[0]), "r", encoding="utf-8") as fh:
            traces.append(parse_trace(fh, video_id=name))
        clips.append(ingest_video(vdir, video_id=name))
    return clips, traces


def cmd_build(args) -> int:
    clips, traces = _load_corpus(args.corpus)
    total_windows = sum(c.frames.shape[0] // SEGMENT_FRAMES for c in clips)
    ds = ds_mod.build_dataset(clips, traces, args.epsilon)
    kept = len(ds.records)
    reduction = 100.0 * (1.0 - kept / total_windows) if total_windows else 0.0
    print(f"epsilon={args.epsilon}: {kept} records kept of {total_windows} windows "
          f"({reduction:.0f}% dropped as Uncertain or excluded)")
    if kept < 0.1 * total_windows:
        log.warning("dataset nearly empty at epsilon=%s (%d records)", args.epsilon, kept)
    ds_mod.save_dataset(args.out, ds, manifest_extra={"seed": args.seed,
                                                      "source": args.corpus})
    _write_manifest(os.path.dirname(os.path.abspath(args.out)), "build",
                    _config_values(args, ["corpus", "epsilon", "seed"]),
                    inputs=[args.corpus], outputs=[args.out, args.out + ".manifest.txt"],
                    name=os.path.basename(args.out) + ".run.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# xval / train / eval
# ---------------------------------------------------------------------------

def _train_config(args) -> harness.TrainConfig:
    return harness.TrainConfig(
        max_epochs=args.epochs, patience=args.patience, batch_size=args.batch_size,
        learning_rate=args.lr, val_fraction=args.val_fraction, seed=args.seed)


def cmd_xval(args) -> int:
    ds = ds_mod.load_dataset(args.dataset)
    cfg = _train_config(args)
    report = harness.run_cross_validation(ds, args.model, cfg, jobs=args.jobs)
    json_path, table_path = args.out + ".json", args.out + ".txt"
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(harness.report_to_json(report))
    table = harness.format_report_table([report])
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    print(f"mean accuracy {report.mean_accuracy:.3f} +/- {report.ci95:.3f} "
          f"(baseline {report.mean_baseline:.3f}) over {len(report.folds)} folds")
    _write_manifest(os.path.dirname(os.path.abspath(args.out)) or ".", "xval",
                    _config_values(args, ["dataset", "model", "epochs", "patience",
                                          "batch_size", "lr", "val_fraction", "seed",
                                          "jobs"]),
                    inputs=[args.dataset], outputs=[json_path, table_path],
                    name=os.path.basename(args.out) + ".run.json")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = ds_mod.load_dataset(args.dataset)
    cfg = _train_config(args)
    spec = models.build_architecture(args.model)
    rng = Rng(cfg.seed)
    train, val = harness.split_train_val(ds.records, cfg.val_fraction, rng)
    params, curve = harness.train_model(spec, train, val, cfg, rng)
    with open(args.out, "wb") as fh:
        models.save_checkpoint(fh, spec, params, cfg.seed)
    print(f"trained {spec.name} for {curve.epochs_run} epochs "
          f"(best val loss {curve.best_val_loss:.4f} at epoch {curve.best_epoch}); "
          f"checkpoint -> {args.out}")
    _write_manifest(os.path.dirname(os.path.abspath(args.out)) or ".", "train",
                    _config_values(args, ["dataset", "model", "epochs", "patience",
                                          "batch_size", "lr", "val_fraction", "seed"]),
                    inputs=[args.dataset], outputs=[args.out],
                    name=os.path.basename(args.out) + ".run.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = ds_mod.load_dataset(args.dataset)
    with open(args.checkpoint, "rb") as fh:
        spec, params, _seed = models.load_checkpoint(fh)
    acc = harness.evaluate(spec, params, ds.records)
    print(f"{spec.name} accuracy on {len(ds.records)} records: {acc:.4f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"model": spec.name, "dataset": args.dataset,
                       "records": len(ds.records), "accuracy": acc}, fh, indent=2,
                      sort_keys=True)
            fh.write("\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcam
# ---------------------------------------------------------------------------

def cmd_gradcam(args) -> int:
    ds = ds_mod.load_dataset(args.dataset)
    with open(args.checkpoint, "rb") as fh:
        spec, params, _seed = models.load_checkpoint(fh)
    records = ds.records
    if args.video is not None:
        records = [r for r in records if r.video_id == args.video]
    if args.window is not None:
        records = [r for r in records if r.window_index == args.window]
    if args.limit is not None:
        records = records[:args.limit]
    if not records:
        raise DataError("selector matched no segments")
    classes = {"low": [0], "high": [1], "both": [0, 1]}[args.classes]
    conv_layers = gc_mod.conv_layer_indices(spec)
    layer = args.layer if args.layer is not None else conv_layers[-1]
    if layer not in conv_layers:
        raise ConfigError(f"--layer must be one of {conv_layers}")
    os.makedirs(args.out, exist_ok=True)
    index_lines, outputs = [], []
    for rec in records:
        x = harness.model_input(spec, rec)
        underlay = rec.last_frame[0]
        for cls in classes:
            cls_name = "low" if cls == 0 else "high"
            stem = f"{rec.video_id}_w{rec.window_index:04d}_{cls_name}"
            heat_path = os.path.join(args.out, stem + ".heat.pgm")
            overlay_path = os.path.join(args.out, stem + ".overlay.pgm")
            hm = gc_mod.gradcam(spec, params, x, cls, layer_index=layer)
            gc_mod.save_heatmap(hm, underlay, heat_path, overlay_path)
            index_lines.append(f"{stem}\tvideo={rec.video_id}\twindow={rec.window_index}"
                               f"\tclass={cls_name}\tlayer={layer}")
            outputs += [heat_path, overlay_path]
    with open(os.path.join(args.out, "index.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(index_lines) + "\n")
    print(f"wrote {len(outputs)} heatmap images for {len(records)} segments to {args.out}")
    _write_manifest(args.out, "gradcam",
                    _config_values(args, ["dataset", "checkpoint", "video", "window",
                                          "classes", "layer", "limit", "seed"]),
                    inputs=[args.dataset, args.checkpoint],
                    outputs=outputs + [os.path.join(args.out, "index.txt")])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="root random seed")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel fold workers (xval only; default 1, bit-reproducible)")
    p.add_argument("--config", type=str, default=None,
                   help="key=value file supplying flag defaults (flags win)")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, choices=["2dframe", "2dseq", "3dseq"])
    p.add_argument("--epochs", type=int, default=100, help="maximum training epochs")
    p.add_argument("--patience", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--val-fraction", type=float, default=0.10, dest="val_fraction")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pix2affect",
        description="Binary arousal classification from gameplay video pixels")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--videos", type=int, default=20)
    p.add_argument("--duration", type=float, default=60.0, help="seconds per video")
    p.add_argument("--noise-sigma", type=float, default=0.05, dest="noise_sigma")
    p.add_argument("--annotator-lag", type=float, default=0.25, dest="annotator_lag")
    p.add_argument("--annotator-noise", type=float, default=0.02, dest="annotator_noise")
    p.add_argument("--out", required=True, help="corpus output directory")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build", help="label a corpus into an AFD1 dataset")
    p.add_argument("--corpus", required=True)
    p.add_argument("--epsilon", type=float, default=0.0,
                   help="uncertainty zone half-width (e.g. 0, 0.05, 0.10, 0.20)")
    p.add_argument("--out", required=True, help="dataset output file")
    _add_common(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("xval", help="leave-one-video-out cross-validation")
    p.add_argument("--dataset", required=True)
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="report path prefix (.json/.txt)")
    _add_common(p)
    p.set_defaults(func=cmd_xval)

    p = sub.add_parser("train", help="train one model on a 90/10 split")
    p.add_argument("--dataset", required=True)
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="AFM1 checkpoint path")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None, help="optional JSON result path")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcam", help="class activation heatmaps")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", default=None, help="select one video id")
    p.add_argument("--window", type=int, default=None, help="select one window index")
    p.add_argument("--classes", choices=["low", "high", "both"], default="both")
    p.add_argument("--layer", type=int, default=None,
                   help="conv layer index (default: last conv layer)")
    p.add_argument("--limit", type=int, default=None, help="cap matched segments")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_gradcam)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Load key=value defaults from --config; explicit flags still win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", type=str, default=None)
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return argv
    defaults = {}
    with open(known.config, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{known.config}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            defaults[key.replace("-", "_")] = value
    # apply to every subparser that knows the key; values are re-parsed by type
    subparsers = parser._subparsers._group_actions[0].choices.values()  # type: ignore[union-attr]
    applied = set()
    for sp in subparsers:
        for action in sp._actions:
            if action.dest in defaults:
                value = defaults[action.dest]
                sp.set_defaults(**{action.dest: action.type(value) if action.type else value})
                applied.add(action.dest)
    unknown = sorted(set(defaults) - applied)
    if unknown:
        raise ConfigError(f"{known.config}: unknown keys {unknown}")
    return argv


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _setup_logging()
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_EMPTY
    except (TrainingError, NumericError, PixelAffectError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
