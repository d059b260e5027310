"""Command-line entry point: ``evfuse simulate|stack|track|eval``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_override
from .evaluation import evaluate_dataset, write_report
from .events import EventFileError, read_event_file, serialize_event_stream
from .io import atomic_write_bytes, read_box_file, read_frames_dir, write_pgm, write_results
from .nn.weights import WeightFileError, load_weights
from .representation import frame_windows, preprocess_frame, stack_events, to_network_tensor
from .simulator import IntensityFrame, simulate_events
from .tracker.core import run_sequence
from .tracker.sampling import InsufficientSamplesError

logger = logging.getLogger("evfuse")

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class CLIError(Exception):
    pass


def _configure_logging() -> None:
    name = os.environ.get("EVFUSE_LOG", "quiet").strip().lower() or "quiet"
    if name not in LOG_LEVELS:
        raise CLIError(f"EVFUSE_LOG must be one of {', '.join(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def _require_dir(path, what):
    if not Path(path).is_dir():
        raise CLIError(f"{what} not found or not a directory: {path}")


def _require_file(path, what):
    if not Path(path).is_file():
        raise CLIError(f"{what} not found: {path}")


def _require_parent(path, what):
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise CLIError(f"directory for {what} does not exist: {parent}")


# ---------------------------------------------------------------- subcommands

def cmd_simulate(args) -> int:
    _require_dir(args.frames_dir, "frames directory")
    _require_parent(args.out, "output event file")
    config = RunConfig.from_dict({}, {"theta": args.theta, "eps": args.eps})
    frames, timestamps = read_frames_dir(args.frames_dir)
    if not frames:
        raise CLIError(f"no PGM frames in {args.frames_dir}")
    seq = [IntensityFrame(t, f.astype(np.float64)) for t, f in zip(timestamps, frames)]
    stream = simulate_events(seq, config.simulator)
    atomic_write_bytes(args.out, serialize_event_stream(stream))
    logger.info("wrote %d events to %s", len(stream), args.out)
    return 0


def cmd_stack(args) -> int:
    _require_file(args.events, "event file")
    _require_parent(args.out_prefix + "_on.pgm", "output images")
    if args.t0 > args.t1:
        raise CLIError(f"t0 ({args.t0}) must not exceed t1 ({args.t1})")
    stream = read_event_file(args.events)
    image = stack_events(stream, args.t0, args.t1)
    on, off = image.on_counts, image.off_counts
    peak = int(max(on.max(initial=0), off.max(initial=0)))
    maxval = max(255, peak)
    write_pgm(args.out_prefix + "_on.pgm", on, maxval)
    write_pgm(args.out_prefix + "_off.pgm", off, maxval)
    logger.info("stacked %d ON / %d OFF events", int(on.sum()), int(off.sum()))
    return 0


def cmd_track(args) -> int:
    # everything that can be checked cheaply is checked before any computation
    _require_dir(args.frames_dir, "frames directory")
    _require_file(args.events, "event file")
    _require_file(args.gt, "ground-truth file")
    _require_file(args.config, "config file")
    _require_parent(args.out, "results file")
    overrides = dict(parse_override(o) for o in args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = RunConfig.load(args.config, overrides)
    if config.weights is not None:
        wpath = Path(config.weights)
        if not wpath.is_absolute():
            wpath = Path(args.config).resolve().parent / wpath
        _require_file(wpath, "weights file")

    frames, timestamps = read_frames_dir(args.frames_dir)
    if not frames:
        raise CLIError(f"no PGM frames in {args.frames_dir}")
    gt, _ = read_box_file(args.gt)
    if not gt or gt[0] is None:
        raise CLIError(f"{args.gt}: the first line must hold a valid initial box")
    stream = read_event_file(args.events)
    height, width = frames[0].shape
    if tuple(stream.resolution) != (width, height):
        raise CLIError(f"event resolution {stream.resolution} does not match frame size {(width, height)}")
    weights = load_weights(wpath) if config.weights is not None else None

    dtype = config.tracker.dtype
    modality = config.tracker.modality
    ft = [preprocess_frame(f, dtype) for f in frames] if modality != "event" else None
    et = ([to_network_tensor(stack_events(stream, a, b), dtype) for a, b in frame_windows(timestamps)]
          if modality != "frame" else None)
    boxes, scores = run_sequence(ft, et, gt[0], config.tracker, weights=weights)
    write_results(args.out, boxes, scores)
    logger.info("tracked %d frames -> %s", len(boxes), args.out)
    return 0


def cmd_eval(args) -> int:
    _require_dir(args.results_dir, "results directory")
    _require_dir(args.annotations_dir, "annotations directory")
    _require_parent(args.out, "report file")
    report = evaluate_dataset(args.results_dir, args.annotations_dir)
    if not report["sequences"]:
        raise CLIError("no sequence could be evaluated: "
                       + "; ".join(f"{e['sequence']}: {e['error']}" for e in report["errors"]) or "none found")
    write_report(report, args.out)
    for err in report["errors"]:
        logger.warning("skipped %s: %s", err["sequence"], err["error"])
    agg = report["aggregate"]
    logger.info("P@20 %.4f  AUC %.4f over %d sequences", agg["p20"], agg["auc"], len(report["sequences"]))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evfuse", description="Visible + event object tracking toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{simulate,stack,track,eval}")

    p = sub.add_parser("simulate", help="convert a PGM frame directory into an event file")
    p.add_argument("frames_dir")
    p.add_argument("out")
    p.add_argument("--theta", type=float, default=0.2, help="contrast threshold (default 0.2)")
    p.add_argument("--eps", type=float, default=0.5, help="log-intensity floor (default 0.5)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("stack", help="accumulate events in [t0, t1) into ON/OFF PGM images")
    p.add_argument("events")
    p.add_argument("t0", type=int)
    p.add_argument("t1", type=int)
    p.add_argument("out_prefix")
    p.set_defaults(func=cmd_stack)

    p = sub.add_parser("track", help="track the object given in the first ground-truth line")
    p.add_argument("frames_dir")
    p.add_argument("events")
    p.add_argument("gt")
    p.add_argument("config")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score result files against annotations")
    p.add_argument("results_dir")
    p.add_argument("annotations_dir")
    p.add_argument("out")
    p.set_defaults(func=cmd_eval)
    return parser


def run(argv=None) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _configure_logging()
        return args.func(args)
    except (CLIError, EventFileError, WeightFileError, InsufficientSamplesError, ValueError, KeyError,
            OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"evfuse {args.command}: error: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
