"""``eventfly`` command line.

Exit codes: 0 success, 1 runtime failure (missing or malformed files, aborted
training), 2 usage or validation error. Data and tables go to stdout,
diagnostics to stderr. Every file is written through a temporary name and an
atomic rename.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, EventFlyError

log = logging.getLogger("eventfly")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    """Bad flag values detected after parsing (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _unit(name):
    def check(text):
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number, got {text!r}") from None
        if not 0.0 <= v <= 1.0:
            raise argparse.ArgumentTypeError(f"{name} must be in [0, 1], got {v}")
        return v

    return check


def _positive(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eventfly", description="Event-camera cross-platform adaptation toolkit.")
    p.add_argument("--version", action="version", version=f"eventfly {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--print-config", action="store_true", help="print the effective settings as JSON and exit")
    common.add_argument("--jobs", type=_positive, default=1, help="worker threads for per-sample work")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("voxelize", parents=[common], help="events (.evt) to a voxel grid (.vxg)")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--bins", type=_positive, default=20)
    s.add_argument("--duration", type=_positive, default=5_000_000, help="window length in microseconds")

    s = sub.add_parser("density", parents=[common], help="density map of one grid, or the mean over several")
    s.add_argument("--input", required=True, nargs="+", help="one or more .vxg files")
    s.add_argument("--output", required=True, help="density as a single-bin .vxg")
    s.add_argument("--normalize", default=None, help="'max' or 'quantile-<q>'; raw densities when omitted")
    s.add_argument("--pgm", help="also write an 8-bit heatmap")

    s = sub.add_parser("similarity", parents=[common], help="similarity of two normalised densities")
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--output", required=True, help="two-bin .vxg: similarity, defined flag")

    s = sub.add_parser("blend", parents=[common], help="EventBlend a source and a target grid")
    s.add_argument("--source", required=True, help="source .vxg")
    s.add_argument("--target", required=True, help="target .vxg")
    s.add_argument("--target-density", help="aggregated target density (.vxg from `density`); default: the target grid's own")
    s.add_argument("--tau", type=_unit("--tau"), default=0.4)
    s.add_argument("--normalize", default="max")
    s.add_argument("--output", required=True, help="blended .vxg")
    s.add_argument("--mask-out", help="write the blend mask (.msk)")
    s.add_argument("--source-labels", help="source .lbl; with --pseudo-labels produces blended labels")
    s.add_argument("--pseudo-labels", help="target pseudo-label .lbl")
    s.add_argument("--labels-out", help="blended .lbl")

    s = sub.add_parser("synth", parents=[common], help="write a synthetic platform corpus")
    s.add_argument("--platform", required=True, choices=("vehicle", "drone", "quadruped"))
    s.add_argument("--n", type=_positive, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--height", type=_positive, default=90)
    s.add_argument("--width", type=_positive, default=160)
    s.add_argument("--duration", type=_positive, default=5_000_000)
    s.add_argument("--seq-len", type=_positive, default=50, help="frames per sequence")

    s = sub.add_parser("split", parents=[common], help="train/validation split of a synth corpus")
    s.add_argument("--data", required=True)
    s.add_argument("--ratio", type=float, default=0.4)
    s.add_argument("--output", help="write the split as JSON instead of printing it")

    s = sub.add_parser("train", parents=[common], help="run adaptation from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, help="override the config seed")
    s.add_argument("--iterations", type=int, help="override the config iteration count")
    s.add_argument("--out", help="override the output directory")

    s = sub.add_parser("eval", parents=[common], help="segmentation metrics")
    s.add_argument("--pred", nargs="+", help="predicted .lbl files")
    s.add_argument("--gt", nargs="+", help="ground-truth .lbl files (19-class maps are mapped to 11)")
    s.add_argument("--checkpoint", help="evaluate a trained network instead of label files")
    s.add_argument("--config", help="run config for --checkpoint (default: config.json beside it)")
    s.add_argument("--data", help="synth corpus evaluated with --checkpoint (validation split)")
    s.add_argument("--net", choices=("teacher", "student"), default=None)
    s.add_argument("--method", default="")
    s.add_argument("--json", help="write metrics JSON here")
    s.add_argument("--csv", help="write a benchmark-style CSV row here")

    s = sub.add_parser("stats", parents=[common], help="per-class activation maps of a synth corpus")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, choices=(11, 19), default=19)
    s.add_argument("--limit", type=_positive, help="use at most this many samples")
    s.add_argument("--bins", type=_positive, default=20)
    s.add_argument("--duration", type=_positive, default=5_000_000)
    return p


def parse_args(argv=None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


# -- commands ------------------------------------------------------------------------------


def _cmd_voxelize(a):
    from .events import voxelize
    from .io import read_events, write_voxel

    write_voxel(voxelize(read_events(a.input), a.bins, a.duration), a.output)


def _read_density(path):
    from .eap import DensityMap
    from .io import read_voxel

    g = read_voxel(path)
    if g.bins != 1:
        raise ConfigError(f"{path}: expected a single-bin density grid, got {g.bins} bins")
    return DensityMap(g.data[0].astype(np.float64))


def _write_density(values, path):
    from .events import VoxelGrid
    from .io import write_voxel

    write_voxel(VoxelGrid(np.asarray(values, np.float32)[None]), path)


def _cmd_density(a):
    from .eap import aggregate_target_density, density_map, normalize_density
    from .io import read_voxel, write_pgm

    grids = [read_voxel(p) for p in a.input]
    d = density_map(grids[0]) if len(grids) == 1 else aggregate_target_density(grids)
    if a.normalize:
        d = normalize_density(d, a.normalize)
    _write_density(d.values, a.output)
    if a.pgm:
        write_pgm(d.values, a.pgm)


def _cmd_similarity(a):
    from .eap import similarity_map
    from .events import VoxelGrid
    from .io import write_voxel

    s = similarity_map(_read_density(a.source), _read_density(a.target))
    write_voxel(VoxelGrid(np.stack([s.values, s.defined]).astype(np.float32)), a.output)


def _cmd_blend(a):
    from .blend import blend_labels, blend_voxels
    from .eap import binary_mask, density_map, normalize_density, similarity_map
    from .io import read_labels, read_voxel, write_labels, write_mask, write_voxel

    if bool(a.source_labels) != bool(a.pseudo_labels) or (a.labels_out and not a.source_labels):
        raise UsageError("--source-labels, --pseudo-labels and --labels-out go together")
    vs, vt = read_voxel(a.source), read_voxel(a.target)
    dt = _read_density(a.target_density) if a.target_density else density_map(vt)
    m = binary_mask(
        similarity_map(normalize_density(density_map(vs), a.normalize), normalize_density(dt, a.normalize)), a.tau
    )
    write_voxel(blend_voxels(vs, vt, m), a.output)
    if a.mask_out:
        write_mask(m, a.mask_out)
    if a.source_labels:
        yb = blend_labels(read_labels(a.source_labels), read_labels(a.pseudo_labels), m)
        if a.labels_out:
            write_labels(yb, a.labels_out)


def _cmd_synth(a):
    from .bench.dataset import write_synth_dir

    m = write_synth_dir(a.out, a.platform, a.n, a.seed, a.height, a.width, a.duration, a.seq_len, a.jobs)
    print(json.dumps({"out": str(a.out), "samples": a.n, "sequences": len(m["sequences"])}))


def _cmd_split(a):
    from .bench.dataset import read_manifest, split_sequences
    from .io import atomic_write

    if not 0.0 < a.ratio < 1.0:
        raise UsageError(f"--ratio must be in (0, 1), got {a.ratio}")
    train, val = split_sequences(read_manifest(a.data)["sequences"], a.ratio)
    text = json.dumps({"train": train, "val": val}, indent=1)
    if a.output:
        atomic_write(a.output, text.encode())
    else:
        print(text)


def _train_config(a):
    from .train import TrainConfig

    cfg = TrainConfig.load(a.config)
    over = {k: v for k, v in (("seed", a.seed), ("iterations", a.iterations), ("out_dir", a.out)) if v is not None}
    if a.jobs != 1:
        over["jobs"] = a.jobs
    return TrainConfig.from_dict({**cfg.to_dict(), **over}) if over else cfg


def _cmd_train(a):
    from .train import run_adaptation

    result = run_adaptation(_train_config(a), progress_every=100)
    print(json.dumps(result, indent=2, sort_keys=True))


def _load_labels_any(path):
    from .bench.labels import map_label_array
    from .io import read_labels

    y = read_labels(path)
    return map_label_array(y.data) if y.num_classes == 19 else y.data


def _cmd_eval(a):
    from .bench.labels import CLASSES_11
    from .bench.metrics import ConfusionMatrix, metrics, metrics_csv, metrics_json
    from .io import atomic_write

    if a.checkpoint:
        result = _eval_checkpoint(a)
    else:
        if not a.pred or not a.gt:
            raise UsageError("eval needs --pred and --gt, or --checkpoint and --data")
        if len(a.pred) != len(a.gt):
            raise UsageError(f"{len(a.pred)} prediction files but {len(a.gt)} ground-truth files")
        cm = ConfusionMatrix.zeros(len(CLASSES_11))
        for p, g in zip(a.pred, a.gt):
            cm.update(_load_labels_any(p), _load_labels_any(g))
        result = metrics(cm)
    print(f"Acc {result['acc'] * 100:.2f}  mAcc {result['macc'] * 100:.2f}  mIoU {result['miou'] * 100:.2f}  fIoU {result['fiou'] * 100:.2f}")
    if a.json:
        atomic_write(a.json, metrics_json(result, a.method).encode())
    if a.csv:
        atomic_write(a.csv, metrics_csv([(a.method or "model", result)], CLASSES_11).encode())


def _eval_checkpoint(a):
    from .bench.dataset import load_sample_set, read_manifest, split_sequences
    from .net import SegNet, config_digest, load_block, load_checkpoint
    from .train import TrainConfig, evaluate

    if not a.data:
        raise UsageError("--checkpoint needs --data")
    cfg_path = Path(a.config) if a.config else Path(a.checkpoint).parent / "config.json"
    cfg = TrainConfig.load(cfg_path)
    digest, tensors = load_checkpoint(a.checkpoint)
    if digest != config_digest(cfg.to_dict()):
        raise ConfigError(f"{cfg_path} does not match the config stored in {a.checkpoint}")
    net = SegNet(cfg.bins, cfg.num_classes, cfg.feat_channels, cfg.widths, cfg.patch)
    load_block(net, tensors, a.net or cfg.eval_with)
    _, val = split_sequences(read_manifest(a.data)["sequences"], cfg.val_ratio)
    samples = load_sample_set(a.data, val, cfg.bins, cfg.duration, jobs=a.jobs)
    return evaluate(net, samples, cfg.num_classes, cfg.eval_batch)


def _cmd_stats(a):
    from .bench.dataset import read_manifest
    from .bench.labels import CLASSES_11, CLASSES_19, map_label_array
    from .bench.stats import activation_stats, export_stats
    from .events import voxelize
    from .io import read_events, read_labels

    ids = [i for seq in read_manifest(a.data)["sequences"] for i in seq]
    if a.limit:
        ids = ids[: a.limit]
    root = Path(a.data)
    grids, labels = [], []
    for i in ids:
        grids.append(voxelize(read_events(root / f"{i}.evt"), a.bins, a.duration).data)
        y = read_labels(root / f"{i}.lbl").data
        labels.append(map_label_array(y) if a.classes == 11 else y)
    names = CLASSES_11 if a.classes == 11 else CLASSES_19
    stats = activation_stats(grids, labels, len(names))
    for p in export_stats(stats, a.out, names):
        print(p)


COMMANDS = {
    "voxelize": _cmd_voxelize,
    "density": _cmd_density,
    "similarity": _cmd_similarity,
    "blend": _cmd_blend,
    "synth": _cmd_synth,
    "split": _cmd_split,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "stats": _cmd_stats,
}


def _setup_logging() -> None:
    level = os.environ.get("EVENTFLY_LOG", "warn").lower()
    logging.basicConfig(
        level=LOG_LEVELS.get(level, logging.WARNING), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    if level not in LOG_LEVELS:
        log.warning("EVENTFLY_LOG=%s not understood; using warn", level)
    logging.captureWarnings(True)


def run(args: argparse.Namespace) -> int:
    if args.print_config:
        settings = {k: v for k, v in vars(args).items() if k != "print_config"}
        if args.command == "train":
            settings["effective"] = _train_config(args).to_dict()
        print(json.dumps(settings, indent=2, sort_keys=True))
        return 0
    COMMANDS[args.command](args)
    return 0


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    try:
        return run(args)
    except UsageError as exc:
        print(f"eventfly {args.command}: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"eventfly {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"eventfly {args.command}: {exc}", file=sys.stderr)
        return 1
    except (EventFlyError, OSError, ValueError) as exc:
        print(f"eventfly {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
