"""Command-line entry point wiring every pipeline stage together.

Subcommands map one-to-one onto the library modules: ``synth`` builds a
chip suite from generated scenes, ``label`` forges a soft label mask,
``tile`` cuts an image/label pair into training chips, ``train`` fits a
network, ``infer`` classifies a raster, ``eval`` scores masks, ``widths``
measures a river, and ``serve`` starts the labeling HTTP service.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every
subcommand is deterministic for a fixed argv and ``--seed``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .chips import (MIN_WATER_FRAC, TILE_SIZE, load_records, pan_label_transfer,
                    split_dataset, tile_image, write_records)
from .errors import RiversegError
from .infer import binarize, infer_full, postprocess, soft_sigmoid
from .labels import (WATER_CUTOFF, ForgeParams, LabelMask, ThresholdTriple,
                     forge_labels, load_centerline, load_exclusions)
from .metrics import confusion, metrics_csv
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.models import ModelSpec
from .nn.train import AugmentConfig, TrainConfig, history_csv, train
from .raster import BandKind, Raster, load_raster, parse_sidecar, save_raster
from .synth import SUITE_THRESHOLDS, SceneConfig, gen_suite
from .widths import resample_centerline, widths_along_centerline, widths_csv

__all__ = ["build_parser", "run", "main"]

log = logging.getLogger("riverseg")

#: architecture shorthand -> (family, per-stage block counts)
ARCHES = {
    "u18": ("unet", (2, 2, 2, 2)),
    "u34": ("unet", (3, 4, 6, 3)),
    "l18": ("linknet", (2, 2, 2, 2)),
    "l34": ("linknet", (3, 4, 6, 3)),
    "dwm": ("dwm", (2, 2, 2, 2)),
}


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    """Attach the global flags.

    On subparsers the defaults are suppressed so a value given before the
    subcommand (``riverseg --seed 7 synth``) is not clobbered by the
    subparser's own default.
    """
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int,
                   default=d if suppress else 0,
                   help="seed for every stochastic stage (default 0)")
    p.add_argument("--threads", type=int,
                   default=d if suppress else 1,
                   help="upper bound on worker threads (default 1; stages "
                        "currently run sequentially, satisfying any cap)")
    p.add_argument("--verbose", "-v", action="count",
                   default=d if suppress else 0,
                   help="increase log detail (-v info, -vv debug)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="riverseg",
        description="River segmentation toolkit: synthetic scenes, NDWI label "
                    "forging, chip building, FCN training, tiled inference, "
                    "evaluation, width measurement, and a labeling service.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate synthetic scenes and forge a chip suite")
    p.add_argument("-n", "--count", type=int, required=True, metavar="N",
                   help="number of scenes to generate")
    p.add_argument("-o", "--out", required=True, metavar="DIR",
                   help="output directory for chips.rsch and manifest.csv")
    p.add_argument("--kind", choices=("ms", "pan"), default="ms",
                   help="chip source: multispectral or panchromatic (default ms)")
    p.add_argument("--tile", type=int, default=256,
                   help="chip edge length in pixels (default 256)")
    p.add_argument("--height", type=int, default=512, help="scene height (default 512)")
    p.add_argument("--width", type=int, default=512, help="scene width (default 512)")
    p.add_argument("--th1", type=float, default=SUITE_THRESHOLDS.th1,
                   help=f"lowest NDWI cut (default {SUITE_THRESHOLDS.th1})")
    p.add_argument("--th2", type=float, default=SUITE_THRESHOLDS.th2,
                   help=f"middle NDWI cut (default {SUITE_THRESHOLDS.th2})")
    p.add_argument("--th3", type=float, default=SUITE_THRESHOLDS.th3,
                   help=f"highest NDWI cut (default {SUITE_THRESHOLDS.th3})")
    p.add_argument("--min-water-frac", type=float, default=0.02,
                   help="discard chips with less water than this fraction (default 0.02)")
    _add_globals(p, suppress=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("label", help="forge a soft water-label mask from a raster")
    p.add_argument("input", metavar="IN.rsrf", help="multispectral input raster")
    p.add_argument("-o", "--out", metavar="OUT.rsrf",
                   help="label output path (default IN.labels.rsrf)")
    p.add_argument("--th1", type=float, default=0.3, help="lowest NDWI cut (default 0.3)")
    p.add_argument("--th2", type=float, default=0.5, help="middle NDWI cut (default 0.5)")
    p.add_argument("--th3", type=float, default=0.7, help="highest NDWI cut (default 0.7)")
    p.add_argument("--top-band-water", action=argparse.BooleanOptionalAction,
                   default=True,
                   help="treat the highest-index band as definite water")
    p.add_argument("--sigma", type=float, default=4.0,
                   help="blur sigma for the component-bridging mask (default 4.0)")
    p.add_argument("--centerline", metavar="PATH",
                   help="seed centerline text file (one 'x y' pair per line)")
    p.add_argument("--exclusions", metavar="PATH",
                   help="exclusion polygons text file (one polygon per line)")
    p.add_argument("--sidecar", metavar="PATH",
                   help="gain/offset sidecar applied before normalization")
    p.add_argument("--open-radius", type=int, default=1,
                   help="morphological opening radius (default 1)")
    p.add_argument("--close-radius", type=int, default=1,
                   help="morphological closing radius (default 1)")
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8,
                   help="component connectivity (default 8)")
    _add_globals(p, suppress=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("tile", help="cut an image/label pair into training chips")
    p.add_argument("--image", required=True, metavar="IN.rsrf",
                   help="source raster (multispectral unless --pan is given)")
    p.add_argument("--labels", required=True, metavar="LBL.rsrf",
                   help="label mask raster")
    p.add_argument("--pan", metavar="PAN.rsrf",
                   help="panchromatic raster; chips come from it resampled "
                        "onto the label grid")
    p.add_argument("-o", "--out", required=True, metavar="DIR",
                   help="output directory")
    p.add_argument("--tile", type=int, default=TILE_SIZE,
                   help=f"chip edge length (default {TILE_SIZE})")
    p.add_argument("--min-water-frac", type=float, default=MIN_WATER_FRAC,
                   help=f"minimum water fraction per chip (default {MIN_WATER_FRAC})")
    p.add_argument("--split", type=float, metavar="RATIO",
                   help="write train.rsch/val.rsch split by source at this "
                        "train ratio instead of a single chips.rsch")
    p.add_argument("--source-id", metavar="NAME",
                   help="source image id stored in the chips (default: image stem)")
    _add_globals(p, suppress=True)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("train", help="fit a segmentation network on chips")
    p.add_argument("chips", metavar="CHIPS.rsch", help="training chip records")
    p.add_argument("--arch", choices=sorted(ARCHES), required=True,
                   help="architecture shorthand")
    p.add_argument("--bands", type=int, choices=(1, 4, 8), default=4,
                   help="input band count (default 4)")
    p.add_argument("--batch", type=int, default=24, help="batch size (default 24)")
    p.add_argument("--epochs", type=int, default=100, help="epoch count (default 100)")
    p.add_argument("--lr", type=float, default=1e-3,
                   help="base learning rate (default 1e-3)")
    p.add_argument("--base-width", type=int, default=16,
                   help="channel width of the first stage (default 16)")
    p.add_argument("--patience", type=int, default=10,
                   help="early-stop patience in epochs (default 10)")
    p.add_argument("--lr-decay", type=float, default=1.0,
                   help="per-epoch learning-rate factor (default 1.0)")
    p.add_argument("--crop", type=int, default=512,
                   help="training crop size (default 512)")
    p.add_argument("--eval-crop", type=int,
                   help="center-crop size for validation metrics (default full chips)")
    p.add_argument("--val", metavar="VAL.rsch", help="validation chip records")
    p.add_argument("-o", "--out", default="model.rswt", metavar="OUT.rswt",
                   help="checkpoint path (default model.rswt)")
    p.add_argument("--history", metavar="OUT.csv",
                   help="training-curve CSV path (default OUT.history.csv)")
    _add_globals(p, suppress=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="classify a raster with a trained model")
    p.add_argument("model", metavar="MODEL.rswt", help="checkpoint to load")
    p.add_argument("input", metavar="IN.rsrf", help="raster to classify")
    p.add_argument("-o", "--out", metavar="OUT.rsrf",
                   help="binary mask output (default IN.mask.rsrf)")
    p.add_argument("--prob", metavar="PROB.rsrf",
                   help="also save the soft-thresholded probability raster")
    p.add_argument("--core", type=int, default=1024,
                   help="tile core size in pixels (default 1024)")
    p.add_argument("--halo", type=int,
                   help="tile overlap in pixels (default: receptive-field radius)")
    p.add_argument("--cut", type=float, default=0.5,
                   help="hard threshold on the soft probability (default 0.5)")
    p.add_argument("--keep-largest", action="store_true",
                   help="keep only the largest connected component")
    p.add_argument("--min-area", type=int, metavar="N",
                   help="drop connected components smaller than N pixels")
    _add_globals(p, suppress=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted masks against truth masks")
    p.add_argument("rasters", nargs="+", metavar="PRED.rsrf TRUTH.rsrf",
                   help="alternating predicted/truth raster pairs")
    p.add_argument("-o", "--out", metavar="OUT.csv",
                   help="metrics CSV path (default: stdout)")
    _add_globals(p, suppress=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("widths", help="measure river widths along a centerline")
    p.add_argument("mask", metavar="MASK.rsrf", help="binary water mask raster")
    p.add_argument("centerline", metavar="LINE.txt",
                   help="centerline text file (one 'x y' pair per line)")
    p.add_argument("-o", "--out", metavar="OUT.csv",
                   help="width CSV path (default: stdout)")
    p.add_argument("--spacing", type=float, default=100.0,
                   help="centerline resampling interval in meters (default 100)")
    p.add_argument("--max-search", type=float, default=500.0,
                   help="per-direction transect search limit in meters (default 500)")
    _add_globals(p, suppress=True)
    p.set_defaults(func=cmd_widths)

    p = sub.add_parser("serve", help="start the interactive labeling service")
    p.add_argument("data", metavar="DIR", help="directory of .rsrf images to label")
    p.add_argument("--addr", default="127.0.0.1",
                   help="bind address (default 127.0.0.1)")
    p.add_argument("--port", type=int, default=8000, help="port (default 8000)")
    _add_globals(p, suppress=True)
    p.set_defaults(func=cmd_serve)

    return parser


def cmd_synth(args) -> int:
    cfg = SceneConfig(height=args.height, width=args.width)
    thresholds = ThresholdTriple(args.th1, args.th2, args.th3)
    records, manifest = gen_suite(args.count, cfg, args.seed, kind=args.kind,
                                  tile=args.tile, thresholds=thresholds,
                                  min_water_frac=args.min_water_frac)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_records(records, out / "chips.rsch")
    (out / "manifest.csv").write_text(manifest.to_csv())
    print(f"wrote {len(records)} chips from {args.count} scenes to {out}")
    return 0


def cmd_label(args) -> int:
    r = load_raster(args.input)
    t = ThresholdTriple(args.th1, args.th2, args.th3, args.top_band_water)
    centerline = load_centerline(args.centerline) if args.centerline else None
    exclusions = tuple(load_exclusions(args.exclusions)) if args.exclusions else ()
    gains = offsets = None
    if args.sidecar:
        gains, offsets = parse_sidecar(args.sidecar, r.band_count)
    params = ForgeParams(blur_sigma=args.sigma, open_radius=args.open_radius,
                         close_radius=args.close_radius,
                         connectivity=args.connectivity,
                         gains=gains, offsets=offsets, exclusions=exclusions)
    mask = forge_labels(r, t, centerline, params)
    out = Path(args.out) if args.out else Path(args.input).with_suffix(".labels.rsrf")
    save_raster(mask.to_raster(), out)
    water = int(np.count_nonzero(mask.values >= WATER_CUTOFF))
    print(f"wrote {out} ({water} of {mask.values.size} pixels water)")
    return 0


def cmd_tile(args) -> int:
    image = load_raster(args.image)
    labels = LabelMask.from_raster(load_raster(args.labels))
    if args.pan:
        image, labels = pan_label_transfer(load_raster(args.pan), labels, image.geo)
    source_id = args.source_id or Path(args.image).stem
    records = tile_image(image, labels, tile=args.tile,
                         min_water_frac=args.min_water_frac, source_id=source_id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.split is None:
        write_records(records, out / "chips.rsch")
        print(f"wrote {len(records)} chips to {out / 'chips.rsch'}")
    else:
        manifest = split_dataset(records, args.split, args.seed)
        train_recs, val_recs = manifest.partition(records)
        write_records(train_recs, out / "train.rsch")
        write_records(val_recs, out / "val.rsch")
        (out / "split.json").write_text(manifest.to_json())
        print(f"wrote {len(train_recs)} train / {len(val_recs)} val chips to {out}")
    return 0


def cmd_train(args) -> int:
    records = load_records(args.chips)
    val = load_records(args.val) if args.val else ()
    family, blocks = ARCHES[args.arch]
    spec = ModelSpec(family, blocks, base_width=args.base_width,
                     in_bands=args.bands)
    cfg = TrainConfig(batch=args.batch, epochs=args.epochs, base_lr=args.lr,
                      seed=args.seed, patience=args.patience,
                      lr_decay=args.lr_decay, eval_crop=args.eval_crop,
                      augment=AugmentConfig(crop=args.crop, seed=args.seed))
    model, history = train(spec, records, cfg, val_records=val)
    save_checkpoint(model, args.out)
    hist_path = Path(args.history) if args.history \
        else Path(args.out).with_suffix(".history.csv")
    hist_path.write_text(history_csv(history))
    best = max(history.val_f1) if history.val_f1 else float("nan")
    print(f"wrote {args.out} after {history.epochs_completed} epochs "
          f"(best val F1 {best:.3f})")
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.model)
    r = load_raster(args.input)
    prob = infer_full(model, r, core=args.core, halo=args.halo)
    soft = soft_sigmoid(prob.data[0])
    if args.prob:
        meta = dict(prob.meta)
        meta["soft_sigmoid"] = "applied"
        save_raster(Raster(soft[None], (BandKind.Probability,), prob.geo, meta),
                    args.prob)
    mask = binarize(soft, args.cut)
    if args.keep_largest:
        mask = postprocess(mask, "largest")
    elif args.min_area is not None:
        mask = postprocess(mask, "min_area", min_area=args.min_area)
    out = Path(args.out) if args.out else Path(args.input).with_suffix(".mask.rsrf")
    meta = dict(prob.meta)
    meta["cut"] = repr(args.cut)
    save_raster(Raster(mask.astype(np.uint8)[None] * 255, (BandKind.Label,),
                       r.geo, meta), out)
    print(f"wrote {out} ({int(mask.sum())} water pixels)")
    return 0


def cmd_eval(args) -> int:
    if len(args.rasters) % 2:
        print("riverseg eval: rasters must form PRED TRUTH pairs", file=sys.stderr)
        return 2
    per_image = []
    for pred_path, truth_path in zip(args.rasters[::2], args.rasters[1::2]):
        pred = load_raster(pred_path).data[0] != 0
        truth = load_raster(truth_path).data[0] != 0
        per_image.append((Path(pred_path).stem, confusion(pred, truth)))
    text = metrics_csv(per_image)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


def cmd_widths(args) -> int:
    mask_r = load_raster(args.mask)
    line = resample_centerline(load_centerline(args.centerline),
                               spacing=args.spacing)
    series = widths_along_centerline(mask_r.data[0] != 0, mask_r.geo, line,
                                     max_search=args.max_search)
    text = widths_csv(series)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out} ({int(series.valid.sum())} valid of "
              f"{len(series)} vertices)")
    else:
        print(text, end="")
    return 0


def cmd_serve(args) -> int:
    from .server import serve  # deferred: pulls in the web stack

    serve(args.data, addr=args.addr, port=args.port)
    return 0


def run(argv=None) -> int:
    """Parse and execute one invocation; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors, 0 on --help
        return int(e.code or 0)
    if args.threads < 1:
        print("riverseg: error: --threads must be >= 1", file=sys.stderr)
        return 2
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (RiversegError, OSError) as e:
        log.debug("failure detail", exc_info=True)
        print(f"riverseg: error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
