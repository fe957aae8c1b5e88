"""Command-line entry point: ``hdseg <subcommand> [--config PATH] [--set k=v] [--out DIR]``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import fileio, metrics
from .errors import HDSegError, InvalidConfig
from .phantom import generate_corpus
from .pipeline import FoldResult, normalize_slide, prepare_slides, run_cross_validation, segment_probability
from .stain import estimate_stain_profile
from .tiling import sample_training_tiles
from .training import train_fold
from .types import make_fold_plan

logger = logging.getLogger("hdseg")


def _slides_and_config(args):
    cfg = fileio.load_run_config(args.config, args.set)
    return cfg, fileio.read_slides(args.data)


def _reference_profile(args, cfg, slides):
    if not cfg.normalize:
        return None
    if getattr(args, "reference", None):
        return fileio.read_profile(args.reference)
    by_id = {s.slide_id: s for s in slides}
    ref_id = getattr(args, "reference_slide", None) or slides[0].slide_id
    if ref_id not in by_id:
        raise InvalidConfig(f"reference slide {ref_id!r} not in data set")
    return estimate_stain_profile(by_id[ref_id].image, cfg.macenko(), cfg.nonneg_concentrations)


def _prepare(args, cfg, slides):
    reference = _reference_profile(args, cfg, slides)
    prepared = prepare_slides(slides, cfg.pipeline(), reference, cfg.macenko(),
                              cfg.nonneg_concentrations)
    return prepared, reference


def cmd_synth(args) -> str:
    cfg = fileio.load_run_config(args.config, args.set)
    slides = generate_corpus(cfg.n_slides, cfg.phantom(), cfg.phantom_seed)
    fileio.write_slides(args.out, slides)
    fileio.atomic_write(Path(args.out) / "run.cfg", cfg.to_text())
    return f"synth: wrote {len(slides)} phantoms to {args.out}"


def cmd_normalize(args) -> str:
    cfg, slides = _slides_and_config(args)
    reference = _reference_profile(args, cfg, slides) or estimate_stain_profile(
        slides[0].image, cfg.macenko(), cfg.nonneg_concentrations)
    out = Path(args.out)
    fileio.write_profile(out / "reference.stain", reference)
    normed = [normalize_slide(s, reference, cfg.macenko(), cfg.nonneg_concentrations) for s in slides]
    fileio.write_slides(out, normed)
    return f"normalize: {len(normed)} slides to {out} (reference profile {out / 'reference.stain'})"


def cmd_tile(args) -> str:
    cfg, slides = _slides_and_config(args)
    prepared, _ = _prepare(args, cfg, slides)
    out = Path(args.out)
    count = 0
    for s in prepared:
        for t in sample_training_tiles(s, cfg.pipeline(), cfg.seed):
            r, c = t.origin
            # repeated draws of the same origin overwrite identical files
            fileio.write_image(out / f"{s.slide_id}_{r}_{c}.ppm", t.pixels)
            fileio.write_mask(out / f"{s.slide_id}_{r}_{c}.pgm", t.label)
            count += 1
    return f"tile: cut {count} training tiles from {len(prepared)} slides into {out}"


def _write_log(path, history):
    fileio.write_csv(path, ("epoch", "mean_loss", "lr"),
                     [(e, float(l), f"{lr:.6e}") for e, l, lr in history])


def cmd_train(args) -> str:
    cfg, slides = _slides_and_config(args)
    prepared, _ = _prepare(args, cfg, slides)
    if args.slides:
        keep = set(args.slides.split(","))
        prepared = [s for s in prepared if s.slide_id in keep]
    history = []
    params = train_fold(prepared, cfg.train(), cfg.pipeline(),
                        callback=lambda e, l, lr: history.append((e, l, lr)))
    out = Path(args.out)
    fileio.save_checkpoint(out / "model.ckpt", params, cfg.pipeline())
    _write_log(out / "train_log.csv", history)
    return f"train: {len(prepared)} slides, final loss {history[-1][1]:.4f}, checkpoint {out / 'model.ckpt'}"


def cmd_segment(args) -> str:
    cfg, slides = _slides_and_config(args)
    params, ckpt_cfg = fileio.load_checkpoint(args.checkpoint)
    # model geometry comes from the checkpoint, the threshold from the run config
    pipe = replace(ckpt_cfg, confidence_threshold=cfg.confidence_threshold)
    threshold = args.threshold if args.threshold is not None else pipe.confidence_threshold
    prepared, _ = _prepare(args, cfg, slides)
    out = Path(args.out)
    for s in prepared:
        prob = segment_probability(params, s.image, pipe)
        fileio.write_probability(out / f"{s.slide_id}_prob.pgm", prob)
        fileio.write_mask(out / f"{s.slide_id}_mask.pgm", prob >= threshold)
    return f"segment: {len(prepared)} slides at threshold {threshold:g} into {out}"


def cmd_evaluate(args) -> str:
    cfg, slides = _slides_and_config(args)
    prepared, _ = _prepare(args, cfg, slides)
    pred = Path(args.pred)
    reports = [
        metrics.evaluate_mask(s.slide_id, fileio.read_mask(pred / f"{s.slide_id}_mask.pgm"),
                              s.muscularis_gt, s.plexus_gt, cfg.inclusion_fraction)
        for s in prepared
    ]
    fileio.write_csv(Path(args.out) / "metrics.csv", fileio.REPORT_HEADER, fileio.report_rows(reports))
    s = metrics.summarize(reports)
    return f"evaluate: {len(reports)} slides, mean DICE {s['dice']:.2f}%, mean PIR {s['pir']:.2f}%"


def cmd_sweep(args) -> str:
    cfg, slides = _slides_and_config(args)
    prepared, _ = _prepare(args, cfg, slides)
    pred = Path(args.pred)
    probs = [fileio.read_probability(pred / f"{s.slide_id}_prob.pgm") for s in prepared]
    points = metrics.threshold_sweep(
        probs, [s.muscularis_gt for s in prepared], [s.plexus_gt for s in prepared],
        cfg.sweep_thresholds, cfg.inclusion_fraction, [s.slide_id for s in prepared])
    fileio.write_csv(Path(args.out) / "sweep.csv", fileio.SWEEP_HEADER, fileio.sweep_rows(points))
    best = max(points, key=lambda p: p.mean_dice)
    return f"sweep: {len(points)} thresholds, best mean DICE {best.mean_dice:.2f}% at {best.threshold:g}"


def cmd_crossval(args) -> str:
    cfg = fileio.load_run_config(args.config, args.set)
    if args.data:
        slides = fileio.read_slides(args.data)
    else:
        slides = generate_corpus(cfg.n_slides, cfg.phantom(), cfg.phantom_seed)
    prepared, reference = _prepare(args, cfg, slides)
    plan = make_fold_plan(prepared, cfg.n_folds, cfg.fold_seed)
    out = Path(args.out)
    fileio.atomic_write(out / "run.cfg", cfg.to_text())
    fileio.write_csv(out / "folds.csv", ("slide_id", "fold"), plan.assignments)
    if reference is not None:
        fileio.write_profile(out / "reference.stain", reference)

    def save_fold(f: FoldResult):
        fileio.save_checkpoint(out / f"fold_{f.fold}.ckpt", f.params, cfg.pipeline())
        _write_log(out / f"train_log_fold_{f.fold}.csv", f.history)
        if args.save_maps:
            for s, p in zip(f.test_slides, f.prob_maps):
                fileio.write_probability(out / "maps" / f"{s.slide_id}_prob.pgm", p)

    result = run_cross_validation(prepared, plan, cfg.pipeline(), cfg.train(), cfg.sweep_thresholds,
                                  cfg.inclusion_fraction, on_fold=save_fold)
    fileio.write_csv(out / "metrics.csv", fileio.REPORT_HEADER,
                     fileio.report_rows(result.reports, result.fold_of))
    fileio.write_csv(out / "sweep.csv", fileio.SWEEP_HEADER, fileio.sweep_rows(result.sweep))
    s = metrics.summarize(result.reports)
    return (f"crossval: {len(result.reports)} slides, {plan.n_folds} folds, threshold "
            f"{result.threshold:g}: mean DICE {s['dice']:.2f}%, mean PIR {s['pir']:.2f}%")


def cmd_baseline(args) -> str:
    rows = metrics.baseline_table()
    lines = [f"{'model':<8} {'DICE':>6} {'Prec':>6} {'Recall':>6} {'PIR':>6}"]
    for r in rows:
        lines.append(f"{r['model']:<8} {r['dice']:>6.1f} {r['precision']:>6.1f} "
                     f"{r['recall']:>6.1f} {r['pir']:>6.1f}")
    print("\n".join(lines))
    return f"baseline: {len(rows)} reference rows"


COMMANDS = {
    "synth": (cmd_synth, "generate a phantom slide corpus"),
    "normalize": (cmd_normalize, "Macenko-normalize slides to a reference profile"),
    "tile": (cmd_tile, "cut training tiles into a PPM/PGM cache"),
    "train": (cmd_train, "train one model on a slide set"),
    "segment": (cmd_segment, "write probability maps and masks for slides"),
    "evaluate": (cmd_evaluate, "score predicted masks against ground truth"),
    "sweep": (cmd_sweep, "score stored probability maps over a threshold grid"),
    "crossval": (cmd_crossval, "k-fold train/segment/evaluate on phantoms or a data dir"),
    "baseline": (cmd_baseline, "print the published comparison table"),
}

_NEEDS_DATA = {"normalize", "tile", "train", "segment", "evaluate", "sweep"}
_NEEDS_OUT = {"synth", "normalize", "tile", "train", "segment", "evaluate", "sweep", "crossval"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        if name == "baseline":
            continue
        p.add_argument("--config", type=Path, help="flat key = value run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out", type=Path, required=name in _NEEDS_OUT)
        p.add_argument("--data", type=Path, required=name in _NEEDS_DATA,
                       help="slide directory written by 'synth'")
        if name in _NEEDS_DATA - {"normalize"} or name == "crossval":
            p.add_argument("--reference", type=Path, help="stain profile file to normalize against")
        if name in {"normalize", "tile", "train", "segment", "evaluate", "sweep", "crossval"}:
            p.add_argument("--reference-slide", help="slide id whose stains define the reference")
        if name == "train":
            p.add_argument("--slides", help="comma-separated slide ids to train on")
        if name == "segment":
            p.add_argument("--checkpoint", type=Path, required=True)
            p.add_argument("--threshold", type=float)
        if name in {"evaluate", "sweep"}:
            p.add_argument("--pred", type=Path, required=True, help="directory written by 'segment'")
        if name == "crossval":
            p.add_argument("--save-maps", action="store_true", help="also write probability maps")
    return parser


def _threads() -> int | None:
    raw = os.environ.get("HDMS_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise InvalidConfig(f"HDMS_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    for line in getattr(args, "set", []):
        if "=" not in line:
            parser.print_usage(sys.stderr)
            print(f"hdseg: error: --set expects KEY=VALUE, got {line!r}", file=sys.stderr)
            return 2
    try:
        with threadpool_limits(limits=_threads()):
            summary = handler(args)
    except HDSegError as exc:
        print(f"hdseg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
