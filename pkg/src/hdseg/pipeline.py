"""End-to-end glue: slide preparation, tiled inference and k-fold cross-validation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import vit
from .errors import DegenerateStains, NoTissue
from .fileio import dequantize_probability, quantize_probability
from .metrics import MetricReport, SweepPoint, evaluate_mask, threshold_sweep
from .stain import MacenkoParams, StainProfile, estimate_stain_profile, normalize_to_reference
from .tiling import downsample, inference_grid, stitch
from .training import TrainConfig, train_fold
from .types import FoldPlan, PipelineConfig, SlideRecord, validate_slide

logger = logging.getLogger(__name__)


def normalize_slide(slide: SlideRecord, reference: StainProfile,
                    params: MacenkoParams = MacenkoParams(), nonneg: bool = True) -> SlideRecord:
    try:
        source = estimate_stain_profile(slide.image, params, nonneg=nonneg)
    except (NoTissue, DegenerateStains) as exc:
        logger.warning("%s: stain estimation failed (%s); left unnormalized", slide.slide_id, exc)
        return slide
    return slide.with_image(normalize_to_reference(slide.image, source, reference, params, nonneg))


def downsample_slide(slide: SlideRecord, factor: int) -> SlideRecord:
    if factor == 1:
        return slide
    return replace(
        slide,
        image=downsample(slide.image, factor),
        microns_per_pixel=slide.microns_per_pixel * factor,
        muscularis_gt=downsample(slide.muscularis_gt, factor),
        plexus_gt=downsample(slide.plexus_gt, factor),
    )


def prepare_slides(slides, pipeline: PipelineConfig, reference: StainProfile | None = None,
                   macenko: MacenkoParams = MacenkoParams(), nonneg: bool = True) -> list[SlideRecord]:
    """Validate, stain-normalize at native resolution, then downsample."""
    out = []
    for s in slides:
        validate_slide(s)
        if reference is not None:
            s = normalize_slide(s, reference, macenko, nonneg)
        out.append(validate_slide(downsample_slide(s, pipeline.downsample_factor)))
    return out


def segment_probability(params, image: np.ndarray, pipeline: PipelineConfig,
                        batch_size: int = 64) -> np.ndarray:
    """Stitched muscularis probability for a whole (prepared) slide.

    The result is already quantized to the 16-bit grid used on disk, so
    thresholding it in memory and thresholding a saved map agree exactly.
    """
    grid = inference_grid(image.shape[:2], pipeline)
    tiles = grid.cut(image)
    probs = np.empty(tiles.shape[:3], dtype=np.float64)
    for start in range(0, len(tiles), batch_size):
        logits = vit.forward(params, tiles[start:start + batch_size], pipeline.heads)
        probs[start:start + batch_size] = vit.muscularis_probability(logits)
    return dequantize_probability(quantize_probability(stitch(grid, probs)))


@dataclass
class FoldResult:
    fold: int
    params: dict
    reports: list[MetricReport]
    prob_maps: list[np.ndarray]
    test_slides: list[SlideRecord]
    history: list[tuple[int, float, float]] = field(default_factory=list)


@dataclass
class CrossValidationResult:
    folds: list[FoldResult]
    sweep: list[SweepPoint]
    threshold: float

    @property
    def reports(self) -> list[MetricReport]:
        return [r for f in self.folds for r in f.reports]

    @property
    def fold_of(self) -> list[int]:
        return [f.fold for f in self.folds for _ in f.reports]


def run_cross_validation(slides, fold_plan: FoldPlan, pipeline: PipelineConfig,
                         train: TrainConfig, thresholds, inclusion_fraction: float = 1.0,
                         on_fold=None) -> CrossValidationResult:
    """Rotate the test fold, train on the rest and evaluate every held-out slide.

    ``slides`` must already be prepared (normalized and downsampled).
    ``on_fold(fold_result)`` is called as each fold finishes.
    """
    slides = list(slides)
    by_id = {s.slide_id: s for s in slides}
    fold_plan.check_covers(by_id)
    folds = []
    for k in range(fold_plan.n_folds):
        train_set = [by_id[i] for i in fold_plan.train_ids(k)]
        test_set = [by_id[i] for i in fold_plan.test_ids(k)]
        history = []
        params = train_fold(train_set, replace(train, seed=train.seed + k), pipeline,
                            callback=lambda e, l, lr: history.append((e, l, lr)))
        probs = [segment_probability(params, s.image, pipeline) for s in test_set]
        reports = [
            evaluate_mask(s.slide_id, p >= pipeline.confidence_threshold, s.muscularis_gt,
                          s.plexus_gt, inclusion_fraction)
            for s, p in zip(test_set, probs)
        ]
        result = FoldResult(k, params, reports, probs, test_set, history)
        folds.append(result)
        if on_fold is not None:
            on_fold(result)
    all_probs = [p for f in folds for p in f.prob_maps]
    all_slides = [s for f in folds for s in f.test_slides]
    sweep = threshold_sweep(
        all_probs, [s.muscularis_gt for s in all_slides], [s.plexus_gt for s in all_slides],
        thresholds, inclusion_fraction, [s.slide_id for s in all_slides],
    )
    return CrossValidationResult(folds, sweep, pipeline.confidence_threshold)
