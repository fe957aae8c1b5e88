"""Muscularis and myenteric-plexus segmentation for stained gut sections."""
from .errors import HDSegError
from .estimators import MacenkoNormalizer, ViTSegmenter
from .metrics import dice, evaluate_mask, pir, threshold_sweep
from .phantom import PhantomConfig, generate_corpus, generate_phantom
from .pipeline import prepare_slides, run_cross_validation, segment_probability
from .stain import MacenkoParams, StainProfile, estimate_stain_profile, normalize_to_reference
from .tiling import inference_grid, sample_training_tiles, stitch
from .training import AugmentFlags, TrainConfig, train_fold
from .types import FoldPlan, PipelineConfig, SlideRecord, make_fold_plan, validate_slide

__version__ = "0.1.0"

__all__ = [
    "AugmentFlags", "FoldPlan", "HDSegError", "MacenkoNormalizer", "MacenkoParams",
    "PhantomConfig", "PipelineConfig", "SlideRecord", "StainProfile", "TrainConfig",
    "ViTSegmenter", "dice", "estimate_stain_profile", "evaluate_mask", "generate_corpus",
    "generate_phantom", "inference_grid", "make_fold_plan", "normalize_to_reference", "pir",
    "prepare_slides", "run_cross_validation", "sample_training_tiles", "segment_probability",
    "stitch", "threshold_sweep", "train_fold", "validate_slide",
]
