"""scikit-learn compatible wrappers around the stain normalizer and the ViT segmenter."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import metrics, pipeline, vit
from .stain import MacenkoParams, estimate_stain_profile, normalize_to_reference
from .training import AugmentFlags, TrainConfig, train_fold
from .types import PipelineConfig, SlideRecord, check_image, check_mask


def _as_list(X):
    if isinstance(X, np.ndarray) and X.ndim == 3:
        return [X]
    return list(X)


class MacenkoNormalizer(TransformerMixin, BaseEstimator):
    """Map slides onto the stain appearance of a reference image.

    ``fit`` takes the reference image (or a list whose first item is used);
    ``transform`` re-estimates each input's own stains and re-renders it.
    """

    def __init__(self, io_white=255.0, beta_od_floor=0.15, alpha_percentile=1.0,
                 concentration_percentile=99.0, nonneg=True):
        self.io_white = io_white
        self.beta_od_floor = beta_od_floor
        self.alpha_percentile = alpha_percentile
        self.concentration_percentile = concentration_percentile
        self.nonneg = nonneg

    def _params(self) -> MacenkoParams:
        return MacenkoParams(self.io_white, self.beta_od_floor, self.alpha_percentile,
                             self.concentration_percentile)

    def fit(self, X, y=None):
        reference = check_image(_as_list(X)[0], channels=3)
        self.reference_profile_ = estimate_stain_profile(reference, self._params(), self.nonneg)
        return self

    def transform(self, X):
        check_is_fitted(self, "reference_profile_")
        single = isinstance(X, np.ndarray) and X.ndim == 3
        params = self._params()
        out = []
        for img in _as_list(X):
            img = check_image(img, channels=3)
            source = estimate_stain_profile(img, params, self.nonneg)
            out.append(normalize_to_reference(img, source, self.reference_profile_, params,
                                              self.nonneg))
        return out[0] if single else out


class ViTSegmenter(BaseEstimator):
    """Tile-based ViT muscularis segmenter.

    ``X`` is a list of prepared RGB slides (uint8, ``(H, W, 3)``) and ``y``
    the matching boolean muscularis masks. Predictions are stitched from
    the center windows of overlapping tiles.
    """

    def __init__(self, tile_size=64, patch_size=8, embed_dim=64, depth=4, heads=4,
                 tiles_per_slide=200, threshold=0.01, base_lr=5e-4, weight_decay=1e-4,
                 epochs=15, warmup_epochs=2, batch_size=32, augment=True, random_state=0):
        self.tile_size = tile_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.depth = depth
        self.heads = heads
        self.tiles_per_slide = tiles_per_slide
        self.threshold = threshold
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.batch_size = batch_size
        self.augment = augment
        self.random_state = random_state

    def _pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            tile_size=self.tile_size, stride=self.tile_size // 2, patch_size=self.patch_size,
            embed_dim=self.embed_dim, depth=self.depth, heads=self.heads,
            tiles_per_slide=self.tiles_per_slide, confidence_threshold=self.threshold,
        )

    def fit(self, X, y):
        images, labels = _as_list(X), _as_list(y)
        if len(images) != len(labels):
            raise ValueError("X and y hold different numbers of slides")
        images = [check_image(img, channels=3) for img in images]
        masks = [check_mask(m, img.shape[:2]) for img, m in zip(images, labels)]
        slides = [
            SlideRecord(f"slide_{i:03d}", f"slide_{i:03d}", img, 1.0, m, np.zeros_like(m))
            for i, (img, m) in enumerate(zip(images, masks))
        ]
        config = TrainConfig(
            base_lr=self.base_lr, weight_decay=self.weight_decay, epochs=self.epochs,
            warmup_epochs=self.warmup_epochs, batch_size=self.batch_size, seed=self.random_state,
            augment=AugmentFlags() if self.augment else AugmentFlags.none(),
        )
        self.history_ = []
        self.params_ = train_fold(slides, config, self._pipeline(),
                                  callback=lambda e, l, lr: self.history_.append((e, l, lr)))
        return self

    def predict_proba(self, X):
        """Muscularis probability maps, one ``(H, W)`` float array per slide."""
        check_is_fitted(self, "params_")
        cfg = self._pipeline()
        single = isinstance(X, np.ndarray) and X.ndim == 3
        out = [pipeline.segment_probability(self.params_, check_image(img, channels=3), cfg)
               for img in _as_list(X)]
        return out[0] if single else out

    def predict(self, X):
        proba = self.predict_proba(X)
        if isinstance(proba, np.ndarray):
            return proba >= self.threshold
        return [p >= self.threshold for p in proba]

    def score(self, X, y):
        """Mean per-slide DICE (percent) at the configured threshold."""
        preds = self.predict(_as_list(X))
        return float(np.mean([metrics.dice(p, m) for p, m in zip(preds, _as_list(y))]))

    def set_fitted_params(self, params) -> "ViTSegmenter":
        """Attach externally produced weights (e.g. a loaded checkpoint)."""
        vit.check_params(params, self._pipeline())
        self.params_ = params
        self.history_ = []
        return self
