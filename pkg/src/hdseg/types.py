"""Shared domain types and their validation.

Rasters are plain numpy arrays: images are ``uint8`` of shape ``(H, W, 3)``
or ``(H, W)``, masks are ``bool`` of shape ``(H, W)``. The helpers
:func:`check_image` and :func:`check_mask` enforce those invariants at module
boundaries, in the spirit of ``sklearn.utils.check_array``.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import (
    DimensionMismatch,
    IndivisibleTile,
    InvalidConfig,
    InvalidStride,
    NonPositiveResolution,
    PlexusOutsideMuscularis,
    TooFewSlides,
)

logger = logging.getLogger(__name__)


def check_image(image, channels: int | None = None) -> np.ndarray:
    """Return ``image`` as a C-contiguous uint8 array, validating its shape."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise DimensionMismatch(f"image must be uint8, got {arr.dtype}")
    if arr.ndim == 2:
        n_ch = 1
    elif arr.ndim == 3 and arr.shape[2] in (1, 3):
        n_ch = arr.shape[2]
    else:
        raise DimensionMismatch(f"image must be (H, W) or (H, W, 1|3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionMismatch("image must be at least 1x1")
    if channels is not None and n_ch != channels:
        raise DimensionMismatch(f"expected {channels} channels, got {n_ch}")
    return np.ascontiguousarray(arr)


def check_mask(mask, shape: tuple[int, int] | None = None) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise DimensionMismatch(f"mask must be 2-D, got shape {arr.shape}")
    if arr.dtype != bool:
        arr = arr.astype(bool)
    if shape is not None and arr.shape != tuple(shape):
        raise DimensionMismatch(f"mask shape {arr.shape} does not match {tuple(shape)}")
    return arr


@dataclass(frozen=True, eq=False)
class SlideRecord:
    """One slide: RGB raster plus muscularis and plexus ground truth."""

    slide_id: str
    patient_id: str
    image: np.ndarray
    microns_per_pixel: float
    muscularis_gt: np.ndarray
    plexus_gt: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def with_image(self, image: np.ndarray) -> "SlideRecord":
        return replace(self, image=image)


def validate_slide(record: SlideRecord) -> SlideRecord:
    """Check every SlideRecord invariant and return the record unchanged."""
    image = check_image(record.image, channels=3)
    hw = image.shape[:2]
    check_mask(record.muscularis_gt, hw)
    check_mask(record.plexus_gt, hw)
    if not record.microns_per_pixel > 0:
        raise NonPositiveResolution(f"microns_per_pixel must be > 0, got {record.microns_per_pixel}")
    outside = np.asarray(record.plexus_gt, bool) & ~np.asarray(record.muscularis_gt, bool)
    if outside.any():
        raise PlexusOutsideMuscularis(
            f"{record.slide_id}: {int(outside.sum())} plexus pixels lie outside the muscularis"
        )
    return record


@dataclass(frozen=True)
class FoldPlan:
    n_folds: int
    assignments: tuple[tuple[str, int], ...]

    def __post_init__(self):
        ids = [s for s, _ in self.assignments]
        if len(set(ids)) != len(ids):
            raise InvalidConfig("every slide must appear exactly once in a fold plan")
        sizes = self.fold_sizes()
        if any(not 0 <= k < self.n_folds for _, k in self.assignments):
            raise InvalidConfig("fold index out of range")
        if max(sizes) - min(sizes) > 1:
            raise InvalidConfig(f"fold sizes are unbalanced: {sizes}")

    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.n_folds
        for _, k in self.assignments:
            sizes[k] += 1
        return sizes

    def test_ids(self, fold: int) -> list[str]:
        return [s for s, k in self.assignments if k == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [s for s, k in self.assignments if k != fold]

    def check_covers(self, slide_ids) -> None:
        if sorted(slide_ids) != sorted(s for s, _ in self.assignments):
            raise InvalidConfig("fold plan does not cover the slide set exactly")


def make_fold_plan(slides, n_folds: int, seed: int) -> FoldPlan:
    """Balanced, seeded k-fold split that keeps same-patient slides together.

    Patient groups are packed largest first into the fold with the most free
    capacity. A group that fits nowhere intact is split across folds, with a
    warning: balance takes priority over grouping.
    """
    slides = list(slides)
    n = len(slides)
    if n_folds < 1:
        raise InvalidConfig("n_folds must be >= 1")
    if n < n_folds:
        raise TooFewSlides(f"{n} slides cannot fill {n_folds} folds")

    capacity = [n // n_folds + (1 if k < n % n_folds else 0) for k in range(n_folds)]
    groups: dict[str, list[str]] = defaultdict(list)
    for s in slides:
        groups[s.patient_id].append(s.slide_id)

    rng = np.random.default_rng(seed)
    keys = sorted(groups)
    order = [keys[i] for i in rng.permutation(len(keys))]
    order.sort(key=lambda p: -len(groups[p]))  # stable: seeded order within equal sizes

    fold_of: dict[str, int] = {}
    for pid in order:
        members = groups[pid]
        fits = [k for k in range(n_folds) if capacity[k] >= len(members)]
        if fits:
            k = max(fits, key=lambda j: (capacity[j], -j))
            for sid in members:
                fold_of[sid] = k
            capacity[k] -= len(members)
        else:
            logger.warning("patient %s split across folds to keep fold sizes balanced", pid)
            for sid in members:
                k = max(range(n_folds), key=lambda j: (capacity[j], -j))
                fold_of[sid] = k
                capacity[k] -= 1

    return FoldPlan(n_folds, tuple((s.slide_id, fold_of[s.slide_id]) for s in slides))


@dataclass(frozen=True)
class PipelineConfig:
    """Geometry and model shape shared by tiling, the ViT and inference.

    Defaults are the desk-scale configuration; :meth:`full_scale` returns the
    published geometry (224 px tiles, 112 px stride, 16 px patches, width 768).
    """

    tile_size: int = 64
    stride: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    downsample_factor: int = 1
    tiles_per_slide: int = 200
    confidence_threshold: float = 0.01

    def __post_init__(self):
        if min(self.tile_size, self.patch_size, self.embed_dim, self.heads,
               self.downsample_factor, self.tiles_per_slide) < 1 or self.depth < 0:
            raise InvalidConfig("pipeline sizes must be positive")
        if self.tile_size % self.patch_size:
            raise IndivisibleTile("tile_size must be divisible by patch_size")
        if self.tile_size != 2 * self.stride:
            raise InvalidStride("stride must be tile_size / 2 for center-crop stitching")
        if self.embed_dim % self.heads:
            raise InvalidConfig("embed_dim must be divisible by heads")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise InvalidConfig("confidence_threshold must lie in [0, 1]")

    @classmethod
    def full_scale(cls, **overrides) -> "PipelineConfig":
        base = dict(tile_size=224, stride=112, patch_size=16, embed_dim=768, depth=12,
                    heads=12, downsample_factor=10, tiles_per_slide=1000,
                    confidence_threshold=0.01)
        base.update(overrides)
        return cls(**base)

    @property
    def n_tokens(self) -> int:
        return (self.tile_size // self.patch_size) ** 2

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


__all__ = [
    "SlideRecord",
    "FoldPlan",
    "PipelineConfig",
    "check_image",
    "check_mask",
    "validate_slide",
    "make_fold_plan",
]
