"""Synthetic slide phantoms: a curved muscularis band holding elliptical plexus blobs."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline

from .errors import InvalidConfig, PlacementFailure
from .types import SlideRecord

MAX_ATTEMPTS = 1000


@dataclass(frozen=True)
class PhantomConfig:
    width: int = 256
    height: int = 256
    n_plexus: int = 4
    band_thickness_range: tuple[int, int] = (60, 90)
    blob_radius_range: tuple[int, int] = (4, 9)
    background_rgb: tuple[int, int, int] = (236, 228, 220)
    muscularis_rgb: tuple[int, int, int] = (168, 118, 88)
    plexus_rgb: tuple[int, int, int] = (112, 66, 52)
    noise_std: float = 8.0
    microns_per_pixel: float = 5.0
    seed: int = 0

    def __post_init__(self):
        lo_t, hi_t = self.band_thickness_range
        lo_r, hi_r = self.blob_radius_range
        if self.width < 8 or self.height < 8:
            raise InvalidConfig("phantoms must be at least 8x8")
        if self.n_plexus < 0:
            raise InvalidConfig("n_plexus must be >= 0")
        if not 0 < lo_t <= hi_t or not 0 < lo_r <= hi_r:
            raise InvalidConfig("ranges must be positive and ordered")
        if 2 * hi_r + 2 >= lo_t:
            raise InvalidConfig("blob diameter must fit strictly inside the thinnest band")
        if hi_t >= min(self.width, self.height):
            raise InvalidConfig("band is thicker than the image")
        if self.noise_std < 0:
            raise InvalidConfig("noise_std must be >= 0")


def _band(cfg: PhantomConfig, rng: np.random.Generator):
    """Band mask and signed offset of each pixel from the band's medial curve."""
    h, w = cfg.height, cfg.width
    vertical = bool(rng.random() < 0.5)
    along, across = (h, w) if vertical else (w, h)
    thickness = float(rng.uniform(*cfg.band_thickness_range))
    margin = thickness / 2 + 4
    knots = np.linspace(0, along - 1, 5)
    lo, hi = margin, across - 1 - margin
    centre = CubicSpline(knots, rng.uniform(lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo), 5),
                         bc_type="natural")
    yy, xx = np.mgrid[0:h, 0:w]
    u, v = (yy, xx) if vertical else (xx, yy)
    c = centre(np.arange(along))
    slope = centre(np.arange(along), 1)
    # perpendicular distance to the curve, first-order in its slope
    offset = (v - c[u]) / np.sqrt(1.0 + slope[u] ** 2)
    return np.abs(offset) <= thickness / 2, offset, thickness


def _ellipse(shape, cy, cx, ry, rx, theta):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    dy, dx = yy - cy, xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    a = (dx * ct + dy * st) / rx
    b = (-dx * st + dy * ct) / ry
    return a * a + b * b <= 1.0


def generate_phantom(config: PhantomConfig, slide_id: str = "phantom_000",
                     patient_id: str = "patient_000") -> SlideRecord:
    """Render one phantom with exact ground-truth masks, deterministic per seed."""
    rng = np.random.default_rng(config.seed)
    h, w = config.height, config.width
    band, offset, thickness = _band(config, rng)

    plexus = np.zeros((h, w), dtype=bool)
    blocked = np.zeros((h, w), dtype=bool)
    medial = np.abs(offset) <= thickness / 2 - config.blob_radius_range[1] - 1
    candidates = np.argwhere(medial)
    placed, attempts = 0, 0
    while placed < config.n_plexus:
        if attempts >= MAX_ATTEMPTS or len(candidates) == 0:
            raise PlacementFailure(
                f"placed {placed} of {config.n_plexus} plexus blobs in {attempts} attempts")
        attempts += 1
        cy, cx = candidates[rng.integers(len(candidates))]
        ry, rx = rng.uniform(*config.blob_radius_range, size=2)
        blob = _ellipse((h, w), cy, cx, ry, rx, rng.uniform(0, np.pi))
        if not blob.any() or (blob & ~band).any() or (blob & blocked).any():
            continue
        plexus |= blob
        blocked |= ndimage.binary_dilation(blob, structure=np.ones((3, 3), bool), iterations=2)
        placed += 1

    image = np.empty((h, w, 3), dtype=np.float64)
    image[:] = config.background_rgb
    image[band] = config.muscularis_rgb
    image[plexus] = config.plexus_rgb
    image += rng.normal(0.0, config.noise_std, size=image.shape)
    image = np.clip(np.floor(image + 0.5), 0, 255).astype(np.uint8)
    return SlideRecord(slide_id, patient_id, image, config.microns_per_pixel, band, plexus)


def generate_corpus(n_slides: int, base_config: PhantomConfig = PhantomConfig(),
                    seed: int = 0) -> list[SlideRecord]:
    """``n_slides`` phantoms with derived seeds; every fourth slide repeats a patient."""
    if n_slides < 1:
        raise InvalidConfig("n_slides must be >= 1")
    seeds = np.random.SeedSequence(seed).generate_state(n_slides)
    slides = []
    patient = -1
    for i, s in enumerate(seeds):
        if i % 4 != 3:
            patient += 1
        cfg = replace(base_config, seed=int(s))
        slides.append(generate_phantom(cfg, f"phantom_{i:03d}", f"patient_{patient:03d}"))
    return slides
