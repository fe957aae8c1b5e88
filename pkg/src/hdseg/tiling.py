"""Downsampling, training-tile sampling, inference grids and center-crop stitching."""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CountMismatch, InvalidConfig, InvalidStride
from .types import PipelineConfig, SlideRecord


def downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Block-average downsampling; output size is ``ceil(dim / factor)``.

    uint8 rasters take the round-half-up block mean, partial edge blocks
    averaging only the pixels they hold. Boolean masks take a majority vote
    with ties resolved to set.
    """
    if factor < 1:
        raise InvalidConfig("downsample factor must be >= 1")
    arr = np.asarray(image)
    if factor == 1:
        return arr.copy()
    h, w = arr.shape[:2]
    oh, ow = -(-h // factor), -(-w // factor)
    rows = np.arange(0, h, factor)
    cols = np.arange(0, w, factor)
    data = arr.astype(np.int64)
    sums = np.add.reduceat(np.add.reduceat(data, rows, axis=0), cols, axis=1)
    rh = np.minimum(factor, h - rows)
    cw = np.minimum(factor, w - cols)
    counts = np.outer(rh, cw).reshape((oh, ow) + (1,) * (arr.ndim - 2))
    if arr.dtype == bool:
        return 2 * sums >= counts
    # integer round-half-up of sums / counts
    return ((2 * sums + counts) // (2 * counts)).astype(arr.dtype)


@dataclass(frozen=True)
class Tile:
    origin: tuple[int, int]
    pixels: np.ndarray
    label: np.ndarray | None = None


def _slide_seed(seed: int, slide_id: str) -> int:
    return (int(seed) ^ zlib.crc32(slide_id.encode("utf-8"))) & 0xFFFFFFFFFFFFFFFF


def _pad_to(arr: np.ndarray, size: int) -> np.ndarray:
    ph, pw = max(0, size - arr.shape[0]), max(0, size - arr.shape[1])
    if ph == 0 and pw == 0:
        return arr
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, pad, mode="reflect" if min(arr.shape[:2]) > 1 else "edge")


def sample_training_tiles(slide: SlideRecord, config: PipelineConfig, seed: int) -> list[Tile]:
    """Draw ``config.tiles_per_slide`` uniformly placed tiles with label crops.

    Slides smaller than a tile are reflect-padded at the bottom/right first.
    The draw is deterministic per ``(seed, slide_id)``.
    """
    t = config.tile_size
    image = _pad_to(slide.image, t)
    label = _pad_to(slide.muscularis_gt, t)
    rng = np.random.default_rng(_slide_seed(seed, slide.slide_id))
    h, w = image.shape[:2]
    rows = rng.integers(0, h - t + 1, size=config.tiles_per_slide)
    cols = rng.integers(0, w - t + 1, size=config.tiles_per_slide)
    return [
        Tile((int(r), int(c)), image[r:r + t, c:c + t].copy(), label[r:r + t, c:c + t].copy())
        for r, c in zip(rows, cols)
    ]


@dataclass(frozen=True)
class TileGrid:
    """Overlapping tile origins over a reflect-padded slide.

    ``pad`` pixels are added on the top and left; the bottom and right get
    ``pad`` plus whatever is needed to fit at least one tile.
    """

    slide_dims: tuple[int, int]
    tile_size: int
    stride: int
    pad: int
    padded_dims: tuple[int, int]
    row_origins: tuple[int, ...]
    col_origins: tuple[int, ...]
    slide_id: str = ""

    @property
    def origins(self) -> list[tuple[int, int]]:
        return [(r, c) for r in self.row_origins for c in self.col_origins]

    def __len__(self) -> int:
        return len(self.row_origins) * len(self.col_origins)

    def pad_image(self, arr: np.ndarray) -> np.ndarray:
        h, w = self.slide_dims
        ph, pw = self.padded_dims
        pad = [(self.pad, ph - h - self.pad), (self.pad, pw - w - self.pad)] + [(0, 0)] * (arr.ndim - 2)
        mode = "reflect" if min(arr.shape[:2]) > 1 else "edge"
        return np.pad(arr, pad, mode=mode)

    def cut(self, arr: np.ndarray) -> np.ndarray:
        """Stack of all tiles cut from ``arr`` (unpadded slide frame), grid order."""
        padded = self.pad_image(np.asarray(arr))
        t = self.tile_size
        return np.stack([padded[r:r + t, c:c + t] for r, c in self.origins])


def _axis_origins(padded: int, tile: int, stride: int) -> tuple[int, ...]:
    origins = list(range(0, padded - tile + 1, stride))
    if origins[-1] + tile < padded:
        origins.append(padded - tile)
    return tuple(origins)


def inference_grid(slide_dims: tuple[int, int], config: PipelineConfig | None = None, *,
                   tile_size: int | None = None, stride: int | None = None,
                   slide_id: str = "") -> TileGrid:
    tile_size = tile_size if tile_size is not None else config.tile_size
    stride = stride if stride is not None else config.stride
    if tile_size != 2 * stride or stride % 2:
        raise InvalidStride(f"tile_size {tile_size} must equal 2 * stride {stride} (even stride)")
    h, w = (int(d) for d in slide_dims)
    pad = stride // 2
    ph, pw = max(h + stride, tile_size), max(w + stride, tile_size)
    return TileGrid(
        slide_dims=(h, w),
        tile_size=tile_size,
        stride=stride,
        pad=pad,
        padded_dims=(ph, pw),
        row_origins=_axis_origins(ph, tile_size, stride),
        col_origins=_axis_origins(pw, tile_size, stride),
        slide_id=slide_id,
    )


def stitch(grid: TileGrid, tile_maps, slide_dims: tuple[int, int] | None = None) -> np.ndarray:
    """Assemble per-tile maps into a slide map from each tile's center window.

    Works for any per-pixel payload (boolean masks, probabilities). Where
    clamped tiles' centers overlap, later tiles in grid order win.
    """
    maps = np.asarray(tile_maps)
    if len(maps) != len(grid):
        raise CountMismatch(f"{len(maps)} tile maps for a grid of {len(grid)} tiles")
    h, w = slide_dims if slide_dims is not None else grid.slide_dims
    s, p = grid.stride, grid.pad
    out = np.zeros((h, w) + maps.shape[3:], dtype=maps.dtype)
    for m, (r, c) in zip(maps, grid.origins):
        # center window [p, p + s) of the tile sits at unpadded (r, c)
        rr, cc = min(s, h - r), min(s, w - c)
        if rr > 0 and cc > 0:
            out[r:r + rr, c:c + cc] = m[p:p + rr, p:p + cc]
    return out
