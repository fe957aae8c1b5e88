"""AdamW, cosine-with-warmup schedule, tile augmentation and the per-fold training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import vit
from .errors import EmptyTrainingSet, InvalidConfig, ShapeMismatch
from .tiling import Tile, sample_training_tiles
from .types import PipelineConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentFlags:
    rot90s: bool = True
    flips: bool = True
    scale_range: tuple[float, float] | None = (0.8, 1.25)
    arbitrary_rotation: bool = False

    @classmethod
    def none(cls) -> "AugmentFlags":
        return cls(rot90s=False, flips=False, scale_range=None)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 5e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    warmup_epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    augment: AugmentFlags = field(default_factory=AugmentFlags)

    def __post_init__(self):
        if not self.base_lr > 0:
            raise InvalidConfig("base_lr must be > 0")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise InvalidConfig("need 0 <= warmup_epochs < epochs")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")


@dataclass
class OptimizerState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, params) -> "OptimizerState":
        return cls(0, vit.zeros_like_params(params), vit.zeros_like_params(params))


def lr_at(step: int, steps_per_epoch: int, config: TrainConfig) -> float:
    """Learning rate for the 0-based optimizer ``step``.

    Linear warmup reaches ``base_lr`` on the last warmup step, then a
    half-cosine decays to exactly 0 on the final step.
    """
    if steps_per_epoch < 1:
        raise InvalidConfig("steps_per_epoch must be >= 1")
    warmup = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if step < warmup:
        return config.base_lr * (step + 1) / warmup
    decay_steps = total - warmup
    if decay_steps <= 1:
        return 0.0
    t = min((step - warmup) / (decay_steps - 1), 1.0)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def adamw_step(params, grads, state: OptimizerState, lr: float, config: TrainConfig):
    """One decoupled-weight-decay Adam update; returns new ``(params, state)``."""
    if set(params) != set(grads):
        raise ShapeMismatch("params and grads hold different tensors")
    step = state.step + 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {theta.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        if config.weight_decay and vit.is_decayed(name):
            update = update + config.weight_decay * theta
        new_p[name] = (theta - lr * update).astype(theta.dtype, copy=False)
        new_m[name], new_v[name] = m.astype(theta.dtype, copy=False), v.astype(theta.dtype, copy=False)
    return new_p, OptimizerState(step, new_m, new_v)


def _mirror(idx: np.ndarray, n: int) -> np.ndarray:
    # reflect about the edge pixel centers, like numpy's "reflect" padding
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx > n - 1, period - idx, idx)


def warp_batch(pixels: np.ndarray, labels: np.ndarray | None, scales, angles):
    """Scale/rotate square tiles about their centers, keeping their size.

    Output pixel ``o`` samples the input at ``R(angle)^-1 (o - c) / scale + c``
    with bilinear interpolation for pixels and nearest neighbour for labels;
    out-of-tile samples are mirrored back inside.
    """
    b, t = pixels.shape[:2]
    scales = np.asarray(scales, dtype=np.float64).reshape(b, 1, 1)
    angles = np.asarray(angles, dtype=np.float64).reshape(b, 1, 1)
    c = (t - 1) / 2.0
    oy, ox = np.mgrid[0:t, 0:t].astype(np.float64) - c
    ca, sa = np.cos(angles), np.sin(angles)
    sy = (ca * oy + sa * ox) / scales + c
    sx = (-sa * oy + ca * ox) / scales + c
    base = (np.arange(b) * (t * t)).reshape(b, 1, 1)

    y0, x0 = np.floor(sy), np.floor(sx)
    fy, fx = (sy - y0).astype(np.float32)[..., None], (sx - x0).astype(np.float32)[..., None]
    y0, x0 = y0.astype(np.intp), x0.astype(np.intp)
    ya, yb = _mirror(y0, t) * t + base, _mirror(y0 + 1, t) * t + base
    xa, xb = _mirror(x0, t), _mirror(x0 + 1, t)
    src = pixels.reshape(b * t * t, -1).astype(np.float32)
    top = src[ya + xa] * (1 - fx) + src[ya + xb] * fx
    bottom = src[yb + xa] * (1 - fx) + src[yb + xb] * fx
    out = top * (1 - fy) + bottom * fy
    out = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8).reshape(pixels.shape)
    out_lab = None
    if labels is not None:
        ny = _mirror(np.floor(sy + 0.5).astype(np.intp), t)
        nx = _mirror(np.floor(sx + 0.5).astype(np.intp), t)
        out_lab = labels.reshape(-1)[ny * t + nx + base]
    return out, out_lab


def apply_geometry(pixels: np.ndarray, label: np.ndarray | None, rot90: int = 0,
                   flip_h: bool = False, flip_v: bool = False, scale: float = 1.0,
                   angle: float = 0.0):
    """Apply a fixed geometric transform to an image tile and its label alike."""
    img = pixels
    lab = label
    if scale != 1.0 or angle != 0.0:
        img, lab = warp_batch(img[None], None if lab is None else lab[None], [scale], [angle])
        img, lab = img[0], None if lab is None else lab[0]
    return _orient(img, lab, rot90, flip_h, flip_v)


def _orient(img, lab, rot90, flip_h, flip_v):
    if rot90 % 4:
        img = np.rot90(img, rot90, axes=(0, 1))
        lab = None if lab is None else np.rot90(lab, rot90, axes=(0, 1))
    if flip_h:
        img = img[:, ::-1]
        lab = None if lab is None else lab[:, ::-1]
    if flip_v:
        img = img[::-1]
        lab = None if lab is None else lab[::-1]
    return np.ascontiguousarray(img), None if lab is None else np.ascontiguousarray(lab)


def _draw(flags: AugmentFlags, rng: np.random.Generator) -> dict:
    # fixed draw order, independent of which augmentations are enabled
    k = int(rng.integers(4))
    fh = bool(rng.random() < 0.5)
    fv = bool(rng.random() < 0.5)
    u = float(rng.random())
    angle = float(rng.uniform(-math.pi, math.pi))
    scale = 1.0
    if flags.scale_range is not None:
        lo, hi = flags.scale_range
        scale = lo + (hi - lo) * u
    return dict(
        rot90=k if flags.rot90s else 0,
        flip_h=fh and flags.flips,
        flip_v=fv and flags.flips,
        scale=scale,
        angle=angle if flags.arbitrary_rotation else 0.0,
    )


def augment_tile(tile: Tile, flags: AugmentFlags, rng: np.random.Generator) -> Tile:
    """Random right-angle rotation, h/v flips and isotropic scaling of a tile.

    The label receives exactly the same geometry (nearest-neighbour resampled).
    """
    pixels, label = apply_geometry(tile.pixels, tile.label, **_draw(flags, rng))
    return Tile(tile.origin, pixels, label)


def build_tile_pool(slides, pipeline: PipelineConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for slide in slides:
        for t in sample_training_tiles(slide, pipeline, seed):
            images.append(t.pixels)
            labels.append(t.label)
    if not images:
        raise EmptyTrainingSet("no training tiles")
    return np.stack(images), np.stack(labels)


def train_fold(train_slides, config: TrainConfig, pipeline: PipelineConfig,
               init=None, callback=None):
    """Train a ViT on tiles sampled once from ``train_slides``; return its parameters.

    ``callback(epoch, mean_loss, lr)`` is invoked after every epoch; the lr
    reported is that of the epoch's last step.
    """
    train_slides = list(train_slides)
    if not train_slides:
        raise EmptyTrainingSet("train_fold needs at least one slide")
    pool_x, pool_y = build_tile_pool(train_slides, pipeline, config.seed)
    params = init if init is not None else vit.init_params(pipeline, config.seed)
    vit.check_params(params, pipeline)
    state = OptimizerState.zeros(params)
    rng = np.random.default_rng(config.seed)
    n = len(pool_x)
    steps_per_epoch = -(-n // config.batch_size)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = augment_batch(pool_x[idx], pool_y[idx], config.augment, rng)
            loss, grads = vit.backward(params, xb, yb, pipeline.heads)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {step}")
            lr = lr_at(step, steps_per_epoch, config)
            params, state = adamw_step(params, grads, state, lr, config)
            losses.append(loss * len(idx))
            step += 1
        mean_loss = float(np.sum(losses) / n)
        logger.info("epoch %d loss %.5f lr %.3g", epoch, mean_loss, lr)
        if callback is not None:
            callback(epoch, mean_loss, lr)
    return params


def augment_batch(xb, yb, flags: AugmentFlags, rng):
    """Batch form of :func:`augment_tile`; consumes ``rng`` identically."""
    if flags == AugmentFlags.none():
        return xb, yb
    draws = [_draw(flags, rng) for _ in range(len(xb))]
    scales = [d["scale"] for d in draws]
    angles = [d["angle"] for d in draws]
    if any(s != 1.0 for s in scales) or any(a != 0.0 for a in angles):
        xb, yb = warp_batch(xb, yb, scales, angles)
    out = [_orient(x, y, d["rot90"], d["flip_h"], d["flip_v"]) for x, y, d in zip(xb, yb, draws)]
    return np.stack([o[0] for o in out]), np.stack([o[1] for o in out])
