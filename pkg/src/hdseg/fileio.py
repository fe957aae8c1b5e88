"""On-disk formats: NetPBM rasters, binary checkpoints, flat config files and CSV tables.

Every writer is atomic: bytes go to a temporary file in the target directory
which is then renamed over the destination.
"""
from __future__ import annotations

import csv
import io
import os
import re
import struct
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import vit
from .errors import (
    BadMagic,
    CorruptDirectory,
    DimensionOverflow,
    InvalidConfig,
    ShapeMismatch,
    TruncatedFile,
    UnsupportedFormat,
    VersionMismatch,
)
from .phantom import PhantomConfig
from .stain import MacenkoParams, StainProfile
from .training import AugmentFlags, TrainConfig
from .types import PipelineConfig, SlideRecord

MAX_PIXELS = 2 ** 31


def atomic_write(path, data: bytes | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


# --------------------------------------------------------------------------- NetPBM

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_header(buf: bytes):
    if len(buf) < 2:
        raise TruncatedFile("file too short for a NetPBM header")
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormat(f"unsupported NetPBM magic {magic!r}; only binary P5/P6")
    pos = 2
    values = []
    for _ in range(3):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise TruncatedFile("incomplete NetPBM header")
        try:
            values.append(int(m.group(1)))
        except ValueError:
            raise UnsupportedFormat(f"bad header token {m.group(1)!r}") from None
        pos = m.end()
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise TruncatedFile("missing whitespace after maxval")
    width, height, maxval = values
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise UnsupportedFormat(f"bad NetPBM dimensions {width}x{height} maxval {maxval}")
    if width * height > MAX_PIXELS:
        raise DimensionOverflow(f"{width}x{height} exceeds {MAX_PIXELS} pixels")
    return magic, width, height, maxval, pos + 1


def decode_netpbm(buf: bytes) -> np.ndarray:
    """Binary PGM/PPM bytes -> uint8 or big-endian-decoded uint16 array."""
    magic, width, height, maxval, start = _parse_header(buf)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    n = width * height * channels
    payload = buf[start:start + n * dtype.itemsize]
    if len(payload) < n * dtype.itemsize:
        raise TruncatedFile(f"expected {n * dtype.itemsize} payload bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("="))
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape)


def encode_netpbm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise UnsupportedFormat(f"cannot encode array of shape {arr.shape}")
    if arr.dtype == np.uint8:
        maxval, payload = 255, arr.tobytes()
    elif arr.dtype == np.uint16:
        maxval, payload = 65535, arr.astype(">u2").tobytes()
    else:
        raise UnsupportedFormat(f"cannot encode dtype {arr.dtype}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n{maxval}\n".encode("ascii") + payload


def read_image(path) -> np.ndarray:
    return decode_netpbm(Path(path).read_bytes())


def write_image(path, image: np.ndarray) -> Path:
    return atomic_write(path, encode_netpbm(image))


def read_mask(path) -> np.ndarray:
    arr = read_image(path)
    if arr.ndim != 2:
        raise UnsupportedFormat("masks must be single-channel PGM")
    cut = 128 if arr.dtype == np.uint8 else 32768
    return arr >= cut


def write_mask(path, mask: np.ndarray) -> Path:
    return write_image(path, np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8))


def quantize_probability(prob: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(prob, 0.0, 1.0) * 65535 + 0.5).astype(np.uint16)


def dequantize_probability(q: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) / 65535.0


def write_probability(path, prob: np.ndarray) -> Path:
    """Probability map as 16-bit PGM; ``prob`` may already be quantized uint16."""
    q = prob if np.asarray(prob).dtype == np.uint16 else quantize_probability(prob)
    return write_image(path, q)


def read_probability(path) -> np.ndarray:
    arr = read_image(path)
    if arr.dtype != np.uint16 or arr.ndim != 2:
        raise UnsupportedFormat("probability maps must be 16-bit single-channel PGM")
    return dequantize_probability(arr)


# --------------------------------------------------------------------------- checkpoints

MAGIC = b"HDMS"
FORMAT_VERSION = 1
_CONFIG_KEYS = ("tile_size", "stride", "patch_size", "embed_dim", "depth", "heads",
                "downsample_factor", "tiles_per_slide", "confidence_threshold")


def save_checkpoint(path, params: dict, config: PipelineConfig) -> Path:
    """Layout (little-endian): magic, u32 version, u32 config length, config
    text, u32 tensor count, directory entries, float32 payload.

    Each directory entry is ``u16 name length, name, u32 rank, u32 dims...,
    u64 absolute byte offset``.
    """
    vit.check_params(params, config)
    cfg_text = "".join(f"{k} = {getattr(config, k)!r}\n" for k in _CONFIG_KEYS).encode()
    names = list(vit.param_shapes(config))
    head = io.BytesIO()
    head.write(MAGIC)
    head.write(struct.pack("<II", FORMAT_VERSION, len(cfg_text)))
    head.write(cfg_text)
    head.write(struct.pack("<I", len(names)))
    dir_size = sum(2 + len(n.encode()) + 4 + 4 * params[n].ndim + 8 for n in names)
    offset = head.tell() + dir_size
    payload = io.BytesIO()
    for n in names:
        arr = np.ascontiguousarray(params[n], dtype="<f4")
        enc = n.encode()
        head.write(struct.pack("<H", len(enc)) + enc)
        head.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        head.write(struct.pack("<Q", offset + payload.tell()))
        payload.write(arr.tobytes())
    return atomic_write(path, head.getvalue() + payload.getvalue())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CorruptDirectory("checkpoint header is truncated")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptDirectory("checkpoint header is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def _parse_checkpoint_config(text: str) -> PipelineConfig:
    values = {}
    for line in text.splitlines():
        if line.strip():
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    types = {f.name: f.type for f in fields(PipelineConfig)}
    try:
        kwargs = {k: (float(v) if "float" in str(types[k]) else int(v)) for k, v in values.items()}
        return PipelineConfig(**kwargs)
    except (KeyError, ValueError, TypeError) as exc:
        raise CorruptDirectory(f"bad config block: {exc}") from None


def load_checkpoint(path) -> tuple[dict, PipelineConfig]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise BadMagic(f"{path}: magic {buf[:4]!r} is not {MAGIC!r}")
    r = _Reader(buf)
    r.pos = 4
    version, cfg_len = r.take("<II")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    config = _parse_checkpoint_config(r.raw(cfg_len).decode("utf-8", errors="replace"))
    (count,) = r.take("<I")
    entries = []
    for _ in range(count):
        (nlen,) = r.take("<H")
        name = r.raw(nlen).decode("utf-8", errors="replace")
        (rank,) = r.take("<I")
        dims = r.take(f"<{rank}I") if rank else ()
        (offset,) = r.take("<Q")
        entries.append((name, tuple(dims), offset))
    last_end = r.pos
    params = {}
    for name, dims, offset in entries:
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if offset < last_end or offset + nbytes > len(buf):
            raise CorruptDirectory(f"tensor {name!r} at offset {offset} overruns or overlaps")
        if name in params:
            raise CorruptDirectory(f"tensor {name!r} appears twice")
        params[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=offset) \
            .reshape(dims).astype(np.float32)
        last_end = offset + nbytes
    try:
        vit.check_params(params, config)
    except ShapeMismatch as exc:
        raise CorruptDirectory(f"tensors do not match the embedded config: {exc}") from None
    return params, config


# --------------------------------------------------------------------------- run config


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a run as one flat record (``key = value`` on disk)."""

    # pipeline geometry / model shape
    tile_size: int = 64
    stride: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    downsample_factor: int = 1
    tiles_per_slide: int = 200
    confidence_threshold: float = 0.01
    # training
    base_lr: float = 5e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 15
    warmup_epochs: int = 2
    batch_size: int = 32
    seed: int = 0
    augment_rot90s: bool = True
    augment_flips: bool = True
    augment_scale_range: tuple[float, float] = (0.8, 1.25)
    augment_arbitrary_rotation: bool = False
    # stain normalization
    normalize: bool = True
    io_white: float = 255.0
    beta_od_floor: float = 0.15
    alpha_percentile: float = 1.0
    concentration_percentile: float = 99.0
    nonneg_concentrations: bool = True
    # phantoms
    n_slides: int = 12
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
    phantom_seed: int = 0
    # cross-validation / evaluation
    n_folds: int = 3
    fold_seed: int = 0
    inclusion_fraction: float = 1.0
    sweep_thresholds: tuple[float, ...] = (0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7,
                                           0.8, 0.9, 0.95, 0.99)

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(**{f.name: getattr(self, f.name) for f in fields(PipelineConfig)})

    def train(self) -> TrainConfig:
        scale = tuple(self.augment_scale_range)
        return TrainConfig(
            base_lr=self.base_lr, weight_decay=self.weight_decay, beta1=self.beta1,
            beta2=self.beta2, eps=self.eps, epochs=self.epochs,
            warmup_epochs=self.warmup_epochs, batch_size=self.batch_size, seed=self.seed,
            augment=AugmentFlags(
                rot90s=self.augment_rot90s, flips=self.augment_flips,
                scale_range=None if scale == (1.0, 1.0) else scale,
                arbitrary_rotation=self.augment_arbitrary_rotation,
            ),
        )

    def macenko(self) -> MacenkoParams:
        return MacenkoParams(self.io_white, self.beta_od_floor, self.alpha_percentile,
                             self.concentration_percentile)

    def phantom(self) -> PhantomConfig:
        names = [f.name for f in fields(PhantomConfig) if f.name != "seed"]
        return PhantomConfig(seed=self.phantom_seed, **{n: getattr(self, n) for n in names})

    def validate(self) -> "RunConfig":
        self.pipeline(), self.train(), self.macenko(), self.phantom()
        if self.n_slides < 1 or self.n_folds < 1:
            raise InvalidConfig("n_slides and n_folds must be >= 1")
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ", ".join(repr(v) for v in val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{f.name} = {val}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, annotation: str, raw: str):
    raw = raw.strip()
    try:
        if annotation == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if annotation == "int":
            return int(raw)
        if annotation == "float":
            return float(raw)
        if annotation.startswith("tuple"):
            cast = int if "int" in annotation else float
            return tuple(cast(tok) for tok in raw.replace(",", " ").split())
    except ValueError:
        raise InvalidConfig(f"{name}: cannot parse {raw!r} as {annotation}") from None
    raise InvalidConfig(f"{name}: unsupported type {annotation}")


def parse_assignments(lines, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key = value`` lines (``#`` comments allowed) onto ``base``."""
    known = {f.name: str(f.type) for f in fields(RunConfig)}
    updates = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise InvalidConfig(f"line {lineno}: expected 'key = value', got {line!r}")
        if key not in known:
            raise InvalidConfig(f"line {lineno}: unknown key {key!r}")
        updates[key] = _coerce(key, known[key], value)
    cfg = base or RunConfig()
    return RunConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, **updates}).validate()


def load_run_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = parse_assignments(Path(path).read_text().splitlines(), cfg)
    return parse_assignments(list(overrides), cfg)


# --------------------------------------------------------------------------- tables and slides


def format_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([f"{v:.4f}" if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> Path:
    return atomic_write(path, format_csv(header, rows))


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


REPORT_HEADER = ("slide_id", "fold", "dice", "precision", "recall", "pir", "tp", "fp", "fn",
                 "tn", "n_gt_regions", "n_included", "degenerate")
SWEEP_HEADER = ("threshold", "mean_dice", "mean_pir", "mean_precision", "mean_recall",
                "pooled_dice")


def report_rows(reports, folds=None):
    folds = folds or [""] * len(reports)
    for r, k in zip(reports, folds):
        c = r.counts
        yield (r.slide_id, k, r.dice, r.precision, r.recall, r.pir, c.tp, c.fp, c.fn, c.tn,
               r.n_gt_regions, r.n_included, int(r.degenerate))


def sweep_rows(points):
    for p in points:
        yield (p.threshold, p.mean_dice, p.mean_pir, p.mean_precision, p.mean_recall,
               p.pooled_dice)


def write_slides(directory, slides) -> None:
    """Slide set as ``{id}.ppm``, ``{id}_muscularis.pgm``, ``{id}_plexus.pgm`` plus slides.csv."""
    directory = Path(directory)
    rows = []
    for s in slides:
        write_image(directory / f"{s.slide_id}.ppm", s.image)
        write_mask(directory / f"{s.slide_id}_muscularis.pgm", s.muscularis_gt)
        write_mask(directory / f"{s.slide_id}_plexus.pgm", s.plexus_gt)
        rows.append((s.slide_id, s.patient_id, repr(float(s.microns_per_pixel))))
    write_csv(directory / "slides.csv", ("slide_id", "patient_id", "microns_per_pixel"), rows)


def read_slides(directory) -> list[SlideRecord]:
    directory = Path(directory)
    slides = []
    for row in read_csv(directory / "slides.csv"):
        sid = row["slide_id"]
        slides.append(SlideRecord(
            slide_id=sid,
            patient_id=row["patient_id"],
            image=read_image(directory / f"{sid}.ppm"),
            microns_per_pixel=float(row["microns_per_pixel"]),
            muscularis_gt=read_mask(directory / f"{sid}_muscularis.pgm"),
            plexus_gt=read_mask(directory / f"{sid}_plexus.pgm"),
        ))
    return slides


def write_profile(path, profile: StainProfile) -> Path:
    return atomic_write(path, profile.to_text())


def read_profile(path) -> StainProfile:
    return StainProfile.from_text(Path(path).read_text())
