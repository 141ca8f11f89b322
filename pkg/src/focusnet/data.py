"""Dataset ingestion, resizing, normalisation, augmentation, splitting and a
synthetic ellipse dataset for desk-scale runs.

Images are float32 arrays C x H x W with intensities in [0, 1]; masks are
float32 1 x H x W with values in {0, 1}.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import make_rng
from .exceptions import DataError, PairingError, ParameterError, ValidationError
from .pnm import encode_pnm, read_pnm

logger = logging.getLogger(__name__)

PNM_SUFFIXES = (".pgm", ".ppm", ".pnm")
STD_FLOOR = 1e-6


@dataclass
class SegmentationSample:
    image: np.ndarray
    mask: np.ndarray
    identifier: str
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise ValidationError(f"{self.identifier}: expected image CxHxW and mask 1xHxW, got {self.image.shape} / {self.mask.shape}")
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise ValidationError(f"{self.identifier}: image {self.image.shape} and mask {self.mask.shape} differ spatially")

    @property
    def channels(self) -> int:
        return self.image.shape[0]


@dataclass
class DatasetManifest:
    samples: list
    channels: int
    source: str = ""

    def __post_init__(self):
        ids = [s.identifier for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValidationError("sample identifiers must be unique")
        if any(s.channels != self.channels for s in self.samples):
            raise ValidationError("all samples must have the same channel count")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(images [N,C,H,W], masks [N,1,H,W])``."""
        return np.stack([s.image for s in self.samples]), np.stack([s.mask for s in self.samples])

    def subset(self, indices, source=None) -> "DatasetManifest":
        return DatasetManifest([self.samples[i] for i in indices], self.channels, source or self.source)


# ---------------------------------------------------------------------------
# loading


def _index(directory: Path) -> dict[str, Path]:
    files = {}
    for path in sorted(directory.iterdir()):
        if path.is_file() and path.suffix.lower() in PNM_SUFFIXES:
            if path.stem in files:
                raise DataError(f"duplicate stem '{path.stem}' in {directory}")
            files[path.stem] = path
    return files


def load_dataset(root) -> DatasetManifest:
    """Read ``root/images/*`` and ``root/masks/*`` paired by filename stem.

    Masks are binarised at pixel value >= 128; image intensities are divided
    by 255. Samples come back sorted by stem.
    """
    root = Path(root)
    image_dir, mask_dir = root / "images", root / "masks"
    for d in (image_dir, mask_dir):
        if not d.is_dir():
            raise DataError(f"missing directory {d}")
    images, masks = _index(image_dir), _index(mask_dir)
    if not images:
        raise DataError(f"no PGM/PPM images in {image_dir}")
    for stem in images:
        if stem not in masks:
            raise PairingError(stem)
    orphans = sorted(set(masks) - set(images))
    if orphans:
        raise PairingError(orphans[0], f"mask '{orphans[0]}' has no matching image")

    samples = []
    for stem in sorted(images):
        img = read_pnm(images[stem])
        msk = read_pnm(masks[stem])
        if msk.ndim != 2:
            raise DataError(f"{masks[stem]}: masks must be 8-bit grayscale (P5)")
        if img.shape[:2] != msk.shape:
            raise DataError(f"{stem}: image {img.shape[:2]} and mask {msk.shape} sizes differ")
        chw = img[None] if img.ndim == 2 else img.transpose(2, 0, 1)
        samples.append(SegmentationSample(
            (chw.astype(np.float32) / np.float32(255)),
            (msk >= 128).astype(np.float32)[None],
            stem,
        ))
    channels = samples[0].channels
    if any(s.channels != channels for s in samples):
        raise DataError(f"{image_dir}: mixed grayscale and RGB images")
    return DatasetManifest(samples, channels, str(root))


def write_dataset(manifest: DatasetManifest, root) -> None:
    """Write samples as PGM/PPM pairs in the standard layout (masks as 0/255)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in manifest:
        pixels = np.floor(np.clip(s.image, 0, 1) * 255 + 0.5).astype(np.uint8)
        if s.channels == 1:
            (root / "images" / f"{s.identifier}.pgm").write_bytes(encode_pnm(pixels[0]))
        else:
            (root / "images" / f"{s.identifier}.ppm").write_bytes(encode_pnm(pixels.transpose(1, 2, 0)))
        mask = (s.mask[0] > 0.5).astype(np.uint8) * 255
        (root / "masks" / f"{s.identifier}.pgm").write_bytes(encode_pnm(mask))


# ---------------------------------------------------------------------------
# resampling


def _bilinear(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``image`` [C,H,W] at integer neighbours r0/r0+1 with fractional weights.

    ``rows``/``cols`` are (i0, i1, t) triples of index arrays and weights.
    """
    (r0, r1, tr), (c0, c1, tc) = rows, cols
    img = image.astype(np.float64)
    top = img[:, r0][:, :, c0] + tc * (img[:, r0][:, :, c1] - img[:, r0][:, :, c0])
    bot = img[:, r1][:, :, c0] + tc * (img[:, r1][:, :, c1] - img[:, r1][:, :, c0])
    return top + tr[:, None] * (bot - top)


def _linear_taps(src: np.ndarray, size: int, boundary) -> tuple:
    i0 = np.floor(src).astype(np.int64)
    t = src - i0
    return boundary(i0, size), boundary(i0 + 1, size), t


def _clamp(idx, size):
    return np.clip(idx, 0, size - 1)


def _reflect(idx, size):
    """Mirror indices about the edge pixels (edge not repeated)."""
    if size == 1:
        return np.zeros_like(idx)
    period = 2 * size - 2
    idx = np.mod(idx, period)
    return np.where(idx >= size, period - idx, idx)


def resize(sample: SegmentationSample, size: int) -> SegmentationSample:
    """Bilinear image / nearest-neighbour mask resize to ``size`` x ``size``.

    Sample positions use the half-pixel-centre convention
    ``src = (dst + 0.5) * in / out - 0.5``.
    """
    if size < 1:
        raise ParameterError(f"target size must be >= 1, got {size}")
    _, h, w = sample.image.shape
    if (h, w) == (size, size):
        return replace(sample, image=sample.image.copy(), mask=sample.mask.copy())
    dst = np.arange(size, dtype=np.float64)
    src_r = np.clip((dst + 0.5) * h / size - 0.5, 0, h - 1)
    src_c = np.clip((dst + 0.5) * w / size - 0.5, 0, w - 1)
    image = _bilinear(sample.image, _linear_taps(src_r, h, _clamp), _linear_taps(src_c, w, _clamp))
    near_r = np.minimum(np.floor((dst + 0.5) * h / size).astype(np.int64), h - 1)
    near_c = np.minimum(np.floor((dst + 0.5) * w / size).astype(np.int64), w - 1)
    mask = sample.mask[:, near_r][:, :, near_c]
    mask = (mask >= 0.5).astype(np.float32)
    return replace(sample, image=image.astype(np.float32), mask=mask)


# ---------------------------------------------------------------------------
# normalisation


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    clamped: tuple = ()

    def to_text(self) -> str:
        return "".join(f"{c}: {float(m)!r} {float(s)!r}\n" for c, (m, s) in enumerate(zip(self.mean, self.std)))

    @classmethod
    def from_text(cls, text: str) -> "NormalizationStats":
        means, stds = [], []
        for line in text.splitlines():
            if not line.strip():
                continue
            _, _, rest = line.partition(":")
            m, s = rest.split()
            means.append(float(m))
            stds.append(float(s))
        return cls(np.array(means), np.array(stds))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        return cls.from_text(Path(path).read_text())


def compute_stats(manifest) -> NormalizationStats:
    """Per-channel mean / population std over every pixel of the training split."""
    samples = list(manifest)
    if not samples:
        raise ValidationError("cannot compute statistics of an empty split")
    c = samples[0].image.shape[0]
    total = np.zeros(c)
    total_sq = np.zeros(c)
    count = 0
    for s in samples:
        img = s.image.astype(np.float64).reshape(c, -1)
        total += img.sum(axis=1)
        count += img.shape[1]
    mean = total / count
    for s in samples:
        img = s.image.astype(np.float64).reshape(c, -1)
        total_sq += ((img - mean[:, None]) ** 2).sum(axis=1)
    std = np.sqrt(total_sq / count)
    clamped = tuple(int(i) for i in np.flatnonzero(std < STD_FLOOR))
    if clamped:
        logger.warning("channel(s) %s are constant; std clamped to %g", clamped, STD_FLOOR)
        std = np.maximum(std, STD_FLOOR)
    return NormalizationStats(mean, std, clamped)


def normalize(sample: SegmentationSample, stats: NormalizationStats) -> SegmentationSample:
    image = (sample.image.astype(np.float64) - stats.mean[:, None, None]) / stats.std[:, None, None]
    return replace(sample, image=image.astype(np.float32))


def normalize_manifest(manifest: DatasetManifest, stats: NormalizationStats) -> DatasetManifest:
    return DatasetManifest([normalize(s, stats) for s in manifest], manifest.channels, manifest.source)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentationConfig:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    zoom_range: tuple = (0.8, 1.2)
    channel_shift: float = 0.1
    channel_shift_fraction: float = 0.1
    target_size: int | None = None

    def validate(self) -> "AugmentationConfig":
        lo, hi = self.zoom_range
        if not (0 < lo <= 1 <= hi):
            raise ParameterError(f"zoom range must be positive and contain 1.0, got {self.zoom_range}")
        for name in ("hflip_prob", "vflip_prob", "channel_shift_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ParameterError(f"{name} must lie in [0, 1]")
        if self.channel_shift < 0:
            raise ParameterError("channel_shift must be non-negative")
        return self

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(hflip_prob=0.0, vflip_prob=0.0, zoom_range=(1.0, 1.0), channel_shift=0.0, channel_shift_fraction=0.0)


def hflip(sample: SegmentationSample) -> SegmentationSample:
    return replace(sample, image=sample.image[:, :, ::-1].copy(), mask=sample.mask[:, :, ::-1].copy())


def vflip(sample: SegmentationSample) -> SegmentationSample:
    return replace(sample, image=sample.image[:, ::-1].copy(), mask=sample.mask[:, ::-1].copy())


def zoom(sample: SegmentationSample, factor: float) -> SegmentationSample:
    """Scale about the centre keeping the size: crop when zooming in, reflect-pad when out."""
    if factor <= 0:
        raise ParameterError("zoom factor must be positive")
    if factor == 1.0:
        return replace(sample, image=sample.image.copy(), mask=sample.mask.copy())
    _, h, w = sample.image.shape

    def source(n):
        dst = np.arange(n, dtype=np.float64)
        return (dst + 0.5 - n / 2) / factor + n / 2 - 0.5

    src_r, src_c = source(h), source(w)
    image = _bilinear(sample.image, _linear_taps(src_r, h, _reflect), _linear_taps(src_c, w, _reflect))
    near_r = _reflect(np.floor(src_r + 0.5).astype(np.int64), h)
    near_c = _reflect(np.floor(src_c + 0.5).astype(np.int64), w)
    mask = sample.mask[:, near_r][:, :, near_c]
    return replace(sample, image=image.astype(sample.image.dtype), mask=mask.copy())


def augment(sample: SegmentationSample, cfg: AugmentationConfig, rng) -> SegmentationSample:
    """Random flips, zoom and (RGB only) channel shift; the mask follows every geometric step.

    Draws are made in a fixed order whatever the outcome, so the stream
    consumption per call is constant.
    """
    cfg.validate()
    rng = make_rng(rng)
    do_h = rng.random() < cfg.hflip_prob
    do_v = rng.random() < cfg.vflip_prob
    lo, hi = cfg.zoom_range
    factor = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    do_shift = rng.random() < cfg.channel_shift_fraction
    deltas = rng.uniform(-cfg.channel_shift, cfg.channel_shift, size=sample.channels)

    out = sample
    if do_h:
        out = hflip(out)
    if do_v:
        out = vflip(out)
    if factor != 1.0:
        out = zoom(out, factor)
    if do_shift and sample.channels == 3 and cfg.channel_shift > 0:
        shifted = np.clip(out.image + deltas[:, None, None].astype(out.image.dtype), 0, 1)
        out = replace(out, image=shifted.astype(out.image.dtype))
    return out


def expand_dataset(manifest: DatasetManifest, cfg: AugmentationConfig, target_size: int, rng) -> DatasetManifest:
    """Keep the originals and append augmented copies of uniformly drawn ones until ``target_size``."""
    n = len(manifest)
    if target_size < n:
        raise ParameterError(f"target size {target_size} is below the current size {n}")
    rng = make_rng(rng)
    samples = list(manifest)
    for k in range(target_size - n):
        src = manifest[int(rng.integers(n))]
        aug = augment(src, cfg, rng)
        samples.append(replace(aug, identifier=f"{src.identifier}__aug{k:06d}"))
    return DatasetManifest(samples, manifest.channels, manifest.source)


def split(manifest: DatasetManifest, fraction: float = 0.8, seed=0):
    """Seeded shuffle then partition into ``(train, val)``."""
    if not 0 < fraction < 1:
        raise ParameterError(f"split fraction must lie in (0, 1), got {fraction}")
    n = len(manifest)
    if n < 2:
        raise ParameterError("need at least 2 samples to split")
    order = make_rng(seed).permutation(n)
    n_train = min(max(int(math.floor(n * fraction + 0.5)), 1), n - 1)
    return (manifest.subset(sorted(order[:n_train]), manifest.source),
            manifest.subset(sorted(order[n_train:]), manifest.source))


# ---------------------------------------------------------------------------
# synthetic data


def ellipse_interior(shape, cy, cx, a, b, theta) -> np.ndarray:
    """Pixels whose centre (row + 0.5, col + 0.5) lies inside the rotated ellipse."""
    h, w = shape
    y = np.arange(h, dtype=np.float64)[:, None] + 0.5
    x = np.arange(w, dtype=np.float64)[None, :] + 0.5
    dy, dx = y - cy, x - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def synth_sample(rng, size: int, channels: int = 1, identifier: str = "synth") -> SegmentationSample:
    background = rng.uniform(0.1, 0.3)
    count = int(rng.integers(1, 4))
    levels = rng.choice(np.linspace(0.55, 0.95, 9), size=count, replace=False)
    tint = rng.uniform(0.8, 1.0, size=channels) if channels == 3 else np.ones(1)
    image = np.full((size, size), background)
    mask = np.zeros((size, size), dtype=bool)
    shapes = []
    for level in levels:
        cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
        a, b = rng.uniform(0.1 * size, 0.25 * size, size=2)
        theta = rng.uniform(0, math.pi)
        inside = ellipse_interior((size, size), cy, cx, a, b, theta)
        image[inside] = level
        mask |= inside
        shapes.append((float(cy), float(cx), float(a), float(b), float(theta)))
    noise = rng.normal(0.0, 0.05, size=(channels, size, size))
    img = np.clip(image[None] * tint[:, None, None] + noise, 0, 1).astype(np.float32)
    return SegmentationSample(img, mask[None].astype(np.float32), identifier, {"ellipses": shapes})


def synth_generate(n: int, size: int, rng=0, channels: int = 1) -> DatasetManifest:
    """``n`` noisy images of 1-3 filled ellipses; masks are the exact union of interiors."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    if size < 16:
        raise ParameterError(f"size must be >= 16, got {size}")
    if channels not in (1, 3):
        raise ParameterError("channels must be 1 or 3")
    rng = make_rng(rng)
    samples = [synth_sample(rng, size, channels, f"synth{i:05d}") for i in range(n)]
    return DatasetManifest(samples, channels, f"synthetic(n={n}, size={size})")
