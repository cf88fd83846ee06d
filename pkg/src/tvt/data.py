"""Image sets for domain adaptation: a synthetic two-domain glyph corpus,
IDX file I/O, and paired source/target mini-batches."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803  # 2051
IDX_LABELS_MAGIC = 0x00000801  # 2049

GLYPHS = ("hbar", "vbar", "cross", "square", "diagonal", "ring")
BACKGROUNDS = ("flat", "stripes", "checker", "gradient", "blobs")


class DataError(ValueError):
    """Malformed data file or inconsistent data set."""


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (count, H, W, C) in [0, 1]
    labels: np.ndarray  # (count,)
    domain: str = ""
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        if self.images.ndim != 4:
            raise DataError(f"images must be (count, H, W, C), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and self.labels.min() < 0:
            raise DataError("labels must be nonnegative")

    def __len__(self) -> int:
        return len(self.labels)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class DomainStyle:
    """Nuisance parameters of one domain; the glyph geometry never depends on these."""

    background: str = "flat"
    texture_amplitude: float = 0.0
    noise: float = 0.05
    offset: float = 0.1
    contrast: float = 0.8

    def __post_init__(self):
        if self.background not in BACKGROUNDS:
            raise DataError(f"unknown background {self.background!r}; choose from {BACKGROUNDS}")


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 4
    image_size: int = 32
    train_per_domain: int = 2000
    test_per_domain: int = 500
    seed: int = 0
    source: DomainStyle = field(default_factory=DomainStyle)
    target: DomainStyle = field(
        default_factory=lambda: DomainStyle(
            background="stripes", texture_amplitude=0.15, noise=0.08, offset=0.1, contrast=0.5
        )
    )

    def __post_init__(self):
        if not 1 <= self.classes <= len(GLYPHS):
            raise DataError(f"classes must be in [1, {len(GLYPHS)}], got {self.classes}")
        if self.image_size < 8:
            raise DataError(f"image_size must be >= 8, got {self.image_size}")


def _glyph_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    half = size * rng.uniform(0.22, 0.34)
    thick = size * rng.uniform(0.06, 0.1)
    margin = half + thick
    cy, cx = rng.uniform(margin, size - margin, size=2)
    dy, dx = yy - cy, xx - cx
    if kind == "hbar":
        m = (np.abs(dy) < thick) & (np.abs(dx) < half)
    elif kind == "vbar":
        m = (np.abs(dx) < thick) & (np.abs(dy) < half)
    elif kind == "cross":
        m = ((np.abs(dy) < thick) & (np.abs(dx) < half)) | ((np.abs(dx) < thick) & (np.abs(dy) < half))
    elif kind == "square":
        inner = half - 2 * thick
        box = (np.abs(dx) < half) & (np.abs(dy) < half)
        m = box & ~((np.abs(dx) < inner) & (np.abs(dy) < inner))
    elif kind == "diagonal":
        m = (np.abs(dx - dy) < thick * 1.4) & (np.abs(dx) < half) & (np.abs(dy) < half)
    elif kind == "ring":
        r = np.hypot(dx, dy)
        m = np.abs(r - (half - thick)) < thick
    else:  # pragma: no cover - guarded by SynthConfig
        raise DataError(f"unknown glyph {kind!r}")
    return m.astype(np.float64)


def _background(style: DomainStyle, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    kind = style.background
    if kind == "flat":
        tex = np.zeros((size, size))
    elif kind == "stripes":
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(3.0, 6.0)
        phase = rng.uniform(0, 2 * np.pi)
        tex = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    elif kind == "checker":
        cell = int(rng.integers(2, 5))
        ox, oy = rng.integers(0, cell, size=2)
        tex = (((xx + ox) // cell + (yy + oy) // cell) % 2).astype(np.float64)
    elif kind == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        ramp = xx * np.cos(theta) + yy * np.sin(theta)
        tex = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    else:  # blobs
        tex = np.zeros((size, size))
        for _ in range(int(rng.integers(3, 7))):
            cy, cx = rng.uniform(0, size, size=2)
            s = rng.uniform(2.0, 5.0)
            tex += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        tex = np.clip(tex, 0, 1)
    return style.offset + style.texture_amplitude * tex


def render(kind: str, style: DomainStyle, size: int, rng: np.random.Generator) -> np.ndarray:
    """One (size, size) image of glyph ``kind`` in ``style``, quantised to 8-bit levels."""
    mask = _glyph_mask(kind, size, rng)
    bg = _background(style, size, rng)
    fg = np.clip(style.offset + style.contrast, 0.0, 1.0)
    img = (1.0 - mask) * bg + mask * fg + rng.normal(0.0, style.noise, size=(size, size))
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _render_split(cfg: SynthConfig, style: DomainStyle, count: int, rng, domain: str, split: str) -> LabeledImageSet:
    labels = np.arange(count) % cfg.classes
    labels = labels[rng.permutation(count)]
    images = np.stack([render(GLYPHS[k], style, cfg.image_size, rng) for k in labels])
    return LabeledImageSet(images[..., None], labels, domain=domain, split=split)


def synth_domain_pair(cfg: SynthConfig) -> dict[str, LabeledImageSet]:
    """Deterministic source/target corpora with train and test splits.

    Keys: ``source_train``, ``source_test``, ``target_train``, ``target_test``.
    Every split is class-balanced (counts differ by at most one).
    """
    ss = np.random.SeedSequence(cfg.seed)
    rngs = [np.random.default_rng(s) for s in ss.spawn(4)]
    out = {}
    plan = [
        ("source", "train", cfg.source, cfg.train_per_domain),
        ("source", "test", cfg.source, cfg.test_per_domain),
        ("target", "train", cfg.target, cfg.train_per_domain),
        ("target", "test", cfg.target, cfg.test_per_domain),
    ]
    for rng, (domain, split, style, count) in zip(rngs, plan):
        out[f"{domain}_{split}"] = _render_split(cfg, style, count, rng, domain, split)
    return out


# ---------------------------------------------------------------------------
# IDX files


def _open(path: Path, mode: str):
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    path = Path(path)
    with _open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated header")
    (found,) = struct.unpack(">i", data[:4])
    if found != magic:
        raise DataError(f"{path}: bad magic {found} (expected {magic})")
    dims = struct.unpack(f">{ndim}i", data[4 : 4 + 4 * ndim])
    expected = int(np.prod(dims))
    payload = data[4 + 4 * ndim :]
    if len(payload) != expected:
        raise DataError(f"{path}: expected {expected} data bytes for dims {dims}, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx_images(path) -> np.ndarray:
    """(count, H, W, 1) floats in [0, 1] from an IDX image file."""
    return _read_idx(path, IDX_IMAGES_MAGIC, 3).astype(np.float64)[..., None] / 255.0


def load_idx(images_path, labels_path, domain: str = "", split: str = "train") -> LabeledImageSet:
    """Read an IDX image file (magic 2051) and label file (magic 2049); pixels scale to [0, 1]."""
    images = load_idx_images(images_path)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DataError(f"image file has {len(images)} items but label file has {len(labels)}")
    return LabeledImageSet(images, labels.astype(np.int64), domain, split)


def write_idx(data: LabeledImageSet, images_path, labels_path) -> None:
    """Write single-channel images and labels as IDX; pixel values are rounded to 8 bits."""
    if data.images.shape[-1] != 1:
        raise DataError("IDX export supports single-channel images only")
    if len(data.labels) and data.labels.max() > 255:
        raise DataError("IDX labels must fit in one byte")
    n, h, w, _ = data.images.shape
    pixels = np.round(np.clip(data.images[..., 0], 0, 1) * 255.0).astype(np.uint8)
    with _open(Path(images_path), "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with _open(Path(labels_path), "wb") as f:
        f.write(struct.pack(">ii", IDX_LABELS_MAGIC, n))
        f.write(data.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class DomainBatch:
    """Labelled source examples plus unlabelled target examples."""

    source_images: np.ndarray
    source_labels: np.ndarray
    target_images: np.ndarray

    @property
    def n_s(self) -> int:
        return len(self.source_images)

    @property
    def n_t(self) -> int:
        return len(self.target_images)

    @property
    def n(self) -> int:
        return self.n_s + self.n_t

    @property
    def images(self) -> np.ndarray:
        return np.concatenate([self.source_images, self.target_images])

    @property
    def domain_labels(self) -> np.ndarray:
        """1 for source, 0 for target."""
        return np.concatenate([np.ones(self.n_s), np.zeros(self.n_t)])


def _epoch_indices(n: int, seed: int, stream: int) -> Iterator[int]:
    epoch = 0
    while True:
        yield from np.random.default_rng([seed, stream, epoch]).permutation(n)
        epoch += 1


def paired_batches(
    source: LabeledImageSet, target: LabeledImageSet, batch_source: int, batch_target: int, seed: int
) -> Iterator[DomainBatch]:
    """Endless stream of batches; each domain is reshuffled every epoch of its own."""
    if len(source) == 0 or len(target) == 0:
        raise DataError("paired_batches needs nonempty source and target sets")
    src = _epoch_indices(len(source), seed, 0)
    tgt = _epoch_indices(len(target), seed, 1)
    while True:
        si = np.fromiter((next(src) for _ in range(batch_source)), dtype=np.int64, count=batch_source)
        ti = np.fromiter((next(tgt) for _ in range(batch_target)), dtype=np.int64, count=batch_target)
        yield DomainBatch(source.images[si], source.labels[si], target.images[ti])
