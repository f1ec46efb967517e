"""Synthetic dataset generation, two-view augmentation, and file I/O.

The generator produces grayscale images that share a common "anatomy"
(a smooth radial gradient plus three low-contrast concentric elliptical
bands, jittered slightly per sample) while each class adds one localized
Gaussian blob at a class-specific position.  Cross-sample pixel
correlation stays high, mimicking the structure of medical imagery, while
class identity stays linearly recoverable from good features.

Interchange formats are deliberately plain: binary PGM (P5, maxval 255)
for images, a CSV of 0/1 flags for multi-hot labels, and a JSON manifest
tying ids, image paths, the label file, and the train/test split together.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, ParseError
from .seeding import mix64, tag

Array = np.ndarray

MANIFEST_VERSION = 1


@dataclass
class ImageSample:
    pixels: Array          # (H, W) floats in [0, 1]
    labels: Array          # multi-hot over the class count
    id: str


@dataclass
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.6, 1.0)   # area fraction range
    flip_prob: float = 0.5
    noise_std: float = 0.05
    brightness_jitter: float = 0.2

    def validate(self) -> "AugmentConfig":
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigurationError(f"crop_scale must satisfy 0 < low <= high <= 1, got {self.crop_scale}")
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ConfigurationError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.noise_std < 0 or self.brightness_jitter < 0:
            raise ConfigurationError("noise_std and brightness_jitter must be >= 0")
        return self


class RngStream:
    """Per-sample deterministic randomness.

    The per-sample seed is mix(global_seed, sample_index, epoch) under a
    fixed 64-bit hash, and the two views draw from disjoint sub-streams, so
    augmentation is reproducible regardless of batch order or worker count.
    """

    def __init__(self, global_seed: int, index: int = 0, epoch: int = 0):
        self.global_seed = int(global_seed)
        self.index = int(index)
        self.epoch = int(epoch)

    def child(self, index: int, epoch: int) -> "RngStream":
        return RngStream(self.global_seed, index, epoch)

    def view_rngs(self) -> tuple[np.random.Generator, np.random.Generator]:
        s = mix64(self.global_seed, self.index, self.epoch)
        return (np.random.default_rng(mix64(s, 1)),
                np.random.default_rng(mix64(s, 2)))


@dataclass
class Dataset:
    samples: list[ImageSample]
    n_classes: int
    image_size: int
    split: dict[str, list[str]] = field(default_factory=dict)  # "train"/"test" -> ids

    def by_id(self, sample_id: str) -> ImageSample:
        return self._index()[sample_id]

    def _index(self) -> dict[str, ImageSample]:
        if not hasattr(self, "_idx"):
            self._idx = {s.id: s for s in self.samples}
        return self._idx

    def subset(self, split_name: str) -> list[ImageSample]:
        return [self.by_id(i) for i in self.split.get(split_name, [])]


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

def _class_blob_center(label: int, classes: int, size: float) -> tuple[float, float]:
    # Blob centers sit on the vertical axis: a horizontal flip (the only
    # geometric augmentation that mirrors) then maps each class onto itself
    # instead of onto a different class.
    if classes == 1:
        frac = 0.5
    else:
        frac = 0.24 + 0.52 * label / (classes - 1)
    return size * 0.5, size * frac   # (x, y)


def generate_synthetic(n: int, classes: int, size: int, seed: int) -> Dataset:
    """Shared-anatomy images with one class-specific blob each.

    Classes are balanced (round-robin assignment) and the train/test split
    is stratified 80/20.  Fully deterministic per seed.
    """
    if n < 2:
        raise ConfigurationError(f"need at least 2 samples, got {n}")
    if not (2 <= classes <= 8):
        raise ConfigurationError(f"classes must be in 2..8, got {classes}")
    if size < 16:
        raise ConfigurationError(f"size must be >= 16, got {size}")

    rng = np.random.default_rng(mix64(seed, tag("synthetic")))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c0 = (size - 1) / 2.0
    sigma = size / 9.0
    samples = []
    for i in range(n):
        label = i % classes
        dcx, dcy = rng.uniform(-2.0, 2.0, size=2)      # +-2 px anatomy jitter
        rjit = rng.uniform(0.95, 1.05)                 # +-5% radius jitter
        rx = (xx - (c0 + dcx)) / (0.52 * size)
        ry = (yy - (c0 + dcy)) / (0.66 * size)
        r = np.sqrt(rx * rx + ry * ry)
        img = 0.70 - 0.42 * np.minimum(r / rjit, 1.1)
        for rho in (0.30, 0.52, 0.74):
            band = (r - rho * rjit) / 0.045
            img += 0.07 * np.exp(-band * band)
        bx, by = _class_blob_center(label, classes, float(size))
        d2 = ((xx - bx) ** 2 + (yy - by) ** 2) / (2.0 * sigma * sigma)
        img += 0.3 * np.exp(-d2)
        img += rng.normal(0.0, 0.015, size=img.shape)  # faint per-sample texture
        img = np.clip(img, 0.0, 1.0)
        labels = np.zeros(classes, dtype=np.int64)
        labels[label] = 1
        samples.append(ImageSample(pixels=img, labels=labels, id=f"s{i:05d}"))

    split_rng = np.random.default_rng(mix64(seed, tag("split")))
    train_ids, test_ids = [], []
    for c in range(classes):
        ids = [s.id for s in samples if s.labels[c] == 1]
        order = split_rng.permutation(len(ids))
        n_train = max(1, int(round(0.8 * len(ids)))) if len(ids) > 1 else 1
        n_train = min(n_train, len(ids) - 1) if len(ids) > 1 else len(ids)
        for j, k in enumerate(order):
            (train_ids if j < n_train else test_ids).append(ids[k])
    train_ids.sort()
    test_ids.sort()
    return Dataset(samples=samples, n_classes=classes, image_size=size,
                   split={"train": train_ids, "test": test_ids})


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _resize_bilinear(src: Array, out_size: int) -> Array:
    """Corner-aligned bilinear resize of a square image."""
    h, w = src.shape
    if (h, w) == (out_size, out_size):
        return src.copy()
    ys = np.linspace(0.0, h - 1.0, out_size)
    xs = np.linspace(0.0, w - 1.0, out_size)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = src[y0[:, None], x0[None, :]] * (1 - wx) + src[y0[:, None], x1[None, :]] * wx
    bot = src[y1[:, None], x0[None, :]] * (1 - wx) + src[y1[:, None], x1[None, :]] * wx
    return top * (1 - wy) + bot * wy


def _augment_view(pixels: Array, cfg: AugmentConfig, g: np.random.Generator) -> Array:
    size = pixels.shape[0]
    lo, hi = cfg.crop_scale
    area = g.uniform(lo, hi)
    side = int(round(size * math.sqrt(area)))
    side = min(max(side, 1), size)
    top = int(g.integers(0, size - side + 1))
    left = int(g.integers(0, size - side + 1))
    out = pixels[top:top + side, left:left + side]
    out = _resize_bilinear(out, size) if side != size else out.copy()
    if g.uniform() < cfg.flip_prob:
        out = out[:, ::-1].copy()
    out = np.clip(out + g.normal(0.0, cfg.noise_std, size=out.shape), 0.0, 1.0)
    gain = g.uniform(1.0 - cfg.brightness_jitter, 1.0 + cfg.brightness_jitter)
    return np.clip(out * gain, 0.0, 1.0)


def augment_pair(img: ImageSample, cfg: AugmentConfig, rng: RngStream) -> tuple[Array, Array]:
    """Two independently augmented views of one sample."""
    cfg.validate()
    g1, g2 = rng.view_rngs()
    return _augment_view(img.pixels, cfg, g1), _augment_view(img.pixels, cfg, g2)


# ---------------------------------------------------------------------------
# PGM (binary P5, maxval 255)
# ---------------------------------------------------------------------------

def write_pgm(img: ImageSample | Array, path) -> None:
    pixels = img.pixels if isinstance(img, ImageSample) else np.asarray(img)
    data = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _next_header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header")
    return buf[start:pos], pos


def load_pgm(path) -> ImageSample:
    """Binary PGM only; rejects ASCII variants and any maxval other than 255."""
    buf = Path(path).read_bytes()
    magic, pos = _next_header_token(buf, 0)
    if magic != b"P5":
        raise FormatError(f"unsupported PGM magic {magic.decode('ascii', 'replace')!r} "
                          "(only binary 'P5' is accepted)")
    fields = []
    for _ in range(3):
        token, pos = _next_header_token(buf, pos)
        try:
            fields.append(int(token))
        except ValueError:
            raise FormatError(f"non-numeric PGM header token {token!r}") from None
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise FormatError(f"invalid PGM dimensions {w}x{h}")
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval} (must be 255)")
    pos += 1  # single whitespace byte after maxval
    payload = buf[pos:pos + w * h]
    if len(payload) != w * h:
        raise FormatError(f"truncated PGM payload: expected {w * h} bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0
    return ImageSample(pixels=pixels, labels=np.zeros(0, dtype=np.int64), id=Path(path).stem)


# ---------------------------------------------------------------------------
# labels CSV
# ---------------------------------------------------------------------------

def write_labels_csv(path, samples: list[ImageSample]) -> None:
    classes = len(samples[0].labels)
    lines = ["id," + ",".join(f"c{i}" for i in range(classes))]
    for s in samples:
        lines.append(s.id + "," + ",".join(str(int(v)) for v in s.labels))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_labels_csv(path) -> dict[str, Array]:
    """id -> multi-hot vector; strict 0/1 flags and fixed arity."""
    text = Path(path).read_text(encoding="ascii")
    lines = text.splitlines()
    if not lines:
        raise ParseError(f"{path}: empty label file")
    header = lines[0].split(",")
    if header[0] != "id" or len(header) < 2:
        raise ParseError(f"{path} line 1: header must be 'id,c0,c1,...', got {lines[0]!r}")
    arity = len(header) - 1
    table: dict[str, Array] = {}
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != arity + 1:
            raise ParseError(f"{path} line {ln}: expected {arity + 1} fields, got {len(parts)}")
        sample_id = parts[0]
        if not sample_id:
            raise ParseError(f"{path} line {ln}: missing id")
        flags = np.zeros(arity, dtype=np.int64)
        for i, flag in enumerate(parts[1:]):
            if flag not in ("0", "1"):
                raise ParseError(f"{path} line {ln}: label flag must be 0 or 1, got {flag!r}")
            flags[i] = int(flag)
        table[sample_id] = flags
    return table


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------

def save_dataset(ds: Dataset, out_dir) -> Path:
    """Write PGMs, the label CSV, and the manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images = {}
    for s in ds.samples:
        rel = f"images/{s.id}.pgm"
        write_pgm(s, out / rel)
        images[s.id] = rel
    write_labels_csv(out / "labels.csv", ds.samples)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "ids": [s.id for s in ds.samples],
        "images": images,
        "labels": "labels.csv",
        "split": ds.split,
        "classes": ds.n_classes,
        "image_size": ds.image_size,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="ascii")
    return path


def load_dataset(manifest_path) -> Dataset:
    mpath = Path(manifest_path)
    try:
        manifest = json.loads(mpath.read_text(encoding="ascii"))
    except json.JSONDecodeError as e:
        raise ParseError(f"{mpath}: invalid manifest JSON: {e}") from None
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise FormatError(f"{mpath}: unsupported manifest format_version "
                          f"{manifest.get('format_version')!r}")
    base = mpath.parent
    labels = load_labels_csv(base / manifest["labels"])
    samples = []
    for sample_id in manifest["ids"]:
        if sample_id not in labels:
            raise ParseError(f"{mpath}: id {sample_id!r} missing from the label file")
        img = load_pgm(base / manifest["images"][sample_id])
        samples.append(ImageSample(pixels=img.pixels, labels=labels[sample_id], id=sample_id))
    return Dataset(samples=samples, n_classes=int(manifest["classes"]),
                   image_size=int(manifest["image_size"]),
                   split={k: list(v) for k, v in manifest["split"].items()})
