"""Bicubic degradation, augmentation and on-disk dataset handling.

Images on disk are channel-last PNGs. A prepared dataset root looks like::

    <root>/manifest.csv            relative_path,expression,factor
    <root>/normalization.json      per-channel mean/std of the train split
    <root>/<split>/x<F>/<name>.png

where ``<split>`` is one of train/validation/test.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator, TransformerMixin

from .core import (
    ConfigError,
    DataError,
    LabeledSample,
    NumericError,
    fork,
    make_rng,
    resolution_classes,
)

SPLITS = ("train", "validation", "test")
MANIFEST_HEADER = ("relative_path", "expression", "factor")


@dataclass(frozen=True)
class DegradeConfig:
    base_size: int = 100
    factors: tuple[int, ...] = (1, 2, 4, 6, 8)
    eval_extra_factors: tuple[int, ...] = (12, 14, 16)
    net_input_size: int = 224
    bicubic_a: float = -0.5

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(int(f) for f in self.factors))
        object.__setattr__(self, "eval_extra_factors", tuple(int(f) for f in self.eval_extra_factors))
        if list(self.factors) != sorted(set(self.factors)):
            raise ConfigError(f"factors must be strictly ascending, got {self.factors}")
        if 1 not in self.factors:
            raise ConfigError("factor 1 must be part of the factor set")
        if self.base_size < max(self.factors):
            raise ConfigError(f"base_size {self.base_size} smaller than factor {max(self.factors)}")
        if self.bicubic_a >= 0:
            raise ConfigError("bicubic_a must be negative")
        overlap = set(self.factors) & set(self.eval_extra_factors)
        if overlap:
            raise ConfigError(f"factors {sorted(overlap)} are both trained and evaluation-only")
        if self.eval_extra_factors and min(self.eval_extra_factors) < 1:
            raise ConfigError("extra factors must be >= 1")

    @property
    def classes(self):
        return resolution_classes(self.factors, self.eval_extra_factors)

    @property
    def all_factors(self) -> tuple[int, ...]:
        return self.factors + self.eval_extra_factors


def degraded_size(base: int, factor: int) -> int:
    """Side length after downsampling by ``factor``, rounding halves up."""
    if factor < 1 or base < 1:
        raise ValueError(f"base and factor must be positive, got {base}, {factor}")
    if factor > base:
        raise ValueError(f"factor {factor} exceeds base size {base}")
    # integer arithmetic: floor(base / factor + 1/2)
    return (2 * base + factor) // (2 * factor)


def bicubic_kernel(t, a: float = -0.5):
    """Keys cubic convolution kernel; accepts scalars or arrays."""
    x = np.abs(np.asarray(t, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    inner = (a + 2) * x3 - (a + 3) * x2 + 1
    outer = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    out = np.where(x <= 1, inner, np.where(x < 2, outer, 0.0))
    return float(out) if out.ndim == 0 else out


def _resample_matrix(in_len: int, out_len: int, a: float) -> np.ndarray:
    # When shrinking, the kernel is stretched by 1/scale so it also low-pass filters.
    scale = out_len / in_len
    stretch = min(scale, 1.0)
    width = 4.0 / stretch
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1.0 - 1.0 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = stretch * bicubic_kernel(stretch * (u[:, None] - idx), a)
    w /= w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 1, in_len).astype(np.int64) - 1
    m = np.zeros((out_len, in_len))
    np.add.at(m, (np.repeat(np.arange(out_len), taps), idx.ravel()), w.ravel())
    return m


def resize_bicubic(img: np.ndarray, out_h: int, out_w: int, a: float = -0.5) -> np.ndarray:
    """Separable bicubic resampling of an H x W x C image with clamped edges.

    Computation is in float64; the result is float32 clipped to [0, 1].
    """
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected a non-empty H x W x C image, got shape {img.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    x = img.astype(np.float64)
    if not np.isfinite(x).all():
        raise NumericError("non-finite pixel values in resize input")
    h, w, _ = x.shape
    if (h, w) != (out_h, out_w):
        rows = _resample_matrix(h, out_h, a)
        cols = _resample_matrix(w, out_w, a)
        x = np.einsum("oh,hwc,pw->opc", rows, x, cols, optimize=True)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def degrade_image(img: np.ndarray, factor: int, cfg: DegradeConfig) -> np.ndarray:
    side = img.shape[0]
    if img.shape[1] != side:
        raise ValueError(f"expected a square image, got {img.shape[:2]}")
    small = degraded_size(side, factor)
    low = resize_bicubic(img, small, small, cfg.bicubic_a)
    return resize_bicubic(low, cfg.net_input_size, cfg.net_input_size, cfg.bicubic_a)


def degrade_sample(s: LabeledSample, factor: int, cfg: DegradeConfig) -> LabeledSample:
    """Downsample by ``factor`` then upsample to the network input size."""
    classes = cfg.classes
    if factor not in classes:
        raise ValueError(f"factor {factor} not in configured factors {cfg.all_factors}")
    return s.with_image(degrade_image(s.image, factor, cfg), resolution=classes[factor])


def hflip(img: np.ndarray) -> np.ndarray:
    """Mirror an H x W x C image left-right."""
    return img[:, ::-1, :].copy()


@dataclass(frozen=True)
class Normalization:
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.25, 0.25, 0.25)

    @classmethod
    def from_images(cls, images: np.ndarray) -> "Normalization":
        """Per-channel statistics of an N x 3 x H x W array (uint8 or [0,1] floats)."""
        x = _as_unit_float(images)
        mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
        std = x.std(axis=(0, 2, 3), dtype=np.float64)
        return cls(tuple(float(v) for v in mean), tuple(float(max(v, 1e-6)) for v in std))

    def apply(self, x: np.ndarray, channel_axis: int = 1) -> np.ndarray:
        shape = [1] * x.ndim
        shape[channel_axis] = 3
        m = np.asarray(self.mean, dtype=np.float32).reshape(shape)
        s = np.asarray(self.std, dtype=np.float32).reshape(shape)
        return (x - m) / s


def _as_unit_float(x: np.ndarray) -> np.ndarray:
    if x.dtype == np.uint8:
        return x.astype(np.float32) / 255.0
    return x.astype(np.float32, copy=False)


def augment(s: LabeledSample, rng, train: bool, norm: Normalization | None = None,
            force_flip: bool | None = None) -> LabeledSample:
    """Random horizontal flip (train only) followed by per-channel normalization."""
    norm = norm or Normalization()
    img = s.image
    if train:
        flip = make_rng(rng).random() < 0.5 if force_flip is None else force_flip
        if flip:
            img = hflip(img)
    return s.with_image(norm.apply(img.astype(np.float32), channel_axis=2))


def augment_batch(x: np.ndarray, rng: np.random.Generator | None, train: bool,
                  norm: Normalization) -> np.ndarray:
    """Vectorised :func:`augment` for N x 3 x H x W arrays (uint8 or float)."""
    x = _as_unit_float(x)
    if train:
        flip = rng.random(len(x)) < 0.5
        if flip.any():
            x = x.copy()
            x[flip] = x[flip][..., ::-1]
    return norm.apply(x)


# ---------------------------------------------------------------------------
# dataset files


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def path(self) -> Path:
        return Path(self.root) / "manifest.csv"

    def select(self, split: str, factor: int | None = None) -> list[tuple[str, int, int]]:
        return [
            e for e in self.entries
            if e[0].split("/", 1)[0] == split and (factor is None or e[2] == factor)
        ]

    def splits(self) -> list[str]:
        return sorted({e[0].split("/", 1)[0] for e in self.entries})

    def write(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_HEADER)
            w.writerows(self.entries)

    @classmethod
    def read(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.csv"
        if not path.is_file():
            raise FileNotFoundError(f"no manifest at {path}")
        entries = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"relative_path", "expression"} <= set(reader.fieldnames):
                raise DataError(f"{path}: header must contain relative_path,expression[,factor]")
            for lineno, row in enumerate(reader, start=2):
                try:
                    label = int(row["expression"])
                    factor = int(row.get("factor") or 1)
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
                entries.append((row["relative_path"], label, factor))
        return cls(root, entries)


def save_image(path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def load_image(path) -> np.ndarray:
    """Read an image file as H x W x 3 float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def load_split(root, split: str, factor: int, num_classes: int | None = None):
    """Load one prepared split/factor as (uint8 N x 3 x H x W, labels)."""
    manifest = DatasetManifest.read(root)
    entries = manifest.select(split, factor)
    folder = Path(root) / split / f"x{factor}"
    if not entries:
        raise FileNotFoundError(f"no prepared data for split={split!r} factor=x{factor} under {folder}")
    images, labels = [], []
    for rel, label, _ in entries:
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise DataError(f"{rel}: expression label {label} out of range")
        path = Path(root) / rel
        if not path.is_file():
            raise FileNotFoundError(f"missing image {path}")
        with Image.open(path) as im:
            images.append(np.asarray(im.convert("RGB"), dtype=np.uint8).transpose(2, 0, 1))
        labels.append(label)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def read_normalization(root) -> Normalization:
    path = Path(root) / "normalization.json"
    if not path.is_file():
        return Normalization()
    with open(path) as fh:
        d = json.load(fh)
    return Normalization(tuple(d["mean"]), tuple(d["std"]))


def write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def prepare(input_root, output_root, cfg: DegradeConfig, factors: Sequence[int] | None = None) -> DatasetManifest:
    """Degrade every base image of ``input_root`` at each factor into ``output_root``.

    The input root holds a manifest.csv whose rows are the full-resolution
    images (factor column absent or 1). Images whose side differs from
    ``cfg.base_size`` are first resized to it.
    """
    factors = tuple(cfg.factors if factors is None else factors)
    for f in factors:
        if f not in cfg.classes:
            raise ConfigError(f"factor {f} not in configured factors {cfg.all_factors}")
    src = DatasetManifest.read(input_root)
    out = DatasetManifest(Path(output_root))
    train_sum = np.zeros(3)
    train_sq = np.zeros(3)
    train_px = 0
    for rel, label, factor in src.entries:
        if factor != 1:
            continue
        split = rel.split("/", 1)[0]
        if split not in SPLITS:
            raise DataError(f"{rel}: first path component must be one of {SPLITS}")
        img = load_image(Path(input_root) / rel)
        if img.shape[:2] != (cfg.base_size, cfg.base_size):
            img = resize_bicubic(img, cfg.base_size, cfg.base_size, cfg.bicubic_a)
        stem = Path(rel).stem
        for f in factors:
            degraded = degrade_image(img, f, cfg)
            out_rel = f"{split}/x{f}/{stem}.png"
            save_image(out.root / out_rel, degraded)
            out.entries.append((out_rel, label, f))
            if split == "train" and f in cfg.factors:
                q = np.rint(degraded.astype(np.float64) * 255.0) / 255.0
                train_sum += q.sum(axis=(0, 1))
                train_sq += (q * q).sum(axis=(0, 1))
                train_px += q.shape[0] * q.shape[1]
    out.entries.sort()
    out.write()
    if train_px:
        mean = train_sum / train_px
        std = np.sqrt(np.maximum(train_sq / train_px - mean * mean, 1e-12))
        norm = {"mean": [float(v) for v in mean], "std": [float(v) for v in std]}
    else:
        n = Normalization()
        norm = {"mean": list(n.mean), "std": list(n.std)}
    norm.update(base_size=cfg.base_size, net_input_size=cfg.net_input_size, factors=list(factors),
                train_factors=list(cfg.factors))
    write_json(out.root / "normalization.json", norm)
    return out


# ---------------------------------------------------------------------------
# synthetic corpus


# grating periods in pixels at a 48-pixel base, scaled with base size; each
# band survives downsampling only up to roughly period / 2
BAND_PERIODS = (3.0, 6.0, 11.0, 16.0)


def _class_templates(classes: int, size: int, rng: np.random.Generator):
    """Per-class blob layouts plus one grating orientation per frequency band."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    sigma = 0.09
    layouts = []
    for _ in range(classes):
        centres = rng.uniform(0.2, 0.8, size=(3, 2))
        signs = rng.choice([-1.0, 1.0], size=3)
        layouts.append((centres, signs))
    # angles in [0, pi/2) so a horizontal flip (theta -> pi - theta) never lands on another class
    base = np.linspace(0, np.pi / 2, classes, endpoint=False)
    angles = np.stack([rng.permutation(base) + rng.uniform(0, np.pi / (4 * classes)) for _ in BAND_PERIODS], axis=1)
    return yy, xx, sigma, layouts, angles


def synth_image(label: int, templates, rng: np.random.Generator) -> np.ndarray:
    """One base-size RGB image for class ``label`` with random nuisance factors."""
    yy, xx, sigma, layouts, angles = templates
    size = yy.shape[0]
    centres, signs = layouts[label]
    jitter = rng.normal(0, 0.03, size=centres.shape)
    coarse = np.zeros_like(yy)
    for (cy, cx), s in zip(centres + jitter, signs):
        coarse += s * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    # class-independent blobs so the coarse cue alone is imperfect
    clutter = np.zeros_like(yy)
    for cy, cx in rng.uniform(0.1, 0.9, size=(3, 2)):
        clutter += rng.choice([-1.0, 1.0]) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    texture = np.zeros_like(yy)
    for band, period in enumerate(BAND_PERIODS):
        theta = angles[label, band] + rng.normal(0, 0.08)
        k = 2 * np.pi * size / (period * size / 48.0)
        texture += rng.uniform(0.6, 1.0) * np.cos(k * (xx * np.cos(theta) + yy * np.sin(theta)) + rng.uniform(0, 2 * np.pi))
    envelope = 0.3 + 0.7 * np.clip(np.abs(coarse), 0, 1)

    gy, gx = rng.normal(0, 0.15, size=2)
    background = 0.5 + gy * (yy - 0.5) + gx * (xx - 0.5)
    tint = rng.uniform(0.7, 1.3, size=3)
    coarse_amp = rng.uniform(0.1, 0.25)
    fine_amp = rng.uniform(0.08, 0.16)
    noise_amp = rng.uniform(0.05, 0.15)
    img = np.empty((size, size, 3))
    for c in range(3):
        img[:, :, c] = background + tint[c] * (coarse_amp * (coarse + clutter) + fine_amp * envelope * texture)
    img += noise_amp * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)

def synth_corpus(n_per_class: int, classes: int, cfg: DegradeConfig, rng, output,
                 test_per_class: int | None = None) -> DatasetManifest:
    """Write a procedural base-resolution corpus with train and test splits.

    Class identity lives in coarse blob layouts that survive x8 blur and in
    a fine oriented texture that does not; pixel noise rides on top.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if n_per_class < 1:
        raise ValueError("need at least 1 sample per class")
    if test_per_class is None:
        test_per_class = max(1, n_per_class // 4)
    rng = make_rng(rng)
    template_rng, train_rng, test_rng = fork(rng, 3)
    templates = _class_templates(classes, cfg.base_size, template_rng)
    manifest = DatasetManifest(Path(output))
    for split, per_class, split_rng in (("train", n_per_class, train_rng), ("test", test_per_class, test_rng)):
        labels = np.repeat(np.arange(classes), per_class)
        streams = fork(split_rng, len(labels))
        for i, (label, stream) in enumerate(zip(labels, streams)):
            rel = f"{split}/x1/{i:06d}.png"
            save_image(manifest.root / rel, synth_image(int(label), templates, stream))
            manifest.entries.append((rel, int(label), 1))
    manifest.write()
    return manifest


# ---------------------------------------------------------------------------
# sklearn-style wrappers


class BicubicDegrader(TransformerMixin, BaseEstimator):
    """Degrade N x 3 x S x S image arrays at a fixed factor.

    Stateless; ``fit`` only validates parameters so the object can sit in a
    :class:`sklearn.pipeline.Pipeline`.
    """

    def __init__(self, factor: int = 1, net_input_size: int = 224, a: float = -0.5):
        self.factor = factor
        self.net_input_size = net_input_size
        self.a = a

    def fit(self, X, y=None):
        if self.factor < 1:
            raise ValueError(f"factor must be >= 1, got {self.factor}")
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        X = _as_unit_float(np.asarray(X))
        if X.ndim != 4 or X.shape[1] != 3:
            raise ValueError(f"expected N x 3 x H x W, got {X.shape}")
        cfg = DegradeConfig(base_size=max(X.shape[2], self.factor), factors=(1, self.factor) if self.factor != 1 else (1,),
                            eval_extra_factors=(), net_input_size=self.net_input_size, bicubic_a=self.a)
        out = [degrade_image(x.transpose(1, 2, 0), self.factor, cfg).transpose(2, 0, 1) for x in X]
        if not out:
            return np.zeros((0, 3, self.net_input_size, self.net_input_size), dtype=np.float32)
        return np.ascontiguousarray(np.stack(out))
