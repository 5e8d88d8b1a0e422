"""Shared types, errors, seeded randomness and batch bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np


class ResrouteError(Exception):
    """Base class for package errors."""


class ConfigError(ResrouteError, ValueError):
    """Inconsistent configuration (bad factor set, head width mismatch, ...)."""


class DataError(ResrouteError, ValueError):
    """Malformed dataset entry or label."""


class NumericError(ResrouteError, ArithmeticError):
    """NaN or non-finite value where finite numbers are required."""


class ContractError(ResrouteError, ValueError):
    """A routing or partition invariant was violated."""


class StateError(ResrouteError, RuntimeError):
    """Operation invoked in the wrong lifecycle state."""


def make_rng(seed) -> np.random.Generator:
    """Return a PCG64 generator; accepts an int seed or an existing generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        raise ValueError("an explicit seed is required")
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFF_FFFF_FFFF_FFFF))


def fork(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Deterministically split ``rng`` into ``n`` independent child streams."""
    return list(rng.spawn(n))


def torch_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed suitable for ``torch.Generator.manual_seed``."""
    return int(rng.integers(0, 2**63 - 1))


def one_hot(index: int, length: int) -> np.ndarray:
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    if not 0 <= index < length:
        raise ValueError(f"index {index} out of range for length {length}")
    v = np.zeros(length, dtype=np.int8)
    v[index] = 1
    return v


def argmax_first(v) -> int:
    """Index of the maximum; ties resolve to the lowest index."""
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ValueError("argmax_first needs a non-empty 1-d vector")
    if np.isnan(a).any():
        raise NumericError("NaN in argmax input")
    # np.argmax already returns the first occurrence of the max
    return int(np.argmax(a))


def is_one_hot(v) -> bool:
    a = np.asarray(v)
    return a.ndim == 1 and a.size > 0 and bool(np.isin(a, (0, 1)).all()) and int(a.sum()) == 1


def total_accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    if p.size == 0:
        raise ValueError("total_accuracy of an empty set is undefined")
    return float(np.count_nonzero(p == y)) / p.size


@dataclass(frozen=True)
class ResolutionClass:
    """A downsample factor and its class index within an experiment."""

    index: int
    factor: int
    # factors outside the trained set (x12, x14, ...) are evaluation-only
    extra: bool = False


def resolution_classes(factors: Sequence[int], extra_factors: Sequence[int] = ()) -> dict[int, ResolutionClass]:
    """Map factor -> ResolutionClass. Extra factors get indices after the trained ones."""
    if len(set(factors)) != len(factors):
        raise ConfigError(f"duplicate factors in {list(factors)}")
    out = {f: ResolutionClass(i, int(f)) for i, f in enumerate(factors)}
    for j, f in enumerate(extra_factors):
        if f in out:
            raise ConfigError(f"factor {f} is both trained and extra")
        out[f] = ResolutionClass(len(factors) + j, int(f), extra=True)
    return out


@dataclass(frozen=True)
class LabeledSample:
    image: np.ndarray  # H x W x 3, float in [0, 1]
    expression: int
    resolution: ResolutionClass
    original_index: int = 0

    def with_image(self, image: np.ndarray, **changes) -> "LabeledSample":
        return replace(self, image=image, **changes)


def hwc_to_chw(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3:
        raise ValueError(f"expected H x W x C, got shape {img.shape}")
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def chw_to_hwc(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3:
        raise ValueError(f"expected C x H x W, got shape {img.shape}")
    return np.ascontiguousarray(img.transpose(1, 2, 0))


@dataclass
class Batch:
    """Ordered samples; position in ``samples`` is the original index."""

    samples: list[LabeledSample] = field(default_factory=list)

    def __post_init__(self):
        self.samples = [
            s if s.original_index == i else replace(s, original_index=i)
            for i, s in enumerate(self.samples)
        ]

    def __len__(self):
        return len(self.samples)

    def pack(self, dtype=None) -> np.ndarray:
        """Stack images channel-first into an N x 3 x H x W array."""
        if not self.samples:
            return np.zeros((0, 3, 0, 0), dtype=dtype or np.float32)
        out = np.stack([hwc_to_chw(s.image) for s in self.samples])
        return out if dtype is None else out.astype(dtype, copy=False)

    @property
    def expressions(self) -> np.ndarray:
        return np.array([s.expression for s in self.samples], dtype=np.int64)

    @property
    def resolutions(self) -> np.ndarray:
        return np.array([s.resolution.index for s in self.samples], dtype=np.int64)

    @classmethod
    def unpack(cls, packed: np.ndarray, template: "Batch") -> "Batch":
        """Inverse of :meth:`pack`, taking labels from ``template``."""
        if len(packed) != len(template):
            raise ValueError("packed array and template disagree on batch size")
        return cls([s.with_image(chw_to_hwc(x)) for s, x in zip(template.samples, packed)])
