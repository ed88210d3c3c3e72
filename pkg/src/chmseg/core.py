"""Grid types and configuration shared by every stage of the hierarchy.

Grids wrap read-only numpy arrays. Anything derived from a grid is a new
array, so models and images can be shared between threads without copies.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np


class ChmError(Exception):
    """Invalid input data (bad dimensions, labels, files, ...)."""


class DimensionError(ChmError):
    pass


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class ImagePlane:
    """Image stored as channel planes, shape ``(channels, height, width)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or 0 in data.shape:
            raise DimensionError(f"image must be non-empty (C, H, W), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ChmError("image contains non-finite values")
        object.__setattr__(self, "data", _frozen(np.clip(data, 0.0, 1.0)))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1:]

    @property
    def values(self) -> np.ndarray:
        """Pixel-interleaved row-major values (the ``new_image`` layout)."""
        return np.moveaxis(self.data, 0, -1).ravel()

    def luminance(self) -> np.ndarray:
        if self.channels == 1:
            return self.data[0]
        return self.data[:3].mean(axis=0)


@dataclass(frozen=True, eq=False)
class LabelMap:
    data: np.ndarray
    class_count: int = 2

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or 0 in data.shape:
            raise DimensionError(f"label map must be a non-empty 2-D grid, got {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(data == np.round(data)):
                raise ChmError("label values must be integers")
        data = data.astype(np.int64)
        if self.class_count < 2:
            raise ChmError("class_count must be at least 2")
        if data.min() < 0 or data.max() >= self.class_count:
            raise ChmError(
                f"label values must lie in [0, {self.class_count - 1}], "
                f"found range [{data.min()}, {data.max()}]"
            )
        object.__setattr__(self, "data", _frozen(data))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def binary(self, positive: int = 1) -> np.ndarray:
        return (self.data == positive).astype(np.float64)


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    """One plane per class, shape ``(planes, height, width)``; a 2-D input is one plane."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or 0 in data.shape:
            raise DimensionError(f"probability map must be (P, H, W), got {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise ChmError("probabilities must be finite and lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def planes(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1:]

    def plane(self, index: int = 0) -> np.ndarray:
        return self.data[index]

    def argmax(self) -> np.ndarray:
        return np.argmax(self.data, axis=0)


def new_image(width: int, height: int, channels: int, values: Sequence[float]) -> ImagePlane:
    """Build an image from pixel-interleaved row-major values."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if width < 1 or height < 1 or channels < 1:
        raise DimensionError("width, height and channels must be positive")
    if values.size != width * height * channels:
        raise DimensionError(
            f"expected {width * height * channels} values for "
            f"{width}x{height}x{channels}, got {values.size}"
        )
    if not np.all(np.isfinite(values)):
        raise ChmError("image contains non-finite values")
    return ImagePlane(np.moveaxis(values.reshape(height, width, channels), -1, 0))


def level_shape(shape: tuple[int, int], level: int) -> tuple[int, int]:
    """Grid dimensions at pyramid ``level`` (1 = original resolution)."""
    factor = 2 ** (level - 1)
    return (math.ceil(shape[0] / factor), math.ceil(shape[1] / factor))


@dataclass(frozen=True)
class Pyramid:
    """Levels ordered from finest (index 0, level 1) to coarsest."""

    levels: tuple

    def __post_init__(self):
        if not self.levels:
            raise DimensionError("a pyramid needs at least one level")
        base = np.shape(self.levels[0])[-2:]
        for index, grid in enumerate(self.levels):
            if np.shape(grid)[-2:] != level_shape(base, index + 1):
                raise DimensionError(f"pyramid level {index + 1} violates the halving law")

    def __len__(self):
        return len(self.levels)

    def level(self, l: int):
        return self.levels[l - 1]


@dataclass
class FeatureConfig:
    """Which appearance-feature blocks are enabled."""

    haar: bool = True
    hog: bool = True
    dense_orientation: bool = True
    gabor: bool = True
    canny: bool = True
    position: bool = True
    stencil: bool = True


@dataclass
class ChmConfig:
    levels: int = 5
    stages: int = 2
    ldnn_groups: int = 24
    ldnn_per_group: int = 24
    class_count: int = 2
    intra_class_top_levels: int = 3
    learning_rate: float = 0.01
    lr_decay: float = 0.95
    epochs: int = 30
    minibatch: int = 64
    dropout: bool = True
    subsample_rate: float = 1.0
    max_samples: int = 200_000
    seed: int = 0
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        if isinstance(self.features, dict):
            self.features = FeatureConfig(**self.features)
        self.validate()

    def validate(self):
        checks = {
            "levels": self.levels >= 1,
            "stages": self.stages >= 1,
            "ldnn_groups": self.ldnn_groups >= 1,
            "ldnn_per_group": self.ldnn_per_group >= 1,
            "class_count": self.class_count >= 2,
            "intra_class_top_levels": self.intra_class_top_levels >= 0
            and (self.class_count == 2 or self.intra_class_top_levels <= self.levels),
            "learning_rate": self.learning_rate > 0,
            "epochs": self.epochs >= 0,
            "minibatch": self.minibatch >= 1,
            "subsample_rate": 0 < self.subsample_rate <= 1,
            "max_samples": self.max_samples >= 2,
        }
        bad = [name for name, ok in checks.items() if not ok]
        if bad:
            raise ChmError(f"invalid config values: {', '.join(bad)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ChmConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ChmError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)
