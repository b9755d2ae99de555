"""Box3D <-> network output parameterization.

Sizes are predicted as multiplicative residuals against per-class mean
dimensions; yaw is a 12-bin classification plus an in-bin residual.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DecodeError, UnknownClass
from .geometry import TWO_PI, Box3D, rot_y, wrap_angle

NUM_HEADING_BIN = 12
BIN_WIDTH = TWO_PI / NUM_HEADING_BIN
HALF_BIN = BIN_WIDTH / 2.0

# output vector layout of the fusion head
CENTER = slice(0, 3)
SIZE = slice(3, 6)
HEADING_LOGITS = slice(6, 6 + NUM_HEADING_BIN)
HEADING_RESIDUALS = slice(6 + NUM_HEADING_BIN, 6 + 2 * NUM_HEADING_BIN)
NUM_OUTPUTS = 6 + 2 * NUM_HEADING_BIN

# mean (length, width, height) in meters per class of the tractor-road data
TRACTOR_ROAD_SIZES = {
    "Car": (4.47, 1.98, 1.64),
    "People": (0.69, 0.75, 1.57),
    "Cyclist": (1.87, 1.00, 1.64),
    "Bicycle": (1.70, 1.22, 1.13),
    "Truck": (4.66, 1.99, 1.85),
    "Freight_Tricycle": (2.36, 2.36, 1.12),
}

# commonly used KITTI training-set averages
KITTI_SIZES = {
    "Car": (3.88311640418, 1.62856739989, 1.52563191462),
    "Pedestrian": (0.84422524, 0.66068622, 1.76255119),
    "Cyclist": (1.76282397, 0.59706367, 1.73698127),
}


@dataclass(frozen=True)
class SizePriorTable:
    sizes: dict[str, tuple[float, float, float]]

    def __post_init__(self):
        clean = {}
        for name, dims in self.sizes.items():
            dims = tuple(float(d) for d in dims)
            if len(dims) != 3 or not all(d > 0 for d in dims):
                raise ValueError(f"size prior for {name!r} must be three positive numbers")
            clean[name] = dims
        object.__setattr__(self, "sizes", clean)

    @classmethod
    def tractor_road(cls) -> "SizePriorTable":
        return cls(dict(TRACTOR_ROAD_SIZES))

    @classmethod
    def kitti(cls) -> "SizePriorTable":
        return cls(dict(KITTI_SIZES))

    @classmethod
    def load(cls, path: str | Path) -> "SizePriorTable":
        return cls(json.loads(Path(path).read_text()))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({k: list(v) for k, v in self.sizes.items()}, indent=2))

    def subset(self, classes) -> "SizePriorTable":
        return SizePriorTable({c: self[c] for c in classes})

    @property
    def classes(self) -> list[str]:
        return list(self.sizes)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return np.array(self.sizes[name])
        except KeyError:
            raise UnknownClass(f"no size prior for class {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.sizes


@dataclass(frozen=True)
class HeadingCode:
    bin: int
    residual: float


def encode_heading(yaw: float) -> HeadingCode:
    a = math.fmod(float(yaw), TWO_PI)
    if a < 0.0:
        a += TWO_PI
    if a >= TWO_PI:
        a = 0.0
    b = int(math.floor(a / BIN_WIDTH + 0.5))
    res = a - b * BIN_WIDTH
    # guard the half-open interval against rounding in the division above
    if res >= HALF_BIN:
        b, res = b + 1, res - BIN_WIDTH
    elif res < -HALF_BIN:
        b, res = b - 1, res + BIN_WIDTH
    if b == NUM_HEADING_BIN:
        b, res = 0, a - TWO_PI
    return HeadingCode(b, res)


def decode_heading(code: HeadingCode) -> float:
    return wrap_angle(code.bin * BIN_WIDTH + code.residual)


def encode_heading_array(yaw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`encode_heading`; returns (bins, residuals)."""
    codes = [encode_heading(y) for y in np.ravel(yaw)]
    bins = np.array([c.bin for c in codes], dtype=np.int64).reshape(np.shape(yaw))
    res = np.array([c.residual for c in codes]).reshape(np.shape(yaw))
    return bins, res


def decode_size(cls: str, residual, priors: SizePriorTable) -> tuple[float, float, float]:
    prior = priors[cls]
    residual = np.asarray(residual, dtype=np.float64)
    if np.any(residual <= -1.0) or not np.all(np.isfinite(residual)):
        raise DecodeError(f"size residual {residual.tolist()} gives a non-positive dimension")
    l, w, h = prior * (1.0 + residual)
    return float(l), float(w), float(h)


def encode_size(cls: str, dims, priors: SizePriorTable) -> np.ndarray:
    return np.asarray(dims, dtype=np.float64) / priors[cls] - 1.0


@dataclass
class BoxParams:
    """Decoded view of one 30-wide output row of the fusion head."""

    center_offset: np.ndarray
    size_residual: np.ndarray
    heading_logits: np.ndarray
    heading_residuals: np.ndarray

    @classmethod
    def from_vector(cls, v) -> "BoxParams":
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape[0] != NUM_OUTPUTS:
            raise ValueError(f"expected {NUM_OUTPUTS} outputs, got {v.shape[0]}")
        return cls(v[CENTER].copy(), v[SIZE].copy(), v[HEADING_LOGITS].copy(), v[HEADING_RESIDUALS].copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.center_offset, self.size_residual, self.heading_logits, self.heading_residuals])


def decode_box(
    params: BoxParams,
    cls: str,
    centroid,
    frame_rotation: float,
    priors: SizePriorTable,
) -> Box3D:
    """Compose center, size and heading decodes into a camera-frame Box3D.

    ``centroid`` and ``params`` live in the normalized frustum frame, i.e. the
    camera frame rotated by ``-frame_rotation`` about y.
    """
    center = np.asarray(centroid, dtype=np.float64)[:3] + params.center_offset
    center = rot_y(frame_rotation) @ center
    l, w, h = decode_size(cls, params.size_residual, priors)
    b = int(np.argmax(params.heading_logits))
    yaw = decode_heading(HeadingCode(b, float(params.heading_residuals[b]))) + frame_rotation
    return Box3D(center[0], center[1], center[2], l, w, h, wrap_angle(yaw), cls)


def encode_box(box: Box3D, cls: str, centroid, frame_rotation: float, priors: SizePriorTable) -> BoxParams:
    """Exact parameters that :func:`decode_box` maps back to ``box``."""
    center = rot_y(-frame_rotation) @ box.center
    offset = center - np.asarray(centroid, dtype=np.float64)[:3]
    code = encode_heading(box.yaw - frame_rotation)
    logits = np.zeros(NUM_HEADING_BIN)
    logits[code.bin] = 1.0
    residuals = np.zeros(NUM_HEADING_BIN)
    residuals[code.bin] = code.residual
    return BoxParams(offset, encode_size(cls, box.size, priors), logits, residuals)
