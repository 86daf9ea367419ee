"""
Features Module
Keypoint/descriptor containers, position normalization and the SGFM
feature-file format (plus its JSON mirror for hand-written fixtures).
"""
import json
import logging
import os
import struct
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from modules.errors import FeatureError

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"SGFM"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIIff")


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    confidence: float


@dataclass(frozen=True, eq=False)
class LocalFeatureSet:
    """
    Local features of one image.

    keypoints is an (M, 3) array of (x, y, confidence) in pixels;
    descriptors is (M, D).
    """

    image_size: Tuple[float, float]
    keypoints: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if descriptors.ndim == 1 and descriptors.size == 0:
            descriptors = descriptors.reshape(0, 0)
        keypoints.setflags(write=False)
        descriptors.setflags(write=False)
        object.__setattr__(self, "keypoints", keypoints)
        object.__setattr__(self, "descriptors", descriptors)
        object.__setattr__(self, "image_size", (float(self.image_size[0]), float(self.image_size[1])))

    @classmethod
    def from_keypoints(cls, image_size, keypoints: Sequence[Keypoint], descriptors) -> "LocalFeatureSet":
        rows = [(k.x, k.y, k.confidence) for k in keypoints]
        return cls(image_size, np.array(rows, dtype=np.float64).reshape(-1, 3), descriptors)

    @property
    def num_keypoints(self) -> int:
        return self.keypoints.shape[0]

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[1] if self.descriptors.ndim == 2 else 0

    @property
    def positions(self) -> np.ndarray:
        return self.keypoints[:, :2]

    def keypoint(self, index: int) -> Keypoint:
        x, y, c = self.keypoints[index]
        return Keypoint(float(x), float(y), float(c))

    def permuted(self, order: Sequence[int]) -> "LocalFeatureSet":
        order = np.asarray(order, dtype=int)
        return LocalFeatureSet(self.image_size, self.keypoints[order], self.descriptors[order])


@dataclass(frozen=True)
class Violation:
    field: str
    index: Tuple[int, ...]
    message: str


def _check_image_size(image_size) -> Tuple[float, float]:
    width, height = image_size
    if not (width > 0 and height > 0):
        raise FeatureError(f"image size must be positive, got {width}x{height}")
    return float(width), float(height)


def normalize_keypoints(features: LocalFeatureSet) -> np.ndarray:
    """Center on the image and divide by its largest dimension; confidence passes through."""
    width, height = _check_image_size(features.image_size)
    scale = max(width, height)
    out = features.keypoints.copy()
    out[:, 0] = (out[:, 0] - width / 2.0) / scale
    out[:, 1] = (out[:, 1] - height / 2.0) / scale
    return out


def denormalize_keypoints(normalized: np.ndarray, image_size) -> np.ndarray:
    width, height = _check_image_size(image_size)
    scale = max(width, height)
    out = np.array(normalized, dtype=np.float64).reshape(-1, 3)
    out[:, 0] = out[:, 0] * scale + width / 2.0
    out[:, 1] = out[:, 1] * scale + height / 2.0
    return out


def random_feature_set(
    rng: np.random.Generator, count: int, dim: int, image_size: Tuple[float, float] = (640.0, 480.0)
) -> LocalFeatureSet:
    """Uniform keypoints with unit-norm Gaussian descriptors."""
    width, height = image_size
    keypoints = np.column_stack([
        rng.uniform(0.0, width, count), rng.uniform(0.0, height, count), rng.uniform(0.0, 1.0, count)
    ])
    descriptors = rng.standard_normal((count, dim))
    descriptors /= np.linalg.norm(descriptors, axis=1, keepdims=True)
    return LocalFeatureSet(image_size, keypoints, descriptors)


def validate_feature_set(features: LocalFeatureSet) -> List[Violation]:
    """Every invariant violation, as data."""
    violations: List[Violation] = []
    width, height = features.image_size
    if not (width > 0 and height > 0):
        violations.append(Violation("image_size", (), f"image size must be positive, got {width}x{height}"))
    descriptors = features.descriptors
    if descriptors.ndim != 2:
        violations.append(Violation("descriptors", (), f"descriptors must be 2-D, got shape {descriptors.shape}"))
        return violations
    if descriptors.shape[0] != features.num_keypoints:
        violations.append(Violation(
            "descriptors", (),
            f"{descriptors.shape[0]} descriptor rows for {features.num_keypoints} keypoints",
        ))
    if features.num_keypoints and descriptors.shape[1] == 0:
        violations.append(Violation("descriptors", (), "descriptor width must be positive"))
    for row, col in np.argwhere(~np.isfinite(descriptors)):
        violations.append(Violation("descriptors", (int(row), int(col)), "non-finite descriptor entry"))
    for i, (x, y, c) in enumerate(features.keypoints):
        if not np.all(np.isfinite((x, y, c))):
            violations.append(Violation("keypoints", (i,), "non-finite keypoint"))
            continue
        if not (0 <= x < width):
            violations.append(Violation("keypoints.x", (i,), f"x={x} outside [0, {width})"))
        if not (0 <= y < height):
            violations.append(Violation("keypoints.y", (i,), f"y={y} outside [0, {height})"))
        if not (0.0 <= c <= 1.0):
            violations.append(Violation("keypoints.confidence", (i,), f"confidence {c} outside [0, 1]"))
    return violations


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def encode_feature_set(features: LocalFeatureSet) -> bytes:
    width, height = features.image_size
    header = _HEADER.pack(
        FEATURE_MAGIC, FEATURE_VERSION, features.num_keypoints, features.descriptor_dim, width, height
    )
    keypoints = features.keypoints.astype("<f4").tobytes()
    descriptors = features.descriptors.astype("<f4").tobytes()
    return header + keypoints + descriptors


def decode_feature_set(blob: bytes) -> LocalFeatureSet:
    if len(blob) < _HEADER.size:
        raise FeatureError(f"feature file truncated: {len(blob)} bytes")
    magic, version, count, dim, width, height = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FeatureError(f"bad feature file magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise FeatureError(f"unsupported feature file version {version}")
    expected = _HEADER.size + 4 * (count * 3 + count * dim)
    if len(blob) != expected:
        raise FeatureError(f"feature file has {len(blob)} bytes, expected {expected}")
    offset = _HEADER.size
    keypoints = np.frombuffer(blob, dtype="<f4", count=count * 3, offset=offset).reshape(count, 3)
    offset += 4 * count * 3
    descriptors = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=offset).reshape(count, dim)
    return LocalFeatureSet((width, height), keypoints.astype(np.float64), descriptors.astype(np.float64))


def feature_set_to_json(features: LocalFeatureSet) -> dict:
    return {
        "image_size": list(features.image_size),
        "keypoints": features.keypoints.tolist(),
        "descriptors": features.descriptors.tolist(),
    }


def feature_set_from_json(data: dict) -> LocalFeatureSet:
    try:
        keypoints = np.array(data["keypoints"], dtype=np.float64).reshape(-1, 3)
        descriptors = np.array(data["descriptors"], dtype=np.float64)
        if descriptors.size == 0:
            descriptors = descriptors.reshape(len(keypoints), -1) if len(keypoints) else np.zeros((0, 0))
        return LocalFeatureSet(tuple(data["image_size"]), keypoints, descriptors)
    except (KeyError, ValueError, TypeError) as exc:
        raise FeatureError(f"malformed feature JSON: {exc}") from exc


def save_feature_set(features: LocalFeatureSet, path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    if path.lower().endswith(".json"):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(feature_set_to_json(features), f, indent=2)
    else:
        with open(path, "wb") as f:
            f.write(encode_feature_set(features))
    logger.debug("Feature set saved to %s", path)
    return path


def load_feature_set(path: str) -> LocalFeatureSet:
    if not os.path.exists(path):
        raise FeatureError(f"feature file not found: {path}")
    if path.lower().endswith(".json"):
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as exc:
                raise FeatureError(f"malformed feature JSON in {path}: {exc}") from exc
        return feature_set_from_json(data)
    with open(path, "rb") as f:
        return decode_feature_set(f.read())
