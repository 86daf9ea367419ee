"""
Synthgen Module
Planar-scene generator: random homographies, warped keypoints with noisy
descriptors, and ground-truth correspondence labels.
"""
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from modules.errors import GeometryError
from modules.features import LocalFeatureSet

logger = logging.getLogger(__name__)

INFINITY_EPS = 1e-12
_UNIT_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
_GRID = np.stack(np.meshgrid(np.linspace(0.0, 1.0, 21), np.linspace(0.0, 1.0, 21)), axis=-1).reshape(-1, 2)


class Homography:
    """3x3 projective transform, scaled so h[2][2] = 1 when that entry is nonzero."""

    __slots__ = ("matrix",)

    def __init__(self, matrix):
        matrix = np.array(matrix, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(matrix)):
            raise GeometryError("homography has non-finite entries")
        if abs(matrix[2, 2]) > INFINITY_EPS:
            matrix = matrix / matrix[2, 2]
        if abs(np.linalg.det(matrix)) <= 1e-12:
            raise GeometryError(f"homography is singular (det={np.linalg.det(matrix):.3e})")
        matrix.setflags(write=False)
        self.matrix = matrix

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def to_list(self) -> List[float]:
        return [float(v) for v in self.matrix.ravel()]

    def __repr__(self) -> str:
        return f"Homography({self.matrix.round(6).tolist()})"


def warp_points(h: Homography, points: np.ndarray) -> np.ndarray:
    """Apply h to an (K, 2) array of points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    m = h.matrix
    w = points @ m[2, :2] + m[2, 2]
    if np.any(np.abs(w) <= INFINITY_EPS):
        bad = int(np.argmax(np.abs(w) <= INFINITY_EPS))
        raise GeometryError(f"point {points[bad].tolist()} maps to infinity")
    x = (points @ m[0, :2] + m[0, 2]) / w
    y = (points @ m[1, :2] + m[1, 2]) / w
    return np.stack([x, y], axis=1)


def apply_homography(h: Homography, point: Tuple[float, float]) -> Tuple[float, float]:
    x, y = warp_points(h, np.array([point]))[0]
    return float(x), float(y)


def homography_from_corners(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Exact 4-point solve of the 8-unknown system (h22 fixed to 1)."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(source, target):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.extend([u, v])
    try:
        solution = np.linalg.solve(np.array(rows), np.array(rhs))
    except np.linalg.LinAlgError as exc:
        raise GeometryError(f"degenerate corner configuration: {exc}") from exc
    return np.append(solution, 1.0).reshape(3, 3)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HomographyConfig:
    """Ranges relative to the image: translations and jitter are fractions of width/height."""

    rotation_deg: Tuple[float, float] = (-25.0, 25.0)
    scale: Tuple[float, float] = (0.8, 1.25)
    translation_x: Tuple[float, float] = (-0.2, 0.2)
    translation_y: Tuple[float, float] = (-0.2, 0.2)
    perspective: float = 0.1
    min_in_frame: float = 0.5
    max_retries: int = 100

    def __post_init__(self):
        for name in ("rotation_deg", "scale", "translation_x", "translation_y"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise GeometryError(f"empty range for {name}: ({lo}, {hi})")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.scale[0] <= 0:
            raise GeometryError("scale range must be positive")
        if self.perspective < 0 or self.max_retries < 1:
            raise GeometryError("perspective must be >= 0 and max_retries >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "HomographyConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


def _in_frame_fraction(unit_h: np.ndarray) -> float:
    m = unit_h
    w = _GRID @ m[2, :2] + m[2, 2]
    if np.any(w <= INFINITY_EPS):
        return 0.0
    x = (_GRID @ m[0, :2] + m[0, 2]) / w
    y = (_GRID @ m[1, :2] + m[1, 2]) / w
    return float(np.mean((x >= 0) & (x <= 1) & (y >= 0) & (y <= 1)))


def _sample_unit(rng: np.random.Generator, config: HomographyConfig) -> np.ndarray:
    jitter = rng.uniform(-config.perspective, config.perspective, size=(4, 2)) if config.perspective else np.zeros((4, 2))
    perspective = homography_from_corners(_UNIT_CORNERS, _UNIT_CORNERS + jitter)
    angle = np.deg2rad(rng.uniform(*config.rotation_deg))
    scale = rng.uniform(*config.scale)
    tx = rng.uniform(*config.translation_x)
    ty = rng.uniform(*config.translation_y)
    c, s = np.cos(angle), np.sin(angle)
    to_center = np.array([[1, 0, -0.5], [0, 1, -0.5], [0, 0, 1]], dtype=np.float64)
    from_center = np.array([[1, 0, 0.5 + tx], [0, 1, 0.5 + ty], [0, 0, 1]], dtype=np.float64)
    rotation_scale = np.array([[scale * c, -scale * s, 0], [scale * s, scale * c, 0], [0, 0, 1]])
    return from_center @ rotation_scale @ to_center @ perspective


def sample_homography(
    rng: np.random.Generator, config: HomographyConfig, image_size: Tuple[float, float] = (1.0, 1.0)
) -> Homography:
    """
    Translation . rotation . scale . perspective jitter about the image center,
    resampled until at least min_in_frame of the image stays in frame.
    """
    width, height = image_size
    to_pixels = np.diag([width, height, 1.0])
    to_unit = np.diag([1.0 / width, 1.0 / height, 1.0])
    for _ in range(config.max_retries):
        unit = _sample_unit(rng, config)
        if abs(np.linalg.det(unit)) <= 1e-12:
            continue
        if _in_frame_fraction(unit) < config.min_in_frame:
            continue
        return Homography(to_pixels @ unit @ to_unit)
    raise GeometryError(f"no admissible homography after {config.max_retries} retries")


# ---------------------------------------------------------------------------
# labels and scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroundTruthLabels:
    matches: Tuple[Tuple[int, int], ...]
    unmatched_a: Tuple[int, ...]
    unmatched_b: Tuple[int, ...]

    @property
    def match_set(self) -> set:
        return set(self.matches)

    def to_dict(self) -> dict:
        return {
            "matches": [list(m) for m in self.matches],
            "unmatched_a": list(self.unmatched_a),
            "unmatched_b": list(self.unmatched_b),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruthLabels":
        return cls(
            tuple((int(i), int(j)) for i, j in data["matches"]),
            tuple(int(i) for i in data["unmatched_a"]),
            tuple(int(j) for j in data["unmatched_b"]),
        )


@dataclass(frozen=True, eq=False)
class TrainingPair:
    features_a: LocalFeatureSet
    features_b: LocalFeatureSet
    labels: GroundTruthLabels
    homography: Homography


def reprojection_errors(features_a: LocalFeatureSet, features_b: LocalFeatureSet, h: Homography) -> np.ndarray:
    """e(i, j) = max(|h(p_i) - p_j|, |p_i - h^-1(p_j)|)."""
    forward = warp_points(h, features_a.positions)
    backward = warp_points(h.inverse(), features_b.positions)
    e_forward = np.linalg.norm(forward[:, None, :] - features_b.positions[None, :, :], axis=-1)
    e_backward = np.linalg.norm(features_a.positions[:, None, :] - backward[None, :, :], axis=-1)
    return np.maximum(e_forward, e_backward)


def _strict_argmin(errors: np.ndarray, axis: int) -> np.ndarray:
    """Index of the unique minimum along axis, -1 where the minimum is tied."""
    best = errors.argmin(axis=axis)
    minimum = errors.min(axis=axis, keepdims=True)
    ties = (errors == minimum).sum(axis=axis)
    return np.where(ties == 1, best, -1)


def label_correspondences(
    features_a: LocalFeatureSet,
    features_b: LocalFeatureSet,
    h: Homography,
    match_threshold: float = 3.0,
    unmatched_threshold: float = 3.0,
) -> GroundTruthLabels:
    """
    Mutual strict minima of the reprojection-error matrix below match_threshold
    are matches. Keypoints without a match whose nearest reprojection exceeds
    unmatched_threshold are unmatched; the rest carry no label. When both
    thresholds are equal there is no ambiguous band and every keypoint without
    a match is unmatched.
    """
    if match_threshold > unmatched_threshold:
        raise GeometryError("match_threshold must not exceed unmatched_threshold")
    m, n = features_a.num_keypoints, features_b.num_keypoints
    if m == 0 or n == 0:
        return GroundTruthLabels((), tuple(range(m)), tuple(range(n)))

    errors = reprojection_errors(features_a, features_b, h)
    row_best = _strict_argmin(errors, axis=1)
    col_best = _strict_argmin(errors, axis=0)
    matches = []
    for i, j in enumerate(row_best):
        if j >= 0 and col_best[j] == i and errors[i, j] < match_threshold:
            matches.append((i, int(j)))
    matched_a = {i for i, _ in matches}
    matched_b = {j for _, j in matches}
    no_band = unmatched_threshold <= match_threshold
    row_min, col_min = errors.min(axis=1), errors.min(axis=0)
    unmatched_a = tuple(i for i in range(m) if i not in matched_a and (no_band or row_min[i] > unmatched_threshold))
    unmatched_b = tuple(j for j in range(n) if j not in matched_b and (no_band or col_min[j] > unmatched_threshold))
    return GroundTruthLabels(tuple(matches), unmatched_a, unmatched_b)


@dataclass(frozen=True)
class SceneConfig:
    """
    descriptor_noise is the expected norm of the Gaussian perturbation of a
    unit descriptor (per-component std descriptor_noise / sqrt(D)).
    repeated_distractors is the share of distractors that copy the
    descriptor of a real keypoint of the same image, perturbed the same way.
    """

    num_points: int = 50
    image_size: Tuple[float, float] = (640.0, 480.0)
    descriptor_dim: int = 32
    descriptor_noise: float = 0.1
    dropout_rate: float = 0.2
    num_distractors: int = 10
    repeated_distractors: float = 0.0
    match_threshold: float = 3.0
    unmatched_threshold: float = 3.0
    homography: HomographyConfig = field(default_factory=HomographyConfig)

    def __post_init__(self):
        if self.num_points < 1 or self.descriptor_dim < 1:
            raise GeometryError("num_points and descriptor_dim must be >= 1")
        if not (0.0 <= self.dropout_rate <= 1.0):
            raise GeometryError(f"dropout_rate must lie in [0, 1], got {self.dropout_rate}")
        if not (0.0 <= self.repeated_distractors <= 1.0):
            raise GeometryError(f"repeated_distractors must lie in [0, 1], got {self.repeated_distractors}")
        if self.descriptor_noise < 0 or self.num_distractors < 0:
            raise GeometryError("descriptor_noise and num_distractors must be non-negative")
        object.__setattr__(self, "image_size", (float(self.image_size[0]), float(self.image_size[1])))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        data = dict(data)
        if "homography" in data and isinstance(data["homography"], dict):
            data["homography"] = HomographyConfig.from_dict(data["homography"])
        if "image_size" in data:
            data["image_size"] = tuple(data["image_size"])
        return cls(**data)


def _unit_rows(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    rows = rng.standard_normal((count, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _random_keypoints(rng: np.random.Generator, count: int, width: float, height: float) -> np.ndarray:
    return np.stack([
        rng.uniform(0.0, width, count),
        rng.uniform(0.0, height, count),
        rng.uniform(0.0, 1.0, count),
    ], axis=1)


def _perturbed(rng: np.random.Generator, descriptors: np.ndarray, noise: float) -> np.ndarray:
    dim = descriptors.shape[1]
    noisy = descriptors + (noise / np.sqrt(dim)) * rng.standard_normal(descriptors.shape)
    return noisy / np.linalg.norm(noisy, axis=1, keepdims=True)


def _distractor_descriptors(rng: np.random.Generator, sources: np.ndarray, config: SceneConfig) -> np.ndarray:
    """Fresh unit descriptors, a repeated_distractors share of them replaced by perturbed copies of sources."""
    descriptors = _unit_rows(rng, config.num_distractors, config.descriptor_dim)
    repeats = int(round(config.repeated_distractors * config.num_distractors))
    if repeats and len(sources):
        slots = rng.permutation(config.num_distractors)[:repeats]
        picks = rng.integers(0, len(sources), size=repeats)
        descriptors[slots] = _perturbed(rng, sources[picks], config.descriptor_noise)
    return descriptors


def generate_scene(rng: np.random.Generator, config: SceneConfig) -> TrainingPair:
    width, height = config.image_size
    h = sample_homography(rng, config.homography, config.image_size)

    keypoints_a = _random_keypoints(rng, config.num_points, width, height)
    descriptors_a = _unit_rows(rng, config.num_points, config.descriptor_dim)

    warped = warp_points(h, keypoints_a[:, :2])
    in_frame = np.flatnonzero(
        (warped[:, 0] >= 0) & (warped[:, 0] < width) & (warped[:, 1] >= 0) & (warped[:, 1] < height)
    )
    keypoints_b = np.column_stack([warped[in_frame], rng.uniform(0.0, 1.0, in_frame.size)])
    descriptors_b = _perturbed(rng, descriptors_a[in_frame], config.descriptor_noise)

    # drop a fraction of true correspondences from a random side
    keep_a = np.ones(config.num_points, dtype=bool)
    keep_b = np.ones(in_frame.size, dtype=bool)
    dropped = rng.permutation(in_frame.size)[: int(round(config.dropout_rate * in_frame.size))]
    sides = rng.integers(0, 2, size=dropped.size)
    for k, side in zip(dropped, sides):
        if side == 0:
            keep_a[in_frame[k]] = False
        else:
            keep_b[k] = False

    keypoints_a = np.vstack([keypoints_a[keep_a], _random_keypoints(rng, config.num_distractors, width, height)])
    descriptors_a = np.vstack([descriptors_a[keep_a], _distractor_descriptors(rng, descriptors_a[keep_a], config)])
    keypoints_b = np.vstack([keypoints_b[keep_b], _random_keypoints(rng, config.num_distractors, width, height)])
    descriptors_b = np.vstack([descriptors_b[keep_b], _distractor_descriptors(rng, descriptors_b[keep_b], config)])
    if len(keypoints_a) == 0 or len(keypoints_b) == 0:
        raise GeometryError(f"scene has no keypoints left ({len(keypoints_a)} in A, {len(keypoints_b)} in B)")

    order = rng.permutation(len(keypoints_b))
    features_a = LocalFeatureSet(config.image_size, keypoints_a, descriptors_a)
    features_b = LocalFeatureSet(config.image_size, keypoints_b[order], descriptors_b[order])
    labels = label_correspondences(features_a, features_b, h, config.match_threshold, config.unmatched_threshold)
    return TrainingPair(features_a, features_b, labels, h)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def pair_rng(master_seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator per pair, so serial and parallel generation agree."""
    return np.random.default_rng(np.random.SeedSequence([master_seed, stream, index]))


@dataclass(frozen=True)
class DatasetManifest:
    """Regenerable dataset: pair k is generate_scene(pair_rng(master_seed, k, stream))."""

    num_pairs: Optional[int]
    master_seed: int
    config: SceneConfig
    stream: int = 0

    def pair(self, index: int) -> TrainingPair:
        if self.num_pairs is not None and not (0 <= index < self.num_pairs):
            raise IndexError(f"pair {index} outside manifest of {self.num_pairs}")
        return generate_scene(pair_rng(self.master_seed, index, self.stream), self.config)

    def __iter__(self) -> Iterator[TrainingPair]:
        index = 0
        while self.num_pairs is None or index < self.num_pairs:
            yield self.pair(index)
            index += 1

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "num_pairs": self.num_pairs,
            "master_seed": self.master_seed,
            "stream": self.stream,
            "config": self.config.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        return cls(data["num_pairs"], int(data["master_seed"]), SceneConfig.from_dict(data["config"]), int(data.get("stream", 0)))


def _generate_one(args) -> TrainingPair:
    manifest, index = args
    return manifest.pair(index)


def generate_pairs(manifest: DatasetManifest, indices: Sequence[int], jobs: int = 1) -> List[TrainingPair]:
    """Generate pairs in index order, fanning out to worker processes when jobs > 1."""
    tasks = [(manifest, i) for i in indices]
    if jobs <= 1 or len(tasks) < 2:
        return [_generate_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_generate_one, tasks))
