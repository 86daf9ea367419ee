"""
Evaluation Module
Homography estimation from matches (normalized DLT and RANSAC), corner
error and exact AUC, nearest-neighbor baseline matchers, and the
attention-span diagnostic.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from modules.errors import ConfigError, GeometryError, MatchingError, RecordingError
from modules.exporter import clean_records, records_table
from modules.features import LocalFeatureSet
from modules.gnn import EDGE_CROSS, EDGE_SELF, LayerAttention
from modules.matcher import MatchSet
from modules.model import Model, match_pair
from modules.synthgen import INFINITY_EPS, Homography, TrainingPair, reprojection_errors, warp_points
from modules.training import PRMetrics, evaluate_pr, pair_metrics

logger = logging.getLogger(__name__)

RANSAC_ITERATIONS = 3000
RANSAC_THRESHOLD = 3.0
AUC_THRESHOLD = 10.0
CORRECTNESS_THRESHOLDS = (1.0, 3.0, 5.0)


# ---------------------------------------------------------------------------
# error curves
# ---------------------------------------------------------------------------

@dataclass
class ErrorCurve:
    """Per-pair errors in pixels; failed estimates are +inf."""

    errors: np.ndarray
    threshold: float = AUC_THRESHOLD

    def __post_init__(self):
        errors = np.asarray(self.errors, dtype=np.float64).ravel()
        if np.any(np.isnan(errors)) or np.any(errors < 0):
            raise GeometryError("errors must be non-negative")
        self.errors = np.sort(errors)

    def auc(self, max_threshold: Optional[float] = None) -> float:
        return auc(self, self.threshold if max_threshold is None else max_threshold)


def auc(curve: Union[ErrorCurve, Sequence[float]], max_threshold: float = AUC_THRESHOLD) -> float:
    """
    Area under the cumulative error distribution on [0, max_threshold],
    divided by max_threshold. The step function integrates in closed form:
    each error e contributes max(0, 1 - e / max_threshold).
    """
    if max_threshold <= 0:
        raise GeometryError(f"AUC threshold must be positive, got {max_threshold}")
    errors = curve.errors if isinstance(curve, ErrorCurve) else ErrorCurve(curve).errors
    if errors.size == 0:
        raise GeometryError("cannot integrate an empty error curve")
    return float(np.mean(np.clip(1.0 - errors / max_threshold, 0.0, 1.0)))


# ---------------------------------------------------------------------------
# homography estimation
# ---------------------------------------------------------------------------

@dataclass
class HomographyEstimate:
    homography: Homography
    inliers: Tuple[int, ...]
    method: str


def _as_points(points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise GeometryError(f"expected (K, 2) points, got shape {points.shape}")
    return points


def hartley_normalization(points: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2)."""
    center = points.mean(axis=0)
    spread = np.linalg.norm(points - center, axis=1).mean()
    if spread <= INFINITY_EPS:
        raise GeometryError("degenerate configuration: all points coincide")
    s = np.sqrt(2.0) / spread
    return np.array([[s, 0.0, -s * center[0]], [0.0, s, -s * center[1]], [0.0, 0.0, 1.0]])


def _apply(t: np.ndarray, points: np.ndarray) -> np.ndarray:
    return points @ t[:2, :2].T + t[:2, 2]


def _constraint_rows(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    ones, zeros = np.ones_like(x), np.zeros_like(x)
    a = np.zeros((2 * len(src), 9))
    a[0::2] = np.stack([x, y, ones, zeros, zeros, zeros, -u * x, -u * y, -u], axis=1)
    a[1::2] = np.stack([zeros, zeros, zeros, x, y, ones, -v * x, -v * y, -v], axis=1)
    return a


def dlt_homography(src, dst) -> Homography:
    """Normalized DLT; the solution is the smallest eigenvector of A^T A."""
    src, dst = _as_points(src), _as_points(dst)
    if len(src) != len(dst):
        raise GeometryError(f"{len(src)} source points but {len(dst)} targets")
    if len(src) < 4:
        raise GeometryError(f"DLT needs at least 4 correspondences, got {len(src)}")
    t_src, t_dst = hartley_normalization(src), hartley_normalization(dst)
    a = _constraint_rows(_apply(t_src, src), _apply(t_dst, dst))
    eigenvalues, eigenvectors = np.linalg.eigh(a.T @ a)
    if eigenvalues[1] <= 1e-10 * max(eigenvalues[-1], 1.0):
        raise GeometryError("degenerate configuration: constraint system is rank deficient")
    h = eigenvectors[:, 0].reshape(3, 3)
    matrix = np.linalg.inv(t_dst) @ h @ t_src
    if abs(matrix[2, 2]) <= INFINITY_EPS:
        raise GeometryError("estimated homography has h[2][2] = 0")
    return Homography(matrix)


def _project(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Like warp_points, but points at infinity come back as inf."""
    w = points @ matrix[2, :2] + matrix[2, 2]
    out = np.full(points.shape, np.inf)
    ok = np.abs(w) > INFINITY_EPS
    out[ok, 0] = (points[ok] @ matrix[0, :2] + matrix[0, 2]) / w[ok]
    out[ok, 1] = (points[ok] @ matrix[1, :2] + matrix[1, 2]) / w[ok]
    return out


def transfer_errors(h: Homography, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Symmetric transfer error: mean of the forward and backward reprojection distances."""
    forward = np.linalg.norm(_project(h.matrix, src) - dst, axis=1)
    backward = np.linalg.norm(_project(np.linalg.inv(h.matrix), dst) - src, axis=1)
    return 0.5 * (forward + backward)


def ransac_homography(
    src,
    dst,
    iterations: int = RANSAC_ITERATIONS,
    inlier_threshold: float = RANSAC_THRESHOLD,
    rng: Union[int, np.random.Generator, None] = 0,
) -> HomographyEstimate:
    src, dst = _as_points(src), _as_points(dst)
    if len(src) != len(dst):
        raise GeometryError(f"{len(src)} source points but {len(dst)} targets")
    if len(src) < 4:
        raise GeometryError(f"RANSAC needs at least 4 correspondences, got {len(src)}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    best: Optional[np.ndarray] = None
    for _ in range(iterations):
        sample = rng.choice(len(src), size=4, replace=False)
        try:
            candidate = dlt_homography(src[sample], dst[sample])
        except GeometryError:
            continue
        inliers = transfer_errors(candidate, src, dst) < inlier_threshold
        if best is None or inliers.sum() > best.sum():
            best = inliers
    if best is None or best.sum() < 4:
        raise GeometryError("RANSAC found no model with at least 4 inliers")

    refit = dlt_homography(src[best], dst[best])
    inliers = np.flatnonzero(transfer_errors(refit, src, dst) < inlier_threshold)
    return HomographyEstimate(refit, tuple(int(i) for i in inliers), "ransac")


def image_corners(image_size: Tuple[float, float]) -> np.ndarray:
    width, height = image_size
    return np.array([[0.0, 0.0], [width - 1.0, 0.0], [0.0, height - 1.0], [width - 1.0, height - 1.0]])


def corner_error(h_est: Homography, h_true: Homography, image_size: Tuple[float, float]) -> float:
    corners = image_corners(image_size)
    return float(np.linalg.norm(warp_points(h_est, corners) - warp_points(h_true, corners), axis=1).mean())


# ---------------------------------------------------------------------------
# nearest-neighbor baselines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NNFilter:
    kind: str
    value: Optional[float] = None

    KINDS = ("none", "mutual", "ratio", "distance")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown nearest-neighbor filter {self.kind!r}")
        if self.kind in ("ratio", "distance") and (self.value is None or self.value <= 0):
            raise ConfigError(f"{self.kind} filter needs a positive value")

    @classmethod
    def parse(cls, text: str) -> "NNFilter":
        """'mutual', 'ratio:0.8' or 'distance:0.7'."""
        kind, _, value = text.partition(":")
        try:
            return cls(kind, float(value) if value else None)
        except ValueError as exc:
            raise ConfigError(f"bad filter value in {text!r}") from exc


def nn_match(desc_a, desc_b, filters: Sequence[Union[str, NNFilter]] = ()) -> MatchSet:
    """
    Nearest neighbor of every A descriptor in B by Euclidean distance, then
    every filter in turn. Confidence is 1 - d1 / (d1 + d2).
    """
    desc_a = np.asarray(desc_a, dtype=np.float64)
    desc_b = np.asarray(desc_b, dtype=np.float64)
    m, n = len(desc_a), len(desc_b)
    if m == 0 or n == 0:
        return MatchSet.from_matches([], m, n)
    if desc_a.shape[1] != desc_b.shape[1]:
        raise MatchingError(f"descriptor widths differ: {desc_a.shape[1]} vs {desc_b.shape[1]}")
    filters = [f if isinstance(f, NNFilter) else NNFilter.parse(f) for f in filters]

    distances = np.linalg.norm(desc_a[:, None, :] - desc_b[None, :, :], axis=-1)
    nearest = distances.argmin(axis=1)
    rows = np.arange(m)
    d1 = distances[rows, nearest]
    if n > 1:
        d2 = np.partition(distances, 1, axis=1)[:, 1]
    else:
        d2 = np.full(m, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(d2 > 0, d1 / d2, 1.0)
        confidence = np.where(d1 + d2 > 0, 1.0 - d1 / (d1 + d2), 0.5)
    confidence = np.clip(confidence, np.finfo(np.float64).tiny, 1.0)

    keep = np.ones(m, dtype=bool)
    for f in filters:
        if f.kind == "mutual":
            keep &= distances.argmin(axis=0)[nearest] == rows
        elif f.kind == "ratio":
            keep &= ratio < f.value
        elif f.kind == "distance":
            keep &= d1 < f.value
    return MatchSet.from_matches(
        [(i, int(nearest[i]), float(confidence[i])) for i in np.flatnonzero(keep)], m, n
    )


# ---------------------------------------------------------------------------
# attention span
# ---------------------------------------------------------------------------

@dataclass
class LayerSpan:
    layer: int
    edge_type: str
    span: Optional[float]
    per_head: List[Optional[float]] = field(default_factory=list)


def _self_span(weights: np.ndarray, positions: np.ndarray) -> np.ndarray:
    distances = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)
    return (weights * distances).sum(axis=1)


def _cross_span(weights: np.ndarray, anchors: np.ndarray, sources: np.ndarray) -> np.ndarray:
    distances = np.linalg.norm(anchors[:, None, :] - sources[None, :, :], axis=-1)
    return (weights * distances).sum(axis=1)


def attention_span(
    attention: Optional[List[LayerAttention]],
    positions_a: np.ndarray,
    positions_b: np.ndarray,
    matches: Optional[MatchSet] = None,
) -> List[LayerSpan]:
    """
    Attention-weighted pixel distance per block, minimum over heads. Self
    blocks measure from the query itself over the queries of both images;
    cross blocks measure from the query's predicted match, over matched
    queries only.
    """
    if attention is None:
        raise RecordingError("attention was not recorded; run the forward pass with recording enabled")
    positions_a = np.asarray(positions_a, dtype=np.float64)
    positions_b = np.asarray(positions_b, dtype=np.float64)
    pairs = sorted(matches.pairs) if matches is not None else []
    rows_a = np.array([i for i, _ in pairs], dtype=int)
    rows_b = np.array([j for _, j in pairs], dtype=int)

    spans = []
    for record in attention:
        per_head: List[Optional[float]] = []
        for w_a, w_b in zip(record.weights_a, record.weights_b):
            if record.edge_type == EDGE_SELF:
                values = np.concatenate([_self_span(w_a, positions_a), _self_span(w_b, positions_b)])
            elif record.edge_type == EDGE_CROSS:
                # an A query attends B; distances are measured from its match in B
                values = np.concatenate([
                    _cross_span(w_a[rows_a], positions_b[rows_b], positions_b),
                    _cross_span(w_b[rows_b], positions_a[rows_a], positions_a),
                ])
            else:
                raise RecordingError(f"unknown edge type {record.edge_type!r}")
            per_head.append(float(values.mean()) if values.size else None)
        present = [s for s in per_head if s is not None]
        spans.append(LayerSpan(record.layer, record.edge_type, min(present) if present else None, per_head))
    return spans


# ---------------------------------------------------------------------------
# homography benchmark
# ---------------------------------------------------------------------------

Matcher = Callable[[LocalFeatureSet, LocalFeatureSet], MatchSet]
MATCHERS = ("superglue", "nn", "nn-mutual", "nn-ratio", "nn-distance-mutual")


def make_matcher(
    name: str,
    model: Optional[Model] = None,
    threshold: Optional[float] = None,
    ratio: float = 0.8,
    distance: float = 0.7,
) -> Matcher:
    if name == "superglue":
        if model is None:
            raise ConfigError("the superglue matcher needs a model")
        return lambda a, b: match_pair(model, a, b, threshold).matches
    filters = {
        "nn": [],
        "nn-mutual": [NNFilter("mutual")],
        "nn-ratio": [NNFilter("ratio", ratio)],
        "nn-distance-mutual": [NNFilter("distance", distance), NNFilter("mutual")],
    }
    if name not in filters:
        raise ConfigError(f"unknown matcher {name!r}; expected one of {MATCHERS}")
    chosen = filters[name]
    return lambda a, b: nn_match(a.descriptors, b.descriptors, chosen)


def precision_at_thresholds(
    pairs: Sequence[TrainingPair],
    predictions: Sequence[MatchSet],
    thresholds: Sequence[float] = CORRECTNESS_THRESHOLDS,
) -> Dict[float, float]:
    """Mean precision where a match is correct if its true reprojection error is below the threshold."""
    out = {}
    errors = [reprojection_errors(p.features_a, p.features_b, p.homography) for p in pairs]
    for threshold in thresholds:
        values = []
        for pair, predicted, e in zip(pairs, predictions, errors):
            if len(predicted) == 0:
                values.append(1.0 if not pair.labels.matches else 0.0)
                continue
            correct = sum(1 for m in predicted.matches if e[m.i, m.j] < threshold)
            values.append(correct / len(predicted))
        out[float(threshold)] = float(np.mean(values)) if values else 0.0
    return out


def _estimate(pair: TrainingPair, matches: MatchSet, index: int, seed: int,
              iterations: int, threshold: float) -> Dict[str, object]:
    src = pair.features_a.positions[[m.i for m in matches.matches]].reshape(-1, 2)
    dst = pair.features_b.positions[[m.j for m in matches.matches]].reshape(-1, 2)
    size = pair.features_a.image_size
    row: Dict[str, object] = {"pair": index, "num_matches": len(matches)}
    row["precision"], row["recall"], row["matching_score"] = pair_metrics(
        matches, pair.labels, pair.features_a.num_keypoints
    )
    try:
        estimate = ransac_homography(src, dst, iterations, threshold, np.random.default_rng([seed, index]))
        row["corner_error_ransac"] = corner_error(estimate.homography, pair.homography, size)
        row["inliers"] = len(estimate.inliers)
    except GeometryError as exc:
        logger.debug("pair %d: RANSAC failed: %s", index, exc)
        row["corner_error_ransac"] = np.inf
        row["inliers"] = 0
    try:
        row["corner_error_dlt"] = corner_error(dlt_homography(src, dst), pair.homography, size)
    except GeometryError as exc:
        logger.debug("pair %d: DLT failed: %s", index, exc)
        row["corner_error_dlt"] = np.inf
    return row


@dataclass
class EvaluationReport:
    num_pairs: int
    auc_ransac: float
    auc_dlt: float
    metrics: PRMetrics
    precision_at: Dict[float, float]
    per_pair: pd.DataFrame

    def to_dict(self) -> dict:
        return {
            "num_pairs": self.num_pairs,
            "auc_ransac": self.auc_ransac,
            "auc_dlt": self.auc_dlt,
            "precision": self.metrics.precision,
            "recall": self.metrics.recall,
            "matching_score": self.metrics.matching_score,
            "precision_at": {str(k): v for k, v in self.precision_at.items()},
            "per_pair": clean_records(self.per_pair.to_dict(orient="records")),
        }


def evaluate_homography(
    pairs: Sequence[TrainingPair],
    matcher: Matcher,
    iterations: int = RANSAC_ITERATIONS,
    inlier_threshold: float = RANSAC_THRESHOLD,
    auc_threshold: float = AUC_THRESHOLD,
    seed: int = 0,
    jobs: int = 1,
) -> EvaluationReport:
    if not pairs:
        raise ConfigError("no pairs to evaluate")
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        predictions = list(pool.map(lambda p: matcher(p.features_a, p.features_b), pairs))
        rows = list(pool.map(
            lambda k: _estimate(pairs[k], predictions[k], k, seed, iterations, inlier_threshold),
            range(len(pairs)),
        ))
    metrics = evaluate_pr(predictions, [p.labels for p in pairs], [p.features_a.num_keypoints for p in pairs])
    table = records_table(rows)
    report = EvaluationReport(
        len(pairs),
        auc(ErrorCurve(table["corner_error_ransac"].to_numpy()), auc_threshold),
        auc(ErrorCurve(table["corner_error_dlt"].to_numpy()), auc_threshold),
        metrics,
        precision_at_thresholds(pairs, predictions),
        table,
    )
    logger.info(
        "Evaluated %d pairs: AUC ransac %.3f dlt %.3f, precision %.3f recall %.3f",
        report.num_pairs, report.auc_ransac, report.auc_dlt, metrics.precision, metrics.recall,
    )
    return report
