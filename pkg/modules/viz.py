"""
Viz Module
Static SVG renderings: side-by-side matches, and the attention rays of one
keypoint through the blocks of the GNN. Output is a pure function of the
inputs, so fixtures can be compared byte for byte.
"""
import logging
import os
from typing import List, Optional, Sequence

import numpy as np

from modules.errors import MatchingError, RecordingError
from modules.features import LocalFeatureSet
from modules.gnn import EDGE_SELF, LayerAttention
from modules.matcher import MatchSet
from modules.synthgen import GroundTruthLabels

logger = logging.getLogger(__name__)

GAP = 20.0
CORRECT = "#2ca02c"
WRONG = "#d62728"
KEYPOINT = "#1f77b4"
QUERY = "#000000"
SELF_RAY = "#ff7f0e"
CROSS_RAY = "#9467bd"


def confidence_color(confidence: float) -> str:
    """Red at 0 through yellow to green at 1."""
    c = float(np.clip(confidence, 0.0, 1.0))
    red = int(round(255 * min(1.0, 2.0 * (1.0 - c))))
    green = int(round(255 * min(1.0, 2.0 * c)))
    return f"#{red:02x}{green:02x}00"


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def _svg_open(width: float, height: float) -> List[str]:
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(width)}" height="{_fmt(height)}" '
        f'viewBox="0 0 {_fmt(width)} {_fmt(height)}">',
    ]


def _pair_frame(features_a: LocalFeatureSet, features_b: LocalFeatureSet, top: float = 0.0) -> List[str]:
    """Both image outlines and every keypoint, B shifted right of A."""
    width_a, height_a = features_a.image_size
    width_b, height_b = features_b.image_size
    offset = width_a + GAP
    lines = [
        f'<rect x="0" y="{_fmt(top)}" width="{_fmt(width_a)}" height="{_fmt(height_a)}" fill="none" stroke="#888888"/>',
        f'<rect x="{_fmt(offset)}" y="{_fmt(top)}" width="{_fmt(width_b)}" height="{_fmt(height_b)}" '
        f'fill="none" stroke="#888888"/>',
    ]
    for x, y in features_a.positions:
        lines.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y + top)}" r="2" fill="{KEYPOINT}"/>')
    for x, y in features_b.positions:
        lines.append(f'<circle cx="{_fmt(x + offset)}" cy="{_fmt(y + top)}" r="2" fill="{KEYPOINT}"/>')
    return lines


def render_matches_svg(
    features_a: LocalFeatureSet,
    features_b: LocalFeatureSet,
    matches: MatchSet,
    labels: Optional[GroundTruthLabels] = None,
) -> str:
    m, n = features_a.num_keypoints, features_b.num_keypoints
    for match in matches.matches:
        if not (0 <= match.i < m and 0 <= match.j < n):
            raise MatchingError(f"match ({match.i}, {match.j}) out of bounds for {m} x {n} keypoints")

    width_a, height_a = features_a.image_size
    width_b, height_b = features_b.image_size
    offset = width_a + GAP
    truth = labels.match_set if labels is not None else None

    lines = _svg_open(offset + width_b, max(height_a, height_b))
    lines += _pair_frame(features_a, features_b)
    for match in matches.matches:
        if truth is not None:
            color = CORRECT if (match.i, match.j) in truth else WRONG
        else:
            color = confidence_color(match.confidence)
        xa, ya = features_a.positions[match.i]
        xb, yb = features_b.positions[match.j]
        lines.append(
            f'<line x1="{_fmt(xa)}" y1="{_fmt(ya)}" x2="{_fmt(xb + offset)}" y2="{_fmt(yb)}" '
            f'stroke="{color}" stroke-width="1"/>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def _query_weights(record: LayerAttention, image: str, query: int, head: Optional[int]) -> np.ndarray:
    per_head = record.weights_a if image == "a" else record.weights_b
    if not per_head:
        raise RecordingError(f"block {record.layer} holds no attention weights")
    if head is not None and not (0 <= head < len(per_head)):
        raise RecordingError(f"head {head} outside the {len(per_head)} recorded heads")
    rows = [np.asarray(w)[query] for w in per_head]
    return rows[head] if head is not None else np.mean(rows, axis=0)


def render_attention_svg(
    features_a: LocalFeatureSet,
    features_b: LocalFeatureSet,
    attention: Sequence[LayerAttention],
    query: int,
    image: str = "a",
    head: Optional[int] = None,
    min_weight: float = 0.01,
) -> str:
    """
    One row per recorded block, top to bottom: the pair with a ray from the
    query keypoint to every source whose weight reaches min_weight, opacity
    relative to the strongest source. Self blocks point into the query's
    own image, cross blocks into the other one. head=None averages heads.
    """
    if image not in ("a", "b"):
        raise RecordingError(f"image must be 'a' or 'b', got {image!r}")
    if not attention:
        raise RecordingError("no attention blocks to render")
    queries = features_a if image == "a" else features_b
    if not (0 <= query < queries.num_keypoints):
        raise RecordingError(f"query {query} outside the {queries.num_keypoints} keypoints of image {image.upper()}")

    width_a, height_a = features_a.image_size
    width_b, height_b = features_b.image_size
    offset = width_a + GAP
    row_height = max(height_a, height_b) + GAP
    shift_of = {"a": 0.0, "b": offset}
    other = "b" if image == "a" else "a"
    qx, qy = queries.positions[query]

    lines = _svg_open(offset + width_b, row_height * len(attention) - GAP)
    for row, record in enumerate(attention):
        top = row * row_height
        target = image if record.edge_type == EDGE_SELF else other
        sources = (features_a if target == "a" else features_b).positions
        weights = _query_weights(record, image, query, head)
        if weights.shape != (len(sources),):
            raise RecordingError(
                f"block {record.layer} weights cover {weights.size} sources, image {target.upper()} has {len(sources)}"
            )
        color = SELF_RAY if record.edge_type == EDGE_SELF else CROSS_RAY
        lines += _pair_frame(features_a, features_b, top)
        lines.append(
            f'<text x="4" y="{_fmt(top + 12)}" font-size="10" fill="#444444">'
            f'block {record.layer} ({record.edge_type})</text>'
        )
        peak = float(weights.max())
        x1, y1 = qx + shift_of[image], qy + top
        for (x, y), weight in zip(sources, weights):
            if weight < min_weight or peak <= 0.0:
                continue
            lines.append(
                f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x + shift_of[target])}" y2="{_fmt(y + top)}" '
                f'stroke="{color}" stroke-width="1" stroke-opacity="{weight / peak:.3f}"/>'
            )
        lines.append(f'<circle cx="{_fmt(x1)}" cy="{_fmt(y1)}" r="4" fill="{QUERY}"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def save_svg(svg: str, path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(svg)
    logger.info("SVG saved to %s", path)
    return path
