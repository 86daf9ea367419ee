import xml.etree.ElementTree as ET

import numpy as np
import pytest

from modules.errors import MatchingError, RecordingError
from modules.features import LocalFeatureSet
from modules.gnn import EDGE_CROSS, EDGE_SELF, LayerAttention
from modules.matcher import MatchSet
from modules.synthgen import GroundTruthLabels
from modules.viz import (
    CORRECT,
    CROSS_RAY,
    GAP,
    KEYPOINT,
    QUERY,
    SELF_RAY,
    WRONG,
    confidence_color,
    render_attention_svg,
    render_matches_svg,
    save_svg,
)

SVG = "{http://www.w3.org/2000/svg}"


@pytest.fixture
def features():
    a = LocalFeatureSet((100.0, 80.0), np.array([[10.0, 10.0, 1.0], [50.0, 40.0, 1.0]]), np.eye(2))
    b = LocalFeatureSet((120.0, 60.0), np.array([[20.0, 5.0, 1.0], [70.0, 30.0, 1.0], [5.0, 5.0, 1.0]]), np.eye(3)[:, :2])
    return a, b


@pytest.mark.parametrize("confidence, color", [
    (0.0, "#ff0000"), (0.5, "#ffff00"), (1.0, "#00ff00"), (-3.0, "#ff0000"), (7.0, "#00ff00"),
])
def test_confidence_color(confidence, color):
    assert confidence_color(confidence) == color


def test_layout_and_elements(features):
    a, b = features
    matches = MatchSet.from_matches([(0, 1, 1.0), (1, 2, 0.0)], 2, 3)
    root = ET.fromstring(render_matches_svg(a, b, matches))
    assert root.get("width") == f"{100.0 + GAP + 120.0:.2f}"
    assert root.get("height") == "80.00"
    circles = root.findall(f"{SVG}circle")
    assert len(circles) == 5 and all(c.get("fill") == KEYPOINT for c in circles)
    lines = root.findall(f"{SVG}line")
    assert [line.get("stroke") for line in lines] == ["#00ff00", "#ff0000"]
    assert lines[0].get("x2") == f"{70.0 + 100.0 + GAP:.2f}"


def test_labels_color_by_correctness(features):
    a, b = features
    matches = MatchSet.from_matches([(0, 1, 0.9), (1, 2, 0.9)], 2, 3)
    labels = GroundTruthLabels(((0, 1),), (1,), (0, 2))
    root = ET.fromstring(render_matches_svg(a, b, matches, labels))
    assert [line.get("stroke") for line in root.findall(f"{SVG}line")] == [CORRECT, WRONG]


def test_output_is_deterministic(features, tmp_path):
    a, b = features
    matches = MatchSet.from_matches([(1, 0, 0.3)], 2, 3)
    first = render_matches_svg(a, b, matches)
    assert render_matches_svg(a, b, matches) == first
    path = save_svg(first, str(tmp_path / "out" / "matches.svg"))
    with open(path, encoding="utf-8") as handle:
        assert handle.read() == first


def test_out_of_range_match(features):
    a, b = features
    with pytest.raises(MatchingError):
        render_matches_svg(a, b, MatchSet.from_matches([(5, 0, 0.5)], 6, 3))


@pytest.fixture
def attention():
    self_block = LayerAttention(
        1, EDGE_SELF,
        [np.array([[0.8, 0.2], [0.5, 0.5]]), np.array([[0.0, 1.0], [1.0, 0.0]])],
        [np.full((3, 3), 1 / 3)] * 2,
    )
    cross_block = LayerAttention(
        2, EDGE_CROSS,
        [np.array([[0.5, 0.0, 0.5], [0.2, 0.4, 0.4]])] * 2,
        [np.full((3, 2), 0.5)] * 2,
    )
    return [self_block, cross_block]


def _rays(root, color):
    return [line for line in root.findall(f"{SVG}line") if line.get("stroke") == color]


class TestAttentionSvg:
    def test_one_row_per_block(self, features, attention):
        a, b = features
        root = ET.fromstring(render_attention_svg(a, b, attention, 0, head=0))
        labels = [text.text for text in root.findall(f"{SVG}text")]
        assert labels == ["block 1 (self)", "block 2 (cross)"]
        assert root.get("height") == f"{2 * (80.0 + GAP) - GAP:.2f}"
        queries = [c for c in root.findall(f"{SVG}circle") if c.get("fill") == QUERY]
        assert [(c.get("cx"), c.get("cy")) for c in queries] == [("10.00", "10.00"), ("10.00", f"{10.0 + 80.0 + GAP:.2f}")]

    def test_self_rays_stay_in_the_query_image(self, features, attention):
        a, b = features
        root = ET.fromstring(render_attention_svg(a, b, attention, 0, head=0))
        rays = _rays(root, SELF_RAY)
        assert [(r.get("x2"), r.get("y2")) for r in rays] == [("10.00", "10.00"), ("50.00", "40.00")]
        assert [r.get("stroke-opacity") for r in rays] == ["1.000", "0.250"]

    def test_cross_rays_reach_the_other_image(self, features, attention):
        a, b = features
        root = ET.fromstring(render_attention_svg(a, b, attention, 0, head=0))
        rays = _rays(root, CROSS_RAY)
        top, offset = 80.0 + GAP, 100.0 + GAP
        assert [(r.get("x2"), r.get("y2")) for r in rays] == [
            (f"{20.0 + offset:.2f}", f"{5.0 + top:.2f}"),
            (f"{5.0 + offset:.2f}", f"{5.0 + top:.2f}"),
        ]

    def test_heads_average_by_default(self, features, attention):
        a, b = features
        single = ET.fromstring(render_attention_svg(a, b, attention, 0, head=1))
        assert [r.get("x2") for r in _rays(single, SELF_RAY)] == ["50.00"]
        averaged = ET.fromstring(render_attention_svg(a, b, attention, 0))
        assert [r.get("stroke-opacity") for r in _rays(averaged, SELF_RAY)] == ["0.667", "1.000"]

    def test_queries_from_image_b(self, features, attention):
        a, b = features
        root = ET.fromstring(render_attention_svg(a, b, attention, 2, image="b"))
        assert {r.get("x1") for r in root.findall(f"{SVG}line")} == {f"{5.0 + 100.0 + GAP:.2f}"}
        assert len(_rays(root, SELF_RAY)) == 3
        assert {r.get("x2") for r in _rays(root, CROSS_RAY)} == {"10.00", "50.00"}

    def test_output_is_deterministic(self, features, attention):
        a, b = features
        assert render_attention_svg(a, b, attention, 1) == render_attention_svg(a, b, attention, 1)

    @pytest.mark.parametrize("kwargs", [
        {"query": 2}, {"query": -1}, {"query": 0, "head": 2}, {"query": 0, "image": "c"},
    ])
    def test_bad_selection(self, features, attention, kwargs):
        a, b = features
        with pytest.raises(RecordingError):
            render_attention_svg(a, b, attention, **kwargs)

    def test_no_blocks(self, features):
        a, b = features
        with pytest.raises(RecordingError):
            render_attention_svg(a, b, [], 0)

    def test_weights_for_other_features(self, features, attention):
        a, b = features
        wrong = LayerAttention(1, EDGE_SELF, [np.full((2, 3), 1 / 3)], [np.full((3, 3), 1 / 3)])
        with pytest.raises(RecordingError, match="sources"):
            render_attention_svg(a, b, [wrong], 0)
