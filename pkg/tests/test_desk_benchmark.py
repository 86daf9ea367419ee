import dataclasses

import numpy as np
import pytest

from modules.config_schema import parse_experiment_config, preset
from modules.evaluation import attention_span, evaluate_homography, make_matcher
from modules.gnn import EDGE_CROSS, EDGE_SELF
from modules.model import match_pair
from modules.property_suite import run_equivariance_suite
from modules.synthgen import generate_pairs
from modules.training import run_ablation, train_loop

pytestmark = pytest.mark.slow

TEST_PAIRS = 1024
JOBS = 4


@pytest.fixture(scope="module")
def experiment():
    return parse_experiment_config(preset("desk"))


@pytest.fixture(scope="module")
def trained(experiment):
    return train_loop(experiment.model, experiment.train, experiment.manifest)


@pytest.fixture(scope="module")
def test_pairs(experiment):
    split = dataclasses.replace(experiment.manifest, num_pairs=TEST_PAIRS, stream=2)
    return generate_pairs(split, range(TEST_PAIRS), JOBS)


@pytest.fixture(scope="module")
def reports(trained, test_pairs):
    return {
        name: evaluate_homography(test_pairs, make_matcher(name, trained.best_model), jobs=JOBS)
        for name in ("superglue", "nn-mutual")
    }


def test_validation_precision_and_recall(trained):
    best = max(trained.metrics, key=lambda record: record["precision"] * record["recall"])
    assert best["precision"] >= 0.95
    assert best["recall"] >= 0.95


def test_beats_mutual_nearest_neighbor(reports):
    ours, baseline = reports["superglue"].metrics, reports["nn-mutual"].metrics
    assert ours.precision >= 0.90
    assert ours.recall >= 0.90
    assert ours.precision > baseline.precision
    assert ours.recall > baseline.recall


def test_dlt_is_enough_with_clean_matches(reports):
    ours, baseline = reports["superglue"], reports["nn-mutual"]
    assert ours.auc_dlt >= baseline.auc_dlt + 0.10
    assert ours.auc_dlt >= ours.auc_ransac - 0.05


def test_trained_model_stays_equivariant(trained):
    cases = run_equivariance_suite(trained.best_model, trials=100, workers=JOBS)
    assert all(case.passed for case in cases), [(case.name, case.measured) for case in cases if not case.passed]


def test_attention_narrows_with_depth(trained, test_pairs):
    spans = {}
    for pair in test_pairs[:100]:
        result = match_pair(trained.best_model, pair.features_a, pair.features_b, record_attention=True)
        for layer in attention_span(result.attention, pair.features_a.positions, pair.features_b.positions,
                                    result.matches):
            if layer.span is not None:
                spans.setdefault((layer.edge_type, layer.layer), []).append(layer.span)
    for edge_type in (EDGE_SELF, EDGE_CROSS):
        layers = sorted(layer for kind, layer in spans if kind == edge_type)
        first = np.mean(spans[(edge_type, layers[0])])
        last = np.mean(spans[(edge_type, layers[-1])])
        assert last < first, f"{edge_type}: first {first:.1f} px, last {last:.1f} px"


def test_ablation_ordering(experiment, test_pairs):
    table = run_ablation(
        experiment.model,
        experiment.train,
        experiment.manifest,
        test_pairs[:256],
        variants=("full", "no_cross", "no_gnn"),
        seeds=(0, 1, 2),
    ).set_index("variant")
    full, no_cross, no_gnn = (table.loc[name, "precision"] for name in ("full", "no_cross", "no_gnn"))
    assert full - no_cross >= 0.02
    assert no_cross - no_gnn >= 0.02
