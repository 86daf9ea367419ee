"""
Bench Module
Wall-clock timing of the two main stages of a forward pass (attentional
GNN including the keypoint encoder, and the optimal matching layer) at a
range of keypoint counts.
"""
import logging
import time
from typing import Sequence

import numpy as np
import pandas as pd

from modules.autodiff import Tape
from modules.features import LocalFeatureSet, random_feature_set
from modules.gnn import NodeStates, gnn_forward
from modules.matcher import augment_with_dustbins, compute_scores, extract_matches, sinkhorn
from modules.model import DUSTBIN, Model, bind_params, initial_states

logger = logging.getLogger(__name__)

STAGES = ("gnn", "matching")


def time_stages(model: Model, features_a: LocalFeatureSet, features_b: LocalFeatureSet) -> dict:
    config = model.config
    tape = Tape()
    bound = bind_params(tape, model.params)

    start = time.perf_counter()
    states = NodeStates(
        initial_states(bound, tape, config, features_a),
        initial_states(bound, tape, config, features_b),
    )
    gnn = gnn_forward(states, bound, config.edge_types, config.heads, config.normalization, config.scaled_attention)
    middle = time.perf_counter()
    scores = augment_with_dustbins(compute_scores(gnn.f_a, gnn.f_b), bound[DUSTBIN])
    extract_matches(sinkhorn(scores, config.sinkhorn_iterations), config.match_threshold)
    end = time.perf_counter()
    return {"gnn": middle - start, "matching": end - middle}


def benchmark(
    model: Model, keypoint_counts: Sequence[int], repeats: int = 5, warmup: int = 1, seed: int = 0
) -> pd.DataFrame:
    """One row per (keypoints, stage): mean and standard deviation in milliseconds."""
    rng = np.random.default_rng(seed)
    rows = []
    for count in keypoint_counts:
        features_a = random_feature_set(rng, count, model.config.descriptor_dim)
        features_b = random_feature_set(rng, count, model.config.descriptor_dim)
        for _ in range(warmup):
            time_stages(model, features_a, features_b)
        samples = pd.DataFrame([time_stages(model, features_a, features_b) for _ in range(max(1, repeats))])
        for stage in STAGES:
            rows.append({
                "keypoints": int(count),
                "stage": stage,
                "mean_ms": float(samples[stage].mean() * 1e3),
                "std_ms": float(samples[stage].std(ddof=0) * 1e3),
                "repeats": len(samples),
            })
        logger.info(
            "%d keypoints: gnn %.1f ms, matching %.1f ms",
            count, samples["gnn"].mean() * 1e3, samples["matching"].mean() * 1e3,
        )
    return pd.DataFrame(rows, columns=["keypoints", "stage", "mean_ms", "std_ms", "repeats"])
