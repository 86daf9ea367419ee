from modules.bench import STAGES, benchmark, time_stages
from modules.features import random_feature_set


def test_time_stages(small_model, rng):
    a = random_feature_set(rng, 5, small_model.config.descriptor_dim)
    b = random_feature_set(rng, 6, small_model.config.descriptor_dim)
    timings = time_stages(small_model, a, b)
    assert set(timings) == set(STAGES)
    assert all(value >= 0.0 for value in timings.values())


def test_benchmark_table(small_model):
    table = benchmark(small_model, [4, 8], repeats=2, warmup=0)
    assert list(table.columns) == ["keypoints", "stage", "mean_ms", "std_ms", "repeats"]
    assert table["keypoints"].tolist() == [4, 4, 8, 8]
    assert table["stage"].tolist() == ["gnn", "matching", "gnn", "matching"]
    assert (table["mean_ms"] >= 0).all() and (table["repeats"] == 2).all()
