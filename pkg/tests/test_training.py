import dataclasses
import json

import numpy as np
import pytest

from modules.autodiff import Tape
from modules.checkpoint import load_checkpoint, load_training_state, state_path
from modules.errors import ConfigError, NumericalError
from modules.matcher import MatchSet, PartialAssignment
from modules.model import init_model
from modules.synthgen import DatasetManifest, GroundTruthLabels, SceneConfig, TrainingPair, generate_scene, pair_rng
from modules.training import (
    AdamState,
    TrainConfig,
    adam_step,
    evaluate_pr,
    loss_and_gradient,
    nll_loss,
    run_ablation,
    train_loop,
    train_step,
    validate,
    warm_start,
)

TINY_TRAIN = TrainConfig(learning_rate=1e-3, decay=0.99, decay_start=1, iterations=4, batch_size=2,
                         eval_interval=2, validation_pairs=2)


def _assignment(p_bar):
    return PartialAssignment.from_probabilities(Tape(), np.asarray(p_bar, dtype=np.float64))


def _manifest(num_pairs=None, seed=0):
    return DatasetManifest(num_pairs, seed, SceneConfig(num_points=8, descriptor_dim=8, num_distractors=2))


class TestSchedule:
    def test_default_schedule(self):
        config = TrainConfig()
        assert (config.learning_rate, config.decay, config.decay_start) == (1e-4, 0.999998, 200_000)
        assert (config.batch_size, config.iterations) == (32, 900_000)

    def test_constant_then_exponential(self):
        config = TrainConfig()
        assert config.lr_at(0) == config.lr_at(199_999) == 1e-4
        assert config.lr_at(200_000) == 1e-4
        assert config.lr_at(200_010) == pytest.approx(1e-4 * 0.999998 ** 10, rel=1e-15)

    @pytest.mark.parametrize("kwargs", [{"learning_rate": 0.0}, {"decay": 1.5}, {"batch_size": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_keypoint_override(self):
        scene = TrainConfig(num_keypoints=512).scene_config(SceneConfig())
        assert scene.num_points == 512


class TestLoss:
    def test_certain_entries_give_zero(self):
        p_bar = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
        labels = GroundTruthLabels(((0, 0),), (1,), (1,))
        assert float(nll_loss(_assignment(p_bar), labels).value) == 0.0

    def test_single_match_at_one_half(self):
        p_bar = np.array([[0.5, 0.5], [0.5, 0.5]])
        loss = nll_loss(_assignment(p_bar), GroundTruthLabels(((0, 0),), (), ()))
        assert float(loss.value) == pytest.approx(np.log(2.0), abs=1e-15)

    def test_against_direct_summation(self, rng):
        p_bar = rng.uniform(0.01, 1.0, (5, 6))
        labels = GroundTruthLabels(((0, 1), (2, 3)), (1, 3), (0, 4))
        expected = -(np.log(p_bar[0, 1]) + np.log(p_bar[2, 3]) + np.log(p_bar[1, 5]) + np.log(p_bar[3, 5])
                     + np.log(p_bar[4, 0]) + np.log(p_bar[4, 4]))
        assert float(nll_loss(_assignment(p_bar), labels).value) == pytest.approx(expected, rel=1e-14)

    def test_unlabeled_rows_contribute_nothing(self):
        p_bar = np.full((3, 3), 0.5)
        assert float(nll_loss(_assignment(p_bar), GroundTruthLabels((), (), ())).value) == 0.0

    def test_zero_entry_raises(self):
        p_bar = np.array([[0.0, 1.0], [1.0, 0.0]])
        with pytest.raises(NumericalError):
            nll_loss(_assignment(p_bar), GroundTruthLabels(((0, 0),), (), ()))

    def test_untrained_loss_is_finite_and_positive(self, small_model, small_pair):
        loss, _ = loss_and_gradient(small_model, small_pair)
        assert np.isfinite(loss) and loss > 0

    def test_invariant_under_consistent_permutation(self, small_model, small_pair, rng):
        order_a = rng.permutation(small_pair.features_a.num_keypoints)
        order_b = rng.permutation(small_pair.features_b.num_keypoints)
        new_a = {int(old): new for new, old in enumerate(order_a)}
        new_b = {int(old): new for new, old in enumerate(order_b)}
        labels = small_pair.labels
        permuted = TrainingPair(
            small_pair.features_a.permuted(order_a),
            small_pair.features_b.permuted(order_b),
            GroundTruthLabels(
                tuple((new_a[i], new_b[j]) for i, j in labels.matches),
                tuple(new_a[i] for i in labels.unmatched_a),
                tuple(new_b[j] for j in labels.unmatched_b),
            ),
            small_pair.homography,
        )
        original, _ = loss_and_gradient(small_model, small_pair)
        shuffled, _ = loss_and_gradient(small_model, permuted)
        assert shuffled == pytest.approx(original, rel=1e-9)

    def test_positions_ignored_without_encoder(self, small_config, small_pair, rng):
        model = init_model(dataclasses.replace(small_config, variant="no_positional"), 0)
        features = small_pair.features_a
        moved_keypoints = features.keypoints.copy()
        moved_keypoints[:, :2] = rng.uniform(0, 400, (features.num_keypoints, 2))
        moved = dataclasses.replace(small_pair, features_a=type(features)(features.image_size, moved_keypoints,
                                                                          features.descriptors))
        assert loss_and_gradient(model, moved)[0] == loss_and_gradient(model, small_pair)[0]


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState.zeros_like(params)
        new_params, new_state = adam_step(params, {"w": np.zeros(2)}, state, 0.1)
        assert np.array_equal(new_params["w"], params["w"])
        assert new_state.step == 1

    def test_first_step_is_unit_scaled(self):
        params = {"w": np.array(3.0)}
        new_params, _ = adam_step(params, {"w": np.array(1.0)}, AdamState.zeros_like(params), 0.1)
        assert float(new_params["w"]) == pytest.approx(2.9, abs=1e-8)

    def test_quadratic_trace(self):
        params = {"w": np.array([2.0, -1.0])}
        state = AdamState.zeros_like(params)
        w, m, v = np.array([2.0, -1.0]), np.zeros(2), np.zeros(2)
        for t in range(1, 11):
            g = 2.0 * w
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            params, state = adam_step(params, {"w": 2.0 * params["w"]}, state, 0.05)
        assert np.max(np.abs(params["w"] - w)) <= 1e-12

    def test_non_finite_gradient_names_parameter(self):
        params = {"encoder.mlp.0.bias": np.zeros(2)}
        with pytest.raises(NumericalError, match="encoder.mlp.0.bias"):
            adam_step(params, {"encoder.mlp.0.bias": np.array([np.inf, 0.0])}, AdamState.zeros_like(params), 0.1)

    def test_inputs_untouched(self):
        params = {"w": np.ones(3)}
        state = AdamState.zeros_like(params)
        adam_step(params, {"w": np.ones(3)}, state, 0.1)
        assert np.array_equal(params["w"], np.ones(3)) and state.step == 0


class TestTrainStep:
    def test_deterministic(self, small_model, small_pair):
        state = AdamState.zeros_like(small_model.params)
        loss_1, model_1, _ = train_step(small_model, small_pair, state, 1e-3)
        loss_2, model_2, _ = train_step(small_model, small_pair, state, 1e-3)
        assert loss_1 == loss_2
        assert all(np.array_equal(model_1.params[k], model_2.params[k]) for k in model_1.params)

    def test_loss_decreases_on_a_fixed_pair(self, small_config):
        pair = generate_scene(pair_rng(21, 0), SceneConfig(num_points=16, descriptor_dim=8, num_distractors=0))
        model = init_model(small_config, 0)
        state = AdamState.zeros_like(model.params)
        initial, _ = loss_and_gradient(model, pair)
        for _ in range(50):
            _, model, state = train_step(model, pair, state, 1e-4)
        final, _ = loss_and_gradient(model, pair)
        assert final < initial


class TestMetrics:
    def test_exact_predictions(self):
        labels = GroundTruthLabels(((0, 1), (1, 0)), (2,), ())
        predicted = MatchSet.from_matches([(0, 1, 0.9), (1, 0, 0.8)], 3, 2)
        metrics = evaluate_pr([predicted], [labels], [3])
        assert (metrics.precision, metrics.recall) == (1.0, 1.0)
        assert metrics.matching_score == pytest.approx(2 / 3)

    def test_empty_predictions(self):
        labels = GroundTruthLabels(((0, 0),), (), ())
        metrics = evaluate_pr([MatchSet.from_matches([], 2, 2)], [labels], [2])
        assert (metrics.precision, metrics.recall, metrics.matching_score) == (0.0, 0.0, 0.0)

    def test_empty_predictions_without_truth(self):
        metrics = evaluate_pr([MatchSet.from_matches([], 2, 2)], [GroundTruthLabels((), (0, 1), (0, 1))], [2])
        assert metrics.precision == 1.0

    def test_hand_counted_average(self):
        labels = [GroundTruthLabels(((0, 0), (1, 1), (2, 2)), (), ()), GroundTruthLabels(((0, 1),), (1,), (0,))]
        predictions = [
            MatchSet.from_matches([(0, 0, 0.9), (1, 2, 0.5)], 4, 3),
            MatchSet.from_matches([(0, 1, 0.7), (1, 0, 0.3)], 2, 2),
        ]
        metrics = evaluate_pr(predictions, labels, [4, 2])
        assert metrics.precision == pytest.approx((1 / 2 + 1 / 2) / 2)
        assert metrics.recall == pytest.approx((1 / 3 + 1) / 2)
        assert metrics.matching_score == pytest.approx((1 / 4 + 1 / 2) / 2)
        assert metrics.num_pairs == 2


class TestTrainLoop:
    def test_finite_data_stops_early(self, small_config, caplog):
        pairs = [_manifest().pair(k) for k in range(3)]
        with caplog.at_level("INFO", logger="modules.training"):
            result = train_loop(small_config, TINY_TRAIN, pairs)
        assert result.exhausted
        assert result.iterations == 1
        assert result.metrics == []
        assert any(record.getMessage().startswith("iter 1: loss ") for record in caplog.records)

    def test_last_iteration_is_validated(self, small_config):
        result = train_loop(small_config, dataclasses.replace(TINY_TRAIN, iterations=3), _manifest())
        assert [record["iter"] for record in result.metrics] == [2, 3]
        assert result.state.interval_losses == []

    def test_writes_checkpoint_metrics_and_state(self, tmp_path, small_config):
        checkpoint = str(tmp_path / "model.sgwt")
        metrics = str(tmp_path / "metrics.jsonl")
        result = train_loop(small_config, TINY_TRAIN, _manifest(), checkpoint_path=checkpoint, metrics_path=metrics)
        assert result.iterations == 4
        assert [record["iter"] for record in result.metrics] == [2, 4]
        lines = [json.loads(line) for line in open(metrics, encoding="utf-8")]
        assert [set(line) for line in lines] == [{"iter", "loss", "precision", "recall", "matching_score", "lr"}] * 2
        assert load_checkpoint(checkpoint).config == small_config
        assert load_training_state(state_path(checkpoint)).iteration == 4

    def test_resume_is_bit_identical(self, tmp_path, small_config):
        data = _manifest(seed=4)
        straight = train_loop(small_config, TINY_TRAIN, data)
        checkpoint = str(tmp_path / "model.sgwt")
        train_loop(small_config, dataclasses.replace(TINY_TRAIN, iterations=2), data, checkpoint_path=checkpoint)
        resumed = train_loop(small_config, TINY_TRAIN, data, resume=load_training_state(state_path(checkpoint)))
        assert resumed.iterations == straight.iterations
        assert resumed.metrics == straight.metrics
        for name, value in straight.model.params.items():
            assert np.array_equal(resumed.model.params[name], value)

    def test_resume_rejects_other_configuration(self, small_config):
        first = train_loop(small_config, dataclasses.replace(TINY_TRAIN, iterations=1), _manifest())
        with pytest.raises(ConfigError):
            train_loop(dataclasses.replace(small_config, sinkhorn_iterations=5), TINY_TRAIN, _manifest(),
                       resume=first.state)

    def test_warm_start_copies_matching_tensors(self, small_config):
        source = init_model(small_config, 5)
        target = warm_start(init_model(dataclasses.replace(small_config, variant="no_positional"), 0), source.params)
        assert np.array_equal(target.params["gnn.final.weight"], source.params["gnn.final.weight"])
        assert not any(name.startswith("encoder.") for name in target.params)

    def test_validation_reports_counts(self, small_model):
        pairs = [_manifest().pair(k) for k in range(2)]
        assert validate(small_model, pairs).num_pairs == 2


def test_ablation_table(small_config):
    table = run_ablation(
        small_config,
        dataclasses.replace(TINY_TRAIN, iterations=2),
        _manifest(),
        [_manifest(seed=9).pair(0)],
        seeds=(0,),
        extra_layers=(2,),
    )
    assert table["variant"].tolist() == ["full", "no_gnn", "no_cross", "no_positional", "full_L2"]
    assert set(table.columns) == {"variant", "precision", "recall", "matching_score"}
