import json
import os

import pytest

from main import main
from modules.checkpoint import load_checkpoint, save_checkpoint
from modules.config_schema import preset
from modules.exporter import load_json, load_manifest, load_matches
from modules.features import save_feature_set


@pytest.fixture
def model_path(tmp_path, small_model):
    return save_checkpoint(small_model, str(tmp_path / "model.sgwt"))


@pytest.fixture
def feature_paths(tmp_path, small_pair):
    return (
        save_feature_set(small_pair.features_a, str(tmp_path / "a.sgfm")),
        save_feature_set(small_pair.features_b, str(tmp_path / "b.sgfm")),
    )


@pytest.fixture
def config_path(tmp_path):
    data = preset("desk")
    data["model"].update(descriptor_dim=8, num_layers=1, heads=2, sinkhorn_iterations=10, encoder_hidden=[8])
    data["train"].update(iterations=2, batch_size=1, eval_interval=1, validation_pairs=1)
    data["data"].update(num_points=8, descriptor_dim=8, num_distractors=2)
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def _manifest_path(tmp_path, pairs):
    path = str(tmp_path / f"manifest_{pairs}.json")
    assert main(["gen-data", "--out", path, "--pairs", str(pairs), "--num-points", "20",
                 "--descriptor-dim", "8", "--distractors", "2"]) == 0
    return path


class TestGenData:
    def test_zero_pairs(self, tmp_path):
        assert load_manifest(_manifest_path(tmp_path, 0)).num_pairs == 0

    def test_export(self, tmp_path):
        out = tmp_path / "pairs"
        assert main(["gen-data", "--out", str(tmp_path / "m.json"), "--pairs", "2", "--num-points", "10",
                     "--descriptor-dim", "8", "--export", str(out)]) == 0
        assert sorted(os.listdir(out))[:3] == ["pair_00000_a.sgfm", "pair_00000_b.sgfm", "pair_00000_labels.json"]

    def test_invalid_scene(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "m.json"), "--dropout", "2"]) == 2

    def test_usage_error(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["gen-data", "--pairs", "-1"])
        assert excinfo.value.code == 2


class TestTrain:
    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "absent.json")]) == 2

    def test_train_and_resume(self, tmp_path, config_path):
        out = str(tmp_path / "run" / "model.sgwt")
        assert main(["train", "--config", config_path, "--out", out, "--iterations", "1"]) == 0
        assert os.path.exists(out + ".state.npz")
        final = str(tmp_path / "run" / "last.sgwt")
        assert main(["train", "--config", config_path, "--out", out, "--resume", out, "--final", final]) == 0
        lines = open(str(tmp_path / "run" / "model.metrics.jsonl"), encoding="utf-8").read().splitlines()
        assert [json.loads(line)["iter"] for line in lines] == [1, 2]
        assert load_checkpoint(final).config.num_layers == 1

    def test_resume_rejects_a_corrupted_checkpoint(self, tmp_path, config_path):
        out = str(tmp_path / "run" / "model.sgwt")
        assert main(["train", "--config", config_path, "--out", out, "--iterations", "1"]) == 0
        with open(out, "rb") as f:
            blob = bytearray(f.read())
        blob[len(blob) // 2] ^= 0xFF
        with open(out, "wb") as f:
            f.write(bytes(blob))
        assert main(["train", "--config", config_path, "--out", out, "--resume", out]) == 1

    def test_resume_from_a_garbage_state_file(self, tmp_path, config_path):
        state = tmp_path / "model.sgwt.state.npz"
        state.write_bytes(b"garbage")
        out = str(tmp_path / "model.sgwt")
        assert main(["train", "--config", config_path, "--out", out, "--resume", str(state)]) == 1

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "bad.json"
        data = preset("desk")
        data["model"]["depth"] = 4
        path.write_text(json.dumps(data), encoding="utf-8")
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "m.sgwt")]) == 2


class TestMatch:
    def test_match_with_attention(self, tmp_path, model_path, feature_paths):
        out, attention = str(tmp_path / "matches.json"), str(tmp_path / "attention.json")
        args = ["match", "--model", model_path, "--features-a", feature_paths[0], "--features-b", feature_paths[1],
                "--out", out, "--record-attention", attention]
        assert main(args) == 0
        load_matches(out)
        layers = load_json(attention)["layers"]
        assert [layer["edge_type"] for layer in layers] == ["self", "cross"]

    def test_threshold_above_one(self, tmp_path, model_path, feature_paths):
        out = str(tmp_path / "matches.json")
        args = ["match", "--model", model_path, "--features-a", feature_paths[0], "--features-b", feature_paths[1],
                "--out", out, "--threshold", "1.1", "--float32"]
        assert main(args) == 0
        assert len(load_matches(out)) == 0

    def test_sinkhorn_tolerance(self, tmp_path, model_path, feature_paths):
        out = str(tmp_path / "matches.json")
        args = ["match", "--model", model_path, "--features-a", feature_paths[0], "--features-b", feature_paths[1],
                "--out", out, "--sinkhorn-tolerance", "1e-9"]
        assert main(args) == 0
        load_matches(out)

    def test_bad_feature_file(self, tmp_path, model_path, feature_paths):
        bad = tmp_path / "bad.sgfm"
        bad.write_bytes(b"NOPE" + bytes(40))
        args = ["match", "--model", model_path, "--features-a", str(bad), "--features-b", feature_paths[1],
                "--out", str(tmp_path / "m.json")]
        assert main(args) == 1

    def test_missing_model(self, tmp_path, feature_paths):
        args = ["match", "--model", str(tmp_path / "absent.sgwt"), "--features-a", feature_paths[0],
                "--features-b", feature_paths[1], "--out", str(tmp_path / "m.json")]
        assert main(args) == 1


class TestEvalHomography:
    def test_empty_manifest(self, tmp_path):
        assert main(["eval-homography", "--manifest", _manifest_path(tmp_path, 0), "--matcher", "nn"]) == 2

    def test_superglue_needs_a_model(self, tmp_path):
        assert main(["eval-homography", "--manifest", _manifest_path(tmp_path, 1)]) == 2

    def test_baseline_report(self, tmp_path):
        out = str(tmp_path / "report.json")
        args = ["eval-homography", "--manifest", _manifest_path(tmp_path, 2), "--matcher", "nn-mutual",
                "--ransac-iterations", "50", "--out", out]
        assert main(args) == 0
        report = load_json(out)
        assert report["matcher"] == "nn-mutual" and report["num_pairs"] == 2

    def test_model_report(self, tmp_path, model_path):
        out = str(tmp_path / "report.json")
        args = ["eval-homography", "--manifest", _manifest_path(tmp_path, 1), "--model", model_path,
                "--ransac-iterations", "20", "--out", out]
        assert main(args) == 0
        assert load_json(out)["matcher"] == "superglue"


def test_viz(tmp_path, model_path, feature_paths):
    matches = str(tmp_path / "matches.json")
    assert main(["match", "--model", model_path, "--features-a", feature_paths[0], "--features-b", feature_paths[1],
                 "--out", matches]) == 0
    svg = str(tmp_path / "matches.svg")
    assert main(["viz", "--matches", matches, "--features-a", feature_paths[0], "--features-b", feature_paths[1],
                 "--out", svg]) == 0
    assert open(svg, encoding="utf-8").read().rstrip().endswith("</svg>")


def test_viz_attention(tmp_path, model_path, feature_paths):
    matches, attention = str(tmp_path / "matches.json"), str(tmp_path / "attention.json")
    assert main(["match", "--model", model_path, "--features-a", feature_paths[0], "--features-b", feature_paths[1],
                 "--out", matches, "--record-attention", attention]) == 0
    svg = str(tmp_path / "attention.svg")
    assert main(["viz", "--attention", attention, "--query", "0", "--image", "b", "--head", "1",
                 "--features-a", feature_paths[0], "--features-b", feature_paths[1], "--out", svg]) == 0
    text = open(svg, encoding="utf-8").read()
    assert text.count("<text ") == 2
    assert text.rstrip().endswith("</svg>")


def test_viz_attention_query_out_of_range(tmp_path, model_path, feature_paths):
    matches, attention = str(tmp_path / "matches.json"), str(tmp_path / "attention.json")
    assert main(["match", "--model", model_path, "--features-a", feature_paths[0], "--features-b", feature_paths[1],
                 "--out", matches, "--record-attention", attention]) == 0
    assert main(["viz", "--attention", attention, "--query", "500", "--features-a", feature_paths[0],
                 "--features-b", feature_paths[1], "--out", str(tmp_path / "attention.svg")]) == 1


def test_viz_needs_something_to_draw(tmp_path, feature_paths):
    assert main(["viz", "--features-a", feature_paths[0], "--features-b", feature_paths[1],
                 "--out", str(tmp_path / "empty.svg")]) == 2


def test_bench(tmp_path, model_path):
    out = str(tmp_path / "bench.csv")
    assert main(["bench", "--model", model_path, "--keypoints", "4", "--repeats", "1", "--out", out]) == 0
    assert os.path.exists(out)


def test_init_config(tmp_path):
    out, schema = str(tmp_path / "experiment.json"), str(tmp_path / "schema.json")
    assert main(["init-config", "--preset", "full", "--out", out, "--schema", schema]) == 0
    assert load_json(out)["model"]["num_layers"] == 9
    assert load_json(schema)["type"] == "object"


def test_ablate(tmp_path, config_path):
    out = str(tmp_path / "ablation")
    args = ["ablate", "--config", config_path, "--variants", "full", "no_gnn", "--seeds", "0",
            "--test-pairs", "1", "--out", out]
    assert main(args) == 0
    assert [row["variant"] for row in load_json(out + ".json")] == ["full", "no_gnn"]


@pytest.mark.slow
def test_properties(tmp_path):
    json_path, junit = str(tmp_path / "props.json"), str(tmp_path / "props.xml")
    code = main(["properties", "--trials", "1", "--gradient-trials", "1", "--json", json_path, "--junit", junit])
    assert code == (0 if load_json(json_path)["failed"] == 0 else 1)
    assert os.path.exists(junit)
