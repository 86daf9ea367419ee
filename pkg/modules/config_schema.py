"""
Config Schema Module
Experiment configuration files: JSON with a schema_version and sections
model, train and data. The structure of a loaded file is inferred with
genson and compared against the schema of the reference configuration, so
unknown keys and wrongly typed values fail before anything runs.
"""
import copy
import json
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Set, Tuple, Union

from genson import SchemaBuilder

from modules.errors import ConfigError, GeometryError
from modules.exporter import load_json, save_json
from modules.model import ModelConfig
from modules.synthgen import DatasetManifest, SceneConfig
from modules.training import TrainConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SECTIONS = ("model", "train", "data")


def generate_schema(data: dict) -> dict:
    builder = SchemaBuilder()
    builder.add_object(data)
    return builder.to_schema()


def _field_types(schema: dict, prefix: str = "") -> Dict[str, str]:
    """Dotted path -> JSON type for every property, nested objects included."""
    fields: Dict[str, str] = {}
    for name, sub in schema.get("properties", {}).items():
        path = f"{prefix}{name}"
        kind = sub.get("type", "any")
        fields[path] = kind if isinstance(kind, str) else "|".join(sorted(kind))
        if kind == "object":
            fields.update(_field_types(sub, f"{path}."))
    return fields


def _compatible(expected: str, found: str) -> bool:
    if expected == found or expected == "any":
        return True
    if expected == "number" and found == "integer":
        return True
    # optional settings are null in the reference
    return expected == "null" and found in ("integer", "number", "null")


def compare_schemas(reference: dict, loaded: dict) -> Tuple[Set[str], Set[str], Set[str]]:
    """Return (added, removed, retyped) field paths of loaded relative to reference."""
    expected = _field_types(reference)
    found = _field_types(loaded)
    added = {path for path in found if path not in expected and not _inside_added(path, found, expected)}
    removed = set(expected) - set(found)
    retyped = {path for path in found if path in expected and not _compatible(expected[path], found[path])}
    return added, removed, retyped


def _inside_added(path: str, found: Dict[str, str], expected: Dict[str, str]) -> bool:
    parent = path.rpartition(".")[0]
    return bool(parent) and parent in found and parent not in expected


def save_schema(schema: dict, path: str) -> str:
    return save_json(schema, path)


# ---------------------------------------------------------------------------
# reference configuration and presets
# ---------------------------------------------------------------------------

def reference_config() -> dict:
    data = SceneConfig().to_dict()
    data.update({"num_pairs": None, "master_seed": 0})
    return json.loads(json.dumps({
        "schema_version": SCHEMA_VERSION,
        "model": ModelConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "data": data,
    }))


def _override(base: dict, changes: dict) -> dict:
    out = copy.deepcopy(base)
    for section, values in changes.items():
        out[section].update(values)
    return out


PRESETS = {
    "desk": {
        "model": {"descriptor_dim": 32, "num_layers": 3, "heads": 4, "sinkhorn_iterations": 50},
        "train": {
            "learning_rate": 1e-3,
            "decay": 0.999,
            "decay_start": 1500,
            "iterations": 3000,
            "batch_size": 4,
            "eval_interval": 200,
            "validation_pairs": 32,
        },
        "data": {"num_points": 50, "num_distractors": 10, "repeated_distractors": 0.5, "descriptor_dim": 32,
                 "descriptor_noise": 0.1, "dropout_rate": 0.2},
    },
    "full": {
        "model": {"descriptor_dim": 256, "num_layers": 9, "heads": 4, "sinkhorn_iterations": 100},
        "train": {
            "learning_rate": 1e-4,
            "decay": 0.999998,
            "decay_start": 200_000,
            "iterations": 900_000,
            "batch_size": 32,
            "num_keypoints": 512,
        },
        "data": {"descriptor_dim": 256, "image_size": [640.0, 480.0]},
    },
}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return _override(reference_config(), PRESETS[name])


def write_template(path: str, name: str = "desk") -> str:
    return save_json(preset(name), path)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig
    scene: SceneConfig
    num_pairs: Optional[int] = None
    master_seed: int = 0

    @property
    def manifest(self) -> DatasetManifest:
        return DatasetManifest(self.num_pairs, self.master_seed, self.train.scene_config(self.scene))

    def to_dict(self) -> dict:
        data = self.scene.to_dict()
        data.update({"num_pairs": self.num_pairs, "master_seed": self.master_seed})
        return json.loads(json.dumps({
            "schema_version": SCHEMA_VERSION,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": data,
        }))


def parse_experiment_config(data: dict, source: str = "<config>") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: configuration must be a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{source}: unsupported schema_version {version!r}, expected {SCHEMA_VERSION}")
    added, removed, retyped = compare_schemas(generate_schema(reference_config()), generate_schema(data))
    if added:
        raise ConfigError(f"{source}: unknown configuration keys {sorted(added)}")
    if retyped:
        raise ConfigError(f"{source}: wrongly typed configuration keys {sorted(retyped)}")
    if removed:
        logger.debug("%s: %d keys take their defaults", source, len(removed))

    sections = {name: dict(data.get(name, {})) for name in SECTIONS}
    scene = sections["data"]
    num_pairs = scene.pop("num_pairs", None)
    master_seed = scene.pop("master_seed", 0)
    try:
        return ExperimentConfig(
            ModelConfig.from_dict(sections["model"]),
            TrainConfig.from_dict(sections["train"]),
            SceneConfig.from_dict(scene),
            None if num_pairs is None else int(num_pairs),
            int(master_seed),
        )
    except (TypeError, ValueError, GeometryError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_experiment_config(source: Union[str, dict]) -> ExperimentConfig:
    if isinstance(source, dict):
        return parse_experiment_config(source)
    config = parse_experiment_config(load_json(source), source)
    logger.info("Loaded experiment configuration from %s", source)
    return config
