"""
Checkpoint Module
SGWT model-weight files, parameter accounting, and the full-precision
training state that makes resumed runs bit-identical.
"""
import json
import logging
import os
import struct
import zipfile
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from modules.errors import CheckpointError, ConfigError
from modules.model import Model, ModelConfig, count_parameters, init_model

logger = logging.getLogger(__name__)

MAGIC = b"SGWT"
VERSION = 1
REFERENCE_PARAMETER_COUNT = 12_000_000
REFERENCE_TOLERANCE = 0.05

_U32 = struct.Struct("<I")


def is_reference_config(config: ModelConfig) -> bool:
    return (
        config.descriptor_dim == 256
        and config.num_layers == 9
        and config.heads == 4
        and config.variant == "full"
        and config.encoder_hidden == (32, 64, 128, 256)
    )


def expected_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Tensor name schema for a configuration."""
    return {name: value.shape for name, value in init_model(config, 0).params.items()}


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for shape in expected_shapes(config).values())


def check_parameter_count(config: ModelConfig, params: Mapping[str, np.ndarray]) -> int:
    total = count_parameters(params)
    if is_reference_config(config):
        deviation = abs(total - REFERENCE_PARAMETER_COUNT) / REFERENCE_PARAMETER_COUNT
        if deviation > REFERENCE_TOLERANCE:
            raise CheckpointError(
                f"full-size configuration has {total} parameters, more than {REFERENCE_TOLERANCE:.0%} off {REFERENCE_PARAMETER_COUNT}"
            )
    return total


def encode_checkpoint(model: Model) -> bytes:
    config_blob = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(config_blob)), config_blob, _U32.pack(len(model.params))]
    for name, value in model.params.items():
        value = np.asarray(value)
        encoded = name.encode("utf-8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(value.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        chunk = self.blob[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode_checkpoint(blob: bytes) -> Model:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:4]!r}, expected {MAGIC!r}")
    body, (crc,) = blob[:-4], _U32.unpack(blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    reader = _Reader(body)
    reader.take(4)
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_dict(json.loads(reader.take(reader.u32()).decode("utf-8")))
    except (ValueError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"invalid model configuration in checkpoint: {exc}") from exc

    params: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape).astype(np.float64)
    if reader.offset != len(body):
        raise CheckpointError("trailing bytes after tensor table")

    expected = expected_shapes(config)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        unknown = sorted(set(params) - set(expected))
        raise CheckpointError(f"tensor names do not match the schema (missing {missing[:5]}, unknown {unknown[:5]})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointError(f"tensor {name} has shape {params[name].shape}, expected {shape}")
    check_parameter_count(config, params)
    return Model(config, {name: params[name] for name in expected})


def save_checkpoint(model: Model, path: str) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_checkpoint(model))
    logger.info("Checkpoint saved to %s (%d parameters)", path, count_parameters(model.params))
    return path


def load_checkpoint(path: str) -> Model:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


# ---------------------------------------------------------------------------
# training state
# ---------------------------------------------------------------------------

@dataclass
class TrainingState:
    """Everything a resumed run needs, at full precision."""

    config: ModelConfig
    params: Dict[str, np.ndarray]
    moment1: Dict[str, np.ndarray]
    moment2: Dict[str, np.ndarray]
    step: int
    iteration: int
    best_score: float = -1.0
    best_params: Optional[Dict[str, np.ndarray]] = None
    metrics: List[dict] = field(default_factory=list)
    interval_losses: List[float] = field(default_factory=list)


def state_path(checkpoint_path: str) -> str:
    return checkpoint_path + ".state.npz"


def save_training_state(state: TrainingState, path: str) -> str:
    arrays = {}
    for group, tensors in (("params", state.params), ("m", state.moment1), ("v", state.moment2)):
        for name, value in tensors.items():
            arrays[f"{group}/{name}"] = value
    for name, value in (state.best_params or {}).items():
        arrays[f"best/{name}"] = value
    meta = {
        "config": state.config.to_dict(),
        "step": state.step,
        "iteration": state.iteration,
        "best_score": state.best_score,
        "metrics": state.metrics,
        "interval_losses": state.interval_losses,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.debug("Training state saved to %s", path)
    return path


def load_training_state(path: str) -> TrainingState:
    if not os.path.exists(path):
        raise CheckpointError(f"training state not found: {path}")
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
            groups: Dict[str, Dict[str, np.ndarray]] = {"params": {}, "m": {}, "v": {}, "best": {}}
            for key in data.files:
                if key == "meta":
                    continue
                group, name = key.split("/", 1)
                groups[group][name] = np.array(data[key])
        return TrainingState(
            ModelConfig.from_dict(meta["config"]),
            groups["params"],
            groups["m"],
            groups["v"],
            int(meta["step"]),
            int(meta["iteration"]),
            float(meta["best_score"]),
            groups["best"] or None,
            list(meta["metrics"]),
            [float(x) for x in meta.get("interval_losses", [])],
        )
    except (zipfile.BadZipFile, OSError, ValueError, KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"unreadable training state {path}: {exc}") from exc


def load_resume_state(path: str) -> TrainingState:
    """
    State for a resumed run. Accepts the .state.npz itself, or a checkpoint
    path: then the SGWT file must pass its CRC and share the state's model
    configuration.
    """
    if path.endswith(".npz"):
        return load_training_state(path)
    model = load_checkpoint(path)
    state = load_training_state(state_path(path))
    if model.config != state.config:
        raise CheckpointError(f"checkpoint {path} and its training state disagree on the model configuration")
    return state
