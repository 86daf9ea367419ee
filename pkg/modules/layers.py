"""
Layers Module
Building blocks shared by the keypoint encoder and the attention layers.
Parameters live in flat name -> array dicts; layers read them through the
Var bindings of the current tape.
"""
from typing import Dict, Mapping, Sequence

import numpy as np

from modules.autodiff import Var, reduce_mean, relu, sqrt

NORM_EPS = 1e-5


def init_linear(rng: np.random.Generator, prefix: str, fan_in: int, fan_out: int) -> Dict[str, np.ndarray]:
    """Scaled-uniform weights with variance 1/fan_in, zero bias."""
    limit = np.sqrt(3.0 / fan_in)
    return {
        f"{prefix}.weight": rng.uniform(-limit, limit, size=(fan_in, fan_out)),
        f"{prefix}.bias": np.zeros(fan_out),
    }


def init_mlp(
    rng: np.random.Generator, prefix: str, widths: Sequence[int], normalization: bool
) -> Dict[str, np.ndarray]:
    params: Dict[str, np.ndarray] = {}
    last = len(widths) - 2
    for k in range(len(widths) - 1):
        params.update(init_linear(rng, f"{prefix}.{k}", widths[k], widths[k + 1]))
        if normalization and k < last:
            params[f"{prefix}.{k}.norm.scale"] = np.ones(widths[k + 1])
            params[f"{prefix}.{k}.norm.shift"] = np.zeros(widths[k + 1])
    return params


def linear(x: Var, params: Mapping[str, Var], prefix: str) -> Var:
    return x @ params[f"{prefix}.weight"] + params[f"{prefix}.bias"]


def set_norm(x: Var, scale: Var, shift: Var) -> Var:
    """Per-feature normalization over the keypoint (row) axis of one set."""
    centered = x - reduce_mean(x, axis=0, keepdims=True)
    variance = reduce_mean(centered * centered, axis=0, keepdims=True)
    return centered / sqrt(variance + NORM_EPS) * scale + shift


def mlp(x: Var, params: Mapping[str, Var], prefix: str, num_layers: int, normalization: bool) -> Var:
    """Linear layers with normalization + ReLU between them, nothing after the last."""
    for k in range(num_layers):
        x = linear(x, params, f"{prefix}.{k}")
        if k < num_layers - 1:
            if normalization:
                x = set_norm(x, params[f"{prefix}.{k}.norm.scale"], params[f"{prefix}.{k}.norm.shift"])
            x = relu(x)
    return x
