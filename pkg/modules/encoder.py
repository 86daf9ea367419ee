"""
Encoder Module
Keypoint encoder: initial node state = descriptor + MLP(normalized x, y, c).
"""
from typing import Dict, Mapping, Sequence

import numpy as np

from modules.autodiff import Var
from modules.errors import ShapeError
from modules.layers import init_mlp, mlp

ENCODER_WIDTHS = (32, 64, 128, 256)
PREFIX = "encoder.mlp"


def encoder_widths(descriptor_dim: int, hidden: Sequence[int] = ENCODER_WIDTHS) -> tuple:
    return (3, *hidden, descriptor_dim)


def init_encoder_params(
    rng: np.random.Generator, descriptor_dim: int, normalization: bool = True, hidden: Sequence[int] = ENCODER_WIDTHS
) -> Dict[str, np.ndarray]:
    return init_mlp(rng, PREFIX, encoder_widths(descriptor_dim, hidden), normalization)


def encode_keypoints(
    positions: Var,
    descriptors: Var,
    params: Mapping[str, Var],
    normalization: bool = True,
    num_layers: int = len(ENCODER_WIDTHS) + 1,
) -> Var:
    """positions: (M, 3) normalized keypoints; descriptors: (M, D)."""
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ShapeError(f"encoder: positions must be (M, 3), got {positions.shape}")
    if descriptors.ndim != 2 or descriptors.shape[0] != positions.shape[0]:
        raise ShapeError(f"encoder: descriptors {descriptors.shape} do not pair with positions {positions.shape}")
    out_width = params[f"{PREFIX}.{num_layers - 1}.weight"].shape[1]
    if descriptors.shape[1] != out_width:
        raise ShapeError(f"encoder: descriptor width {descriptors.shape[1]} does not match encoder output {out_width}")
    return descriptors + mlp(positions, params, PREFIX, num_layers, normalization)
