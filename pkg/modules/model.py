"""
Model Module
Wires encoder -> attentional GNN -> optimal matching layer into one forward
pass, and owns the model configuration and parameter initialization.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from modules.autodiff import Bindings, Tape, Var
from modules.encoder import ENCODER_WIDTHS, encode_keypoints, init_encoder_params
from modules.errors import ConfigError, MatchingError
from modules.features import LocalFeatureSet, normalize_keypoints
from modules.gnn import (
    EDGE_SELF,
    LayerAttention,
    NodeStates,
    alternating_edges,
    gnn_forward,
    init_gnn_params,
)
from modules.matcher import (
    MatchSet,
    PartialAssignment,
    augment_with_dustbins,
    compute_scores,
    extract_matches,
    sinkhorn,
)

logger = logging.getLogger(__name__)

VARIANTS = ("full", "no_gnn", "no_cross", "no_positional")
DUSTBIN = "matcher.z"

ModelParams = Dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    """
    num_layers counts self/cross pairs: the GNN holds 2 * num_layers
    attention blocks (the "no_gnn" variant holds none).
    """

    descriptor_dim: int = 256
    num_layers: int = 9
    heads: int = 4
    sinkhorn_iterations: int = 100
    variant: str = "full"
    match_threshold: float = 0.2
    normalization: bool = True
    scaled_attention: bool = False
    encoder_hidden: Tuple[int, ...] = ENCODER_WIDTHS
    dustbin_init: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.descriptor_dim < 1 or self.num_layers < 0 or self.sinkhorn_iterations < 1:
            raise ConfigError("descriptor_dim and sinkhorn_iterations must be positive, num_layers non-negative")
        if self.heads < 1 or self.descriptor_dim % self.heads:
            raise ConfigError(f"heads={self.heads} must divide descriptor_dim={self.descriptor_dim}")
        object.__setattr__(self, "encoder_hidden", tuple(int(w) for w in self.encoder_hidden))

    @property
    def edge_types(self) -> Tuple[str, ...]:
        if self.variant == "no_gnn":
            return ()
        if self.variant == "no_cross":
            return (EDGE_SELF,) * (2 * self.num_layers)
        return alternating_edges(self.num_layers)

    @property
    def uses_encoder(self) -> bool:
        return self.variant != "no_positional"

    def to_dict(self) -> dict:
        data = asdict(self)
        data["encoder_hidden"] = list(self.encoder_hidden)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        if "encoder_hidden" in data:
            data["encoder_hidden"] = tuple(data["encoder_hidden"])
        return cls(**data)


@dataclass
class Model:
    config: ModelConfig
    params: ModelParams


def init_model(config: ModelConfig, rng: Union[int, np.random.Generator] = 0) -> Model:
    rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    params: ModelParams = {}
    if config.uses_encoder:
        params.update(init_encoder_params(rng, config.descriptor_dim, config.normalization, config.encoder_hidden))
    params.update(init_gnn_params(rng, config.descriptor_dim, config.edge_types, config.heads, config.normalization))
    params[DUSTBIN] = np.array([config.dustbin_init])
    return Model(config, params)


def count_parameters(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))


def bind_params(tape: Tape, params: Mapping[str, np.ndarray]) -> Bindings:
    return Bindings({name: tape.leaf(name, value) for name, value in params.items()})


@dataclass
class ForwardResult:
    f_a: Var
    f_b: Var
    scores: Var
    assignment: PartialAssignment
    attention: Optional[List[LayerAttention]] = None


def check_inputs(config: ModelConfig, features_a: LocalFeatureSet, features_b: LocalFeatureSet) -> None:
    for name, features in (("A", features_a), ("B", features_b)):
        if features.num_keypoints == 0:
            raise MatchingError(f"image {name} has no keypoints")
        if features.descriptor_dim != config.descriptor_dim:
            raise MatchingError(
                f"image {name} descriptor width {features.descriptor_dim} "
                f"does not match model width {config.descriptor_dim}"
            )


def initial_states(
    bound: Mapping[str, Var], tape: Tape, config: ModelConfig, features: LocalFeatureSet
) -> Var:
    descriptors = tape.constant(features.descriptors)
    if not config.uses_encoder:
        return descriptors
    positions = tape.constant(normalize_keypoints(features))
    return encode_keypoints(
        positions, descriptors, bound, config.normalization, num_layers=len(config.encoder_hidden) + 1
    )

def forward(
    bound: Mapping[str, Var],
    features_a: LocalFeatureSet,
    features_b: LocalFeatureSet,
    config: ModelConfig,
    record_attention: bool = False,
    sinkhorn_tolerance: Optional[float] = None,
) -> ForwardResult:
    """
    Full forward pass on the tape that holds the bound parameters. Sinkhorn
    runs the configured iteration count, and further until the column
    residual reaches sinkhorn_tolerance when one is given.
    """
    check_inputs(config, features_a, features_b)
    tape = bound[DUSTBIN].tape
    x_a = initial_states(bound, tape, config, features_a)
    x_b = initial_states(bound, tape, config, features_b)
    gnn = gnn_forward(
        NodeStates(x_a, x_b),
        bound,
        config.edge_types,
        config.heads,
        config.normalization,
        config.scaled_attention,
        record_attention,
    )
    scores = compute_scores(gnn.f_a, gnn.f_b)
    s_bar = augment_with_dustbins(scores, bound[DUSTBIN])
    assignment = sinkhorn(s_bar, config.sinkhorn_iterations, sinkhorn_tolerance)
    return ForwardResult(gnn.f_a, gnn.f_b, scores, assignment, gnn.attention)


@dataclass
class MatchResult:
    matches: MatchSet
    p_bar: np.ndarray
    column_residual: float
    attention: Optional[List[LayerAttention]] = None
    sinkhorn_iterations: int = 0


def match_pair(
    model: Model,
    features_a: LocalFeatureSet,
    features_b: LocalFeatureSet,
    threshold: Optional[float] = None,
    record_attention: bool = False,
    dtype=np.float64,
    sinkhorn_tolerance: Optional[float] = None,
) -> MatchResult:
    tape = Tape(dtype)
    result = forward(
        bind_params(tape, model.params), features_a, features_b, model.config, record_attention, sinkhorn_tolerance
    )
    threshold = model.config.match_threshold if threshold is None else threshold
    assignment = result.assignment
    matches = extract_matches(assignment, threshold)
    return MatchResult(
        matches, np.array(assignment.values), assignment.column_residual, result.attention, assignment.iterations
    )
