"""
GNN Module
Multiplex attentional graph network: alternating self-/cross-attention
blocks with residual MLP updates, followed by a shared linear projection
that produces the matching descriptors.
"""
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from modules.autodiff import Var, concat, softmax
from modules.errors import ShapeError
from modules.layers import init_linear, init_mlp, linear, mlp

EDGE_SELF = "self"
EDGE_CROSS = "cross"
FINAL = "gnn.final"


def layer_prefix(index: int) -> str:
    return f"gnn.layer{index}"


def alternating_edges(num_pairs: int) -> Tuple[str, ...]:
    """Block l (1-based) is self-attention for odd l, cross-attention for even l."""
    return (EDGE_SELF, EDGE_CROSS) * num_pairs


@dataclass
class NodeStates:
    states_a: Var
    states_b: Var
    layer: int = 0


@dataclass
class LayerAttention:
    """Per-head attention weights of one block, queries of A and of B."""

    layer: int
    edge_type: str
    weights_a: List[np.ndarray]
    weights_b: List[np.ndarray]


@dataclass
class GnnOutput:
    f_a: Var
    f_b: Var
    attention: Optional[List[LayerAttention]] = None


def check_heads(dim: int, heads: int) -> None:
    if heads < 1 or dim % heads:
        raise ShapeError(f"head count {heads} must divide descriptor width {dim}")


def init_layer_params(rng: np.random.Generator, index: int, dim: int, normalization: bool) -> Dict[str, np.ndarray]:
    prefix = layer_prefix(index)
    params: Dict[str, np.ndarray] = {}
    for name in ("q", "k", "v", "merge"):
        params.update(init_linear(rng, f"{prefix}.{name}", dim, dim))
    params.update(init_mlp(rng, f"{prefix}.mlp", (2 * dim, 2 * dim, dim), normalization))
    return params


def init_gnn_params(
    rng: np.random.Generator, dim: int, edge_types: Sequence[str], heads: int, normalization: bool = True
) -> Dict[str, np.ndarray]:
    check_heads(dim, heads)
    params: Dict[str, np.ndarray] = {}
    for index in range(len(edge_types)):
        params.update(init_layer_params(rng, index, dim, normalization))
    final = init_linear(rng, FINAL, dim, dim)
    # weight variance 1/dim^2 keeps the initial matching scores O(1)
    final[f"{FINAL}.weight"] /= np.sqrt(dim)
    params.update(final)
    return params


def attention_aggregate(queries: Var, keys: Var, values: Var, scale: Optional[float] = None) -> Tuple[Var, Var]:
    """Softmax over sources of q_i . k_j, then the weighted mean of the values."""
    if keys.shape[0] == 0:
        raise ShapeError("attention: no sources to attend")
    if keys.shape[0] != values.shape[0]:
        raise ShapeError(f"attention: {keys.shape[0]} keys but {values.shape[0]} values")
    logits = queries @ keys.T
    if scale is not None:
        logits = logits * scale
    weights = softmax(logits, axis=1)
    return weights @ values, weights


def multi_head_attention(
    states_q: Var,
    states_s: Var,
    params: Mapping[str, Var],
    prefix: str,
    heads: int,
    scaled: bool = False,
    record: Optional[List[np.ndarray]] = None,
) -> Var:
    dim = states_q.shape[1]
    check_heads(dim, heads)
    q = linear(states_q, params, f"{prefix}.q")
    k = linear(states_s, params, f"{prefix}.k")
    v = linear(states_s, params, f"{prefix}.v")
    head_dim = dim // heads
    scale = 1.0 / np.sqrt(head_dim) if scaled else None
    messages = []
    for h in range(heads):
        cols = (slice(None), slice(h * head_dim, (h + 1) * head_dim))
        message, weights = attention_aggregate(q[cols], k[cols], v[cols], scale)
        messages.append(message)
        if record is not None:
            record.append(weights.value)
    return linear(concat(messages, axis=1), params, f"{prefix}.merge")


def layer_update(
    states: NodeStates,
    params: Mapping[str, Var],
    index: int,
    edge_type: str,
    heads: int,
    normalization: bool = True,
    scaled: bool = False,
    record: Optional[List[LayerAttention]] = None,
) -> NodeStates:
    """x <- x + MLP([x || message]) for both images at once, with shared weights."""
    if edge_type not in (EDGE_SELF, EDGE_CROSS):
        raise ShapeError(f"unknown edge type {edge_type!r}")
    prefix = layer_prefix(index)
    a, b = states.states_a, states.states_b
    source_a, source_b = (a, b) if edge_type == EDGE_SELF else (b, a)
    weights_a: Optional[List[np.ndarray]] = [] if record is not None else None
    weights_b: Optional[List[np.ndarray]] = [] if record is not None else None
    message_a = multi_head_attention(a, source_a, params, prefix, heads, scaled, weights_a)
    message_b = multi_head_attention(b, source_b, params, prefix, heads, scaled, weights_b)
    new_a = a + mlp(concat([a, message_a], axis=1), params, f"{prefix}.mlp", 2, normalization)
    new_b = b + mlp(concat([b, message_b], axis=1), params, f"{prefix}.mlp", 2, normalization)
    if record is not None:
        record.append(LayerAttention(index + 1, edge_type, weights_a, weights_b))
    return NodeStates(new_a, new_b, states.layer + 1)


def gnn_forward(
    initial: NodeStates,
    params: Mapping[str, Var],
    edge_types: Sequence[str],
    heads: int,
    normalization: bool = True,
    scaled: bool = False,
    record_attention: bool = False,
) -> GnnOutput:
    if initial.states_a.shape[1] != initial.states_b.shape[1]:
        raise ShapeError(f"state widths differ: {initial.states_a.shape} vs {initial.states_b.shape}")
    record: Optional[List[LayerAttention]] = [] if record_attention else None
    states = initial
    for index, edge_type in enumerate(edge_types):
        states = layer_update(states, params, index, edge_type, heads, normalization, scaled, record)
    f_a = linear(states.states_a, params, FINAL)
    f_b = linear(states.states_b, params, FINAL)
    return GnnOutput(f_a, f_b, record)
