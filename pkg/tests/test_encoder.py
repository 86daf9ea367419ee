import numpy as np
import pytest
from numpy.testing import assert_allclose

from modules import autodiff as ad
from modules.encoder import PREFIX, encode_keypoints, encoder_widths, init_encoder_params
from modules.errors import ShapeError
from modules.layers import NORM_EPS


def _run(params, positions, descriptors, normalization=True, hidden=(32, 64, 128, 256)):
    inputs = {**params, "positions": positions, "descriptors": descriptors}
    return ad.evaluate(
        lambda x: encode_keypoints(x["positions"], x["descriptors"], x, normalization, len(hidden) + 1), inputs
    ).value


def _numpy_forward(params, positions, descriptors, normalization, layers):
    x = positions
    for k in range(layers):
        x = x @ params[f"{PREFIX}.{k}.weight"] + params[f"{PREFIX}.{k}.bias"]
        if k < layers - 1:
            if normalization:
                centered = x - x.mean(axis=0, keepdims=True)
                x = centered / np.sqrt((centered ** 2).mean(axis=0, keepdims=True) + NORM_EPS)
                x = x * params[f"{PREFIX}.{k}.norm.scale"] + params[f"{PREFIX}.{k}.norm.shift"]
            x = np.maximum(x, 0.0)
    return descriptors + x


def test_layer_widths():
    params = init_encoder_params(np.random.default_rng(0), 16)
    widths = encoder_widths(16)
    assert widths == (3, 32, 64, 128, 256, 16)
    for k in range(5):
        assert params[f"{PREFIX}.{k}.weight"].shape == (widths[k], widths[k + 1])
    assert f"{PREFIX}.4.norm.scale" not in params


def test_zero_mlp_returns_descriptors(rng):
    params = {k: np.zeros_like(v) for k, v in init_encoder_params(rng, 8).items()}
    descriptors = rng.normal(size=(6, 8))
    out = _run(params, rng.uniform(-0.5, 0.5, (6, 3)), descriptors)
    assert np.array_equal(out, descriptors)


def test_single_keypoint_against_hand_forward(rng):
    params = init_encoder_params(rng, 8, normalization=False)
    positions = rng.uniform(-0.5, 0.5, (1, 3))
    descriptors = rng.normal(size=(1, 8))
    expected = _numpy_forward(params, positions, descriptors, False, 5)
    assert_allclose(_run(params, positions, descriptors, normalization=False), expected, rtol=1e-12, atol=1e-12)


def test_normalized_forward_against_numpy(rng):
    params = init_encoder_params(rng, 8)
    positions = rng.uniform(-0.5, 0.5, (10, 3))
    descriptors = rng.normal(size=(10, 8))
    expected = _numpy_forward(params, positions, descriptors, True, 5)
    assert_allclose(_run(params, positions, descriptors), expected, rtol=1e-10, atol=1e-10)


def test_rows_are_permutation_equivariant(rng):
    params = init_encoder_params(rng, 8)
    positions = rng.uniform(-0.5, 0.5, (7, 3))
    descriptors = rng.normal(size=(7, 8))
    order = rng.permutation(7)
    out = _run(params, positions, descriptors)
    permuted = _run(params, positions[order], descriptors[order])
    assert_allclose(permuted, out[order], atol=1e-12)


def test_descriptor_width_mismatch(rng):
    params = init_encoder_params(rng, 8)
    with pytest.raises(ShapeError):
        _run(params, np.zeros((2, 3)), np.zeros((2, 4)))


def test_positions_must_have_three_columns(rng):
    params = init_encoder_params(rng, 8)
    with pytest.raises(ShapeError):
        _run(params, np.zeros((2, 2)), np.zeros((2, 8)))


def test_gradient_matches_finite_differences(rng):
    hidden = (16, 16)
    params = init_encoder_params(rng, 8, hidden=hidden)
    positions = rng.uniform(-0.5, 0.5, (5, 3))
    descriptors = rng.normal(size=(5, 8))
    weights = rng.normal(size=(5, 8))

    def f(x):
        tape = x[f"{PREFIX}.0.weight"].tape
        out = encode_keypoints(tape.constant(positions), tape.constant(descriptors), x, True, len(hidden) + 1)
        return ad.reduce_sum(out * tape.constant(weights))

    assert ad.check_gradient(f, params).max_error < 1e-4
