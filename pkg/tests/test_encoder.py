import pytest
import os
import sys
import numpy as np
base_path = os.path.join(os.path.abspath(os.path.dirname(__name__)))
sys.path.append(os.path.join(base_path))
from scalefusion_ts.encoder import EncoderLayerParams, encoder_layer, encoder_stack, head_dim, self_attention
from scalefusion_ts.errors import ConfigError
from scalefusion_ts.numerics import Tensor, grad_check, mean_all, sum_squares
from scalefusion_ts.patching import FeatureMap


@pytest.fixture
def layer_params():
    return EncoderLayerParams.create('enc', dim=4, heads=2, d_ff=8, rng=np.random.default_rng(5))


@pytest.fixture
def features():
    return FeatureMap(0, Tensor(np.random.default_rng(6).normal(size=(4, 3))))


def test_head_dim():
    assert head_dim(16, 8) == 2
    with pytest.raises(ConfigError):
        head_dim(6, 4)


def test_create_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        EncoderLayerParams.create('enc', dim=6, heads=4, d_ff=8, rng=np.random.default_rng(0))


def test_parameter_names(layer_params):
    names = [param.name for param in layer_params.parameters()]
    assert len(names) == 12
    assert 'enc.attn.query' in names
    assert 'enc.ff.out_bias' in names


def test_encoder_layer_keeps_shape(layer_params, features):
    out = encoder_layer(features, layer_params)
    assert out.values.shape == (4, 3)
    assert out.layer == 0


def test_zero_output_projections_give_identity(layer_params, features):
    layer_params.output.assign(np.zeros((4, 4)))
    layer_params.ff_out.assign(np.zeros((4, 8)))
    out = encoder_layer(features, layer_params)
    np.testing.assert_array_equal(out.values.numpy(), features.values.numpy())


def test_self_attention_rejects_wrong_width(layer_params):
    with pytest.raises(ConfigError):
        self_attention(FeatureMap(0, Tensor(np.ones((6, 2)))), layer_params)


def test_masked_patch_does_not_leak(layer_params, features):
    mask = np.array([False, True, False])
    changed = features.values.numpy()
    changed[:, 1] = 100.0
    first = encoder_layer(FeatureMap(0, features.values, mask), layer_params).values.numpy()
    second = encoder_layer(FeatureMap(0, Tensor(changed), mask), layer_params).values.numpy()
    np.testing.assert_array_equal(first[:, [0, 2]], second[:, [0, 2]])


def test_masked_patch_matches_shorter_input(layer_params, features):
    mask = np.array([False, True, False])
    full = encoder_layer(FeatureMap(0, features.values, mask), layer_params).values.numpy()
    short = encoder_layer(FeatureMap(0, Tensor(features.values.numpy()[:, [0, 2]])), layer_params).values.numpy()
    np.testing.assert_allclose(full[:, [0, 2]], short, atol=1e-12)


def test_encoder_stack_gradients(features):
    rng = np.random.default_rng(7)
    layers = [EncoderLayerParams.create(f'enc.{depth}', 4, 2, 8, rng) for depth in range(2)]
    weights = Tensor(rng.normal(size=(4, 3)))

    def f():
        out = encoder_stack(features, layers).values
        return 0.1 * sum_squares(out) + mean_all(out * weights)

    params = [param for layer in layers for param in layer.parameters()]
    report = grad_check(f, params, eps=1e-6, samples_per_param=6)
    assert report.passed(1e-6), report.per_parameter


def hand_set_layer(query, key, value, output):
    params = EncoderLayerParams.create('hand', dim=2, heads=1, d_ff=2, rng=np.random.default_rng(0))
    for param, data in ((params.query, query), (params.key, key), (params.value, value), (params.output, output)):
        param.assign(np.array(data, dtype=np.float64))

    return params


def test_self_attention_two_patches_by_hand():
    params = hand_set_layer(np.eye(2), np.eye(2), [[1.0, 0.0], [0.0, 2.0]], np.eye(2))
    out = self_attention(FeatureMap(0, Tensor(np.eye(2))), params).values.numpy()
    # scores are the identity, scaled by 1/sqrt(2)
    near = 1.0 / (1.0 + np.exp(-1.0 / np.sqrt(2.0)))
    far = 1.0 - near
    np.testing.assert_allclose(out, [[near, far], [2.0 * far, 2.0 * near]], atol=1e-10)


def test_self_attention_single_patch_by_hand():
    value = [[1.0, -1.0], [0.5, 2.0]]
    output = [[0.0, 1.0], [3.0, 0.0]]
    params = hand_set_layer([[4.0, 1.0], [2.0, 0.0]], [[1.0, 3.0], [0.0, 1.0]], value, output)
    patch = np.array([[0.3], [-0.7]])
    out = self_attention(FeatureMap(0, Tensor(patch)), params).values.numpy()
    np.testing.assert_allclose(out, np.array(output) @ np.array(value) @ patch, atol=1e-12)
