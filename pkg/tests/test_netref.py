import numpy as np
import pytest

from errors import ConfigError, ContractError, PyramidError, SizeError
from netref import EncoderPyramid, GlobalEncoder, ModelConfig, ParamStore, build_params, infiltrnet_forward, param_shapes
from netref.encoders import cnn_encoder_forward, global_encoder_forward
from netref.fusion import attention_weights, cross_attention_fuse, fusion_param_shapes, scaled_dot_attention
from netref.layers import conv3d_forward, conv_transpose3d_forward, instance_norm, softmax
from netref.model import infiltrnet_logits
from netref.selfcheck import check_fusion
from oracles import naive_conv3d


@pytest.mark.parametrize('stride', [1, 2])
def test_conv3d_matches_direct_loops(rng, stride):
    x = rng.standard_normal((1, 3, 6, 5, 4))
    params = {'c.weight': rng.standard_normal((2, 3, 3, 3, 3)), 'c.bias': rng.standard_normal(2)}
    out = conv3d_forward(x, params, 'c', stride=stride)
    expected = naive_conv3d(x, params['c.weight'], params['c.bias'], stride=stride, padding=1)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-10)


def test_conv3d_channel_contract(rng):
    params = {'c.weight': np.zeros((2, 3, 3, 3, 3)), 'c.bias': np.zeros(2)}
    with pytest.raises(ContractError, match='layer c'):
        conv3d_forward(rng.standard_normal((1, 4, 4, 4, 4)), params, 'c')
    with pytest.raises(ContractError):
        conv3d_forward(rng.standard_normal((1, 3, 4, 4, 4)), {}, 'c')


def test_transposed_conv_places_one_tap_per_voxel(rng):
    x = rng.standard_normal((1, 2, 2, 3, 1))
    weight = rng.standard_normal((2, 3, 2, 2, 2))
    bias = rng.standard_normal(3)
    out = conv_transpose3d_forward(x, {'u.weight': weight, 'u.bias': bias}, 'u')
    assert out.shape == (1, 3, 4, 6, 2)
    z, y, w, i, j, l = 1, 2, 0, 1, 0, 1
    expected = weight[:, :, i, j, l].T @ x[0, :, z, y, w] + bias
    np.testing.assert_allclose(out[0, :, 2 * z + i, 2 * y + j, 2 * w + l], expected)


def test_instance_norm_and_softmax(rng):
    x = rng.standard_normal((1, 3, 4, 4, 4)) * 5 + 2
    y = instance_norm(x)
    np.testing.assert_allclose(y.mean(axis=(2, 3, 4)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(2, 3, 4)), 1.0, atol=1e-5)
    p = softmax(np.array([[1000.0, 1000.0, -1000.0]]), axis=1)
    np.testing.assert_allclose(p, [[0.5, 0.5, 0.0]])


def test_channel_schedules_and_config_validation():
    config = ModelConfig()
    assert config.cnn_channels == (32, 32, 64, 128, 256)
    assert config.global_channels == (24, 48, 96, 192)
    assert config.fusion_dims == (32, 64, 128, 256)
    with pytest.raises(ConfigError):
        ModelConfig(base_filters=0)
    with pytest.raises(ConfigError):
        ModelConfig(num_classes=3)


def test_fusion_dims_must_match_cnn_channels_with_residual():
    with pytest.raises(ConfigError, match='fusion_residual'):
        ModelConfig(base_filters=4, fusion_dims=(8, 8, 8, 8))
    assert ModelConfig(base_filters=4, fusion_dims=(4, 8, 16, 32)).fusion_dims == (4, 8, 16, 32)
    free = ModelConfig(base_filters=4, fusion_dims=(8, 8, 8, 8), fusion_residual=False)
    assert free.fusion_dims == (8, 8, 8, 8)


def test_encoder_pyramids(rng, tiny_model):
    x = rng.standard_normal((1, 4, 16, 16, 16))
    params = build_params(tiny_model, 0)
    c = cnn_encoder_forward(x, params, tiny_model)
    assert c.factors == (1, 2, 4, 8, 16)
    assert c.channels == (2, 2, 4, 8, 16)
    assert c.level(16).shape == (1, 16, 1, 1, 1)
    s = global_encoder_forward(x, params, tiny_model)
    assert s.factors == (2, 4, 8, 16)
    assert s.channels == (2, 4, 8, 16)
    assert s.level(2).shape == (1, 2, 8, 8, 8)


def test_forward_shapes_and_probabilities(rng, tiny_model):
    x = rng.standard_normal((4, 16, 16, 32))
    params = build_params(tiny_model, 3)
    logits, aux = infiltrnet_logits(x, params, tiny_model)
    assert logits.shape == (1, 4, 16, 16, 32)
    assert [a.shape[2:] for a in aux] == [(8, 8, 16), (4, 4, 8), (2, 2, 4)]
    probs = infiltrnet_forward(x, params, tiny_model)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(probs >= 0)


def test_forward_is_deterministic(rng, tiny_model):
    x = rng.standard_normal((4, 16, 16, 16))
    a = infiltrnet_forward(x, build_params(tiny_model, 7), tiny_model)
    b = infiltrnet_forward(x, build_params(tiny_model, 7), tiny_model)
    np.testing.assert_array_equal(a, b)
    c = infiltrnet_forward(x, build_params(tiny_model, 8), tiny_model)
    assert not np.array_equal(a, c)


def test_input_must_be_divisible_by_16(rng, tiny_model):
    params = build_params(tiny_model, 0)
    with pytest.raises(SizeError):
        infiltrnet_forward(rng.standard_normal((4, 16, 16, 24)), params, tiny_model)
    with pytest.raises(ContractError):
        infiltrnet_forward(rng.standard_normal((3, 16, 16, 16)), params, tiny_model)


def test_cnn_only_equals_full_with_silent_fusion(rng, tiny_model):
    x = rng.standard_normal((4, 16, 16, 16))
    params = build_params(tiny_model, 5, 'full')
    for name in params.names():
        if name.startswith('fusion.') and '.out.' in name:
            params[name] = np.zeros_like(params[name])
    full = infiltrnet_forward(x, params, tiny_model, 'full')
    cnn_only = infiltrnet_forward(x, params, tiny_model, 'cnn_only')
    np.testing.assert_allclose(full, cnn_only, rtol=0, atol=1e-12)


def test_shared_tensors_match_across_modes(tiny_model):
    full = build_params(tiny_model, 11, 'full')
    cnn_only = build_params(tiny_model, 11, 'cnn_only')
    assert set(cnn_only.names()) < set(full.names())
    for name in cnn_only:
        np.testing.assert_array_equal(cnn_only[name], full[name])


def test_swin_only_has_its_own_decoder(rng, tiny_model):
    shapes = param_shapes(tiny_model, 'swin_only')
    assert not any(name.startswith('cnn.') for name in shapes)
    assert any(name.startswith('swin_decoder.') for name in shapes)
    probs = infiltrnet_forward(rng.standard_normal((4, 16, 16, 16)), build_params(tiny_model, 0, 'swin_only'),
                               tiny_model, 'swin_only')
    assert probs.shape == (1, 4, 16, 16, 16)


def test_unknown_mode(tiny_model):
    with pytest.raises(ConfigError):
        param_shapes(tiny_model, 'both')


class BrokenEncoder(GlobalEncoder):
    def __init__(self):
        super().__init__('broken')

    def encode(self, x, params, config):
        return EncoderPyramid((x,), (2,))


class WrongTypeEncoder(GlobalEncoder):
    def encode(self, x, params, config):
        return [x]


def test_global_encoder_contract(rng, tiny_model):
    x = rng.standard_normal((1, 4, 16, 16, 16))
    with pytest.raises(PyramidError, match='broken'):
        global_encoder_forward(x, {}, tiny_model, BrokenEncoder())
    with pytest.raises(PyramidError):
        global_encoder_forward(x, {}, tiny_model, WrongTypeEncoder())
    with pytest.raises(NotImplementedError):
        GlobalEncoder().encode(x, {}, tiny_model)


def _softmax_rows(q, k):
    # independent reference: per-row softmax with explicit loops
    rows = []
    for query in q:
        scores = [float(np.dot(query, key)) / np.sqrt(q.shape[1]) for key in k]
        top = max(scores)
        e = [np.exp(s - top) for s in scores]
        rows.append([x / sum(e) for x in e])
    return np.array(rows)


def test_attention_rows_sum_to_one(rng):
    q, k = rng.standard_normal((7, 4)), rng.standard_normal((5, 4))
    reference = _softmax_rows(q, k)
    np.testing.assert_allclose(reference.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(attention_weights(q, k), reference, atol=1e-12)
    v = rng.standard_normal((5, 3))
    np.testing.assert_allclose(scaled_dot_attention(q, k, v), reference @ v, atol=1e-12)
    with pytest.raises(ContractError):
        scaled_dot_attention(q, rng.standard_normal((5, 3)), v)


def test_attention_is_equivariant_to_key_value_order(rng):
    q, k, v = rng.standard_normal((6, 4)), rng.standard_normal((9, 4)), rng.standard_normal((9, 2))
    order = rng.permutation(9)
    np.testing.assert_allclose(scaled_dot_attention(q, k[order], v[order]), scaled_dot_attention(q, k, v), atol=1e-12)


def test_identical_keys_average_the_values(rng):
    q = rng.standard_normal((5, 3))
    k = np.tile(rng.standard_normal((1, 3)), (8, 1))
    v = rng.standard_normal((8, 4))
    np.testing.assert_allclose(scaled_dot_attention(q, k, v), np.tile(v.mean(axis=0), (5, 1)), atol=1e-12)


def test_fusion_output_shape(rng, tiny_model):
    params = ParamStore.initialize(fusion_param_shapes('f', 4, 3, 4), 0)
    c = rng.standard_normal((1, 4, 2, 3, 2))
    s = rng.standard_normal((1, 3, 2, 3, 2))
    assert cross_attention_fuse(c, s, params, 'f', tiny_model).shape == (1, 4, 2, 3, 2)
    with pytest.raises(ContractError):
        cross_attention_fuse(c, s[:, :, :1], params, 'f', tiny_model)


@pytest.mark.parametrize('seed', range(3))
def test_fusion_matches_loop_oracle(seed):
    report = check_fusion(seed)
    assert report['passed'], report
    assert report['max_abs_diff'] < 1e-6
    assert report['max_row_sum_error'] < 1e-6
    assert report['single_token_error'] < 1e-6


def test_param_store_save_load(tmp_path, tiny_model):
    params = build_params(tiny_model, 2, 'cnn_only')
    path = str(tmp_path / 'weights.json')
    params.save(path)
    loaded = ParamStore.load(path)
    assert loaded.names() == params.names()
    for name in params:
        np.testing.assert_array_equal(loaded[name], params[name])
    loaded.check_shapes(param_shapes(tiny_model, 'cnn_only'))
    with pytest.raises(ContractError):
        loaded.check_shapes(param_shapes(tiny_model, 'full'))


def test_initialization_bounds(tiny_model):
    params = build_params(tiny_model, 0)
    weight = params['cnn.level1.down.weight']
    assert np.max(np.abs(weight)) <= 1.0 / np.sqrt(weight.shape[1] * 27)
    assert np.max(np.abs(params['cnn.level1.down.bias'])) <= 1.0 / np.sqrt(weight.shape[1] * 27)
