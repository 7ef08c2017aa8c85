"""
Primitive layers of the reference network

All functions take channel-first arrays of shape (batch, channels, D, H, W)
and are pure. Convolutions are evaluated as one matrix product per kernel
offset, accumulated in a fixed offset order, so results do not depend on
scheduling.
"""

import numpy as np

from errors import ContractError


def _weight(params, name):
    try:
        return params[f'{name}.weight'], params[f'{name}.bias']
    except KeyError as e:
        raise ContractError(f'layer {name}: missing parameter {e.args[0]}') from None


def _check_input(x, name):
    if x.ndim != 5:
        raise ContractError(f'layer {name}: expected a rank-5 feature map, got shape {x.shape}')


def conv3d_forward(x, params, name, stride=1, padding=None):
    """
    Cross-correlation with a cubic kernel

    Args:
        x: input (B, Cin, D, H, W)
        params: ParamStore (or mapping) holding '<name>.weight' (Cout, Cin, k, k, k)
                and '<name>.bias' (Cout,)
        name: layer name used for parameter lookup and error messages
        stride: 1 or 2
        padding: zero padding per side; defaults to k // 2

    Returns:
        (B, Cout, D', H', W') with D' = floor((D + 2p - k) / s) + 1
    """
    _check_input(x, name)
    weight, bias = _weight(params, name)
    cout, cin, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if x.shape[1] != cin:
        raise ContractError(f'layer {name}: expects {cin} input channels, got {x.shape[1]}')
    if padding is None:
        padding = k // 2
    if padding:
        x = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    out_dims = [(n - k) // stride + 1 for n in x.shape[2:]]
    if any(n < 1 for n in out_dims):
        raise ContractError(f'layer {name}: input {x.shape[2:]} too small for kernel {k}')
    d, h, w = out_dims

    out = np.zeros((x.shape[0], cout, d, h, w), dtype=np.result_type(x, weight))
    for i in range(k):
        for j in range(k):
            for l in range(k):
                window = x[:, :,
                           i:i + stride * (d - 1) + 1:stride,
                           j:j + stride * (h - 1) + 1:stride,
                           l:l + stride * (w - 1) + 1:stride]
                # (Cout, Cin) x (B, Cin, d, h, w) -> (Cout, B, d, h, w)
                out += np.moveaxis(np.tensordot(weight[:, :, i, j, l], window, axes=([1], [1])), 0, 1)
    out += bias.reshape(1, cout, 1, 1, 1)
    return out


def conv_transpose3d_forward(x, params, name):
    """
    Transposed convolution with kernel 2 and stride 2 (exact doubling)

    Weight layout is (Cin, Cout, 2, 2, 2); every output voxel receives exactly
    one kernel tap, so there is no overlap between neighbouring inputs.
    """
    _check_input(x, name)
    weight, bias = _weight(params, name)
    cin, cout = weight.shape[0], weight.shape[1]
    if x.shape[1] != cin:
        raise ContractError(f'layer {name}: expects {cin} input channels, got {x.shape[1]}')
    b, _, d, h, w = x.shape
    out = np.empty((b, cout, 2 * d, 2 * h, 2 * w), dtype=np.result_type(x, weight))
    for i in range(2):
        for j in range(2):
            for l in range(2):
                tap = np.tensordot(weight[:, :, i, j, l], x, axes=([0], [1]))  # (Cout, B, d, h, w)
                out[:, :, i::2, j::2, l::2] = np.moveaxis(tap, 0, 1)
    out += bias.reshape(1, cout, 1, 1, 1)
    return out


def instance_norm(x, epsilon=1e-5):
    """Per-sample, per-channel normalization over the spatial axes"""
    mean = x.mean(axis=(2, 3, 4), keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=(2, 3, 4), keepdims=True)
    return centered / np.sqrt(var + epsilon)


def leaky_relu(x, slope=0.01):
    return np.where(x >= 0, x, slope * x)


def softmax(x, axis=1):
    """Softmax stabilised by subtracting the maximum along the axis"""
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def conv_norm_act(x, params, name, config, stride=1):
    """conv -> instance norm -> LeakyReLU"""
    y = conv3d_forward(x, params, name, stride=stride)
    return leaky_relu(instance_norm(y, config.norm_epsilon), config.leaky_slope)


def residual_block(x, params, name, config):
    """
    LeakyReLU(IN(conv2(LeakyReLU(IN(conv1(x))))) + skip(x))

    The skip path is the identity when channel counts match and a 1x1x1
    projection ('<name>.skip') otherwise.
    """
    y = conv_norm_act(x, params, f'{name}.conv1', config)
    y = instance_norm(conv3d_forward(y, params, f'{name}.conv2'), config.norm_epsilon)
    if f'{name}.skip.weight' in params:
        skip = conv3d_forward(x, params, f'{name}.skip', padding=0)
    else:
        if x.shape[1] != y.shape[1]:
            raise ContractError(f'layer {name}: {x.shape[1]} -> {y.shape[1]} channels needs a skip projection')
        skip = x
    return leaky_relu(y + skip, config.leaky_slope)
