"""
Bidirectional cross-attention fusion of CNN and global-context features

    F = Proj[ Attn(Q_C, K_S, V_S) || Attn(Q_S, K_C, V_C) ]

Both branches are first projected to d channels by 1x1x1 convolutions; the
projected tokens serve as query, key and value of their branch (single head).
Proj is a 1x1x1 convolution followed by instance norm and LeakyReLU. With
config.fusion_residual the CNN features are added to the result.
"""

import numpy as np

from errors import ContractError
from netref.layers import conv3d_forward, instance_norm, leaky_relu

QUERY_BLOCK = 2048


def scaled_dot_attention(q, k, v, d=None):
    """
    softmax(Q K^T / sqrt(d)) V, row-wise softmax stabilised by the row max

    Args:
        q: (Nq, d) queries
        k: (Nk, d) keys
        v: (Nk, dv) values
        d: scale dimension (defaults to q.shape[1])

    Returns:
        (Nq, dv)
    """
    if q.shape[1] != k.shape[1]:
        raise ContractError(f'attention: query width {q.shape[1]} != key width {k.shape[1]}')
    if k.shape[0] != v.shape[0]:
        raise ContractError(f'attention: {k.shape[0]} keys but {v.shape[0]} values')
    scale = 1.0 / np.sqrt(d if d is not None else q.shape[1])
    out = np.empty((q.shape[0], v.shape[1]), dtype=np.result_type(q, k, v))
    # rows are independent; blocking only bounds the size of the score matrix
    for start in range(0, q.shape[0], QUERY_BLOCK):
        scores = (q[start:start + QUERY_BLOCK] @ k.T) * scale
        scores -= scores.max(axis=1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=1, keepdims=True)
        out[start:start + QUERY_BLOCK] = weights @ v
    return out


def attention_weights(q, k, d=None):
    """The full softmax weight matrix (for inspection and tests)"""
    scale = 1.0 / np.sqrt(d if d is not None else q.shape[1])
    scores = (q @ k.T) * scale
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    return weights / weights.sum(axis=1, keepdims=True)


def _tokens(feature):
    # (1, d, D, H, W) -> (D*H*W, d)
    return feature[0].reshape(feature.shape[1], -1).T


def fusion_param_shapes(name, cnn_channels, global_channels, d):
    return {
        f'{name}.proj_c.weight': (d, cnn_channels, 1, 1, 1),
        f'{name}.proj_c.bias': (d,),
        f'{name}.proj_s.weight': (d, global_channels, 1, 1, 1),
        f'{name}.proj_s.bias': (d,),
        f'{name}.out.weight': (d, 2 * d, 1, 1, 1),
        f'{name}.out.bias': (d,),
    }


def fusion_terms(c, s, params, name):
    """
    Projected inputs and the concatenated attention terms, before Proj

    Returns:
        (c_proj, s_proj, concat) with concat of shape (1, 2d, D, H, W)
    """
    if c.shape[0] != 1 or s.shape[0] != 1:
        raise ContractError(f'{name}: fusion runs on batch size 1, got {c.shape[0]} and {s.shape[0]}')
    if c.shape[2:] != s.shape[2:]:
        raise ContractError(f'{name}: spatial mismatch {c.shape[2:]} vs {s.shape[2:]}')
    c_proj = conv3d_forward(c, params, f'{name}.proj_c', padding=0)
    s_proj = conv3d_forward(s, params, f'{name}.proj_s', padding=0)
    d = c_proj.shape[1]
    tc, ts = _tokens(c_proj), _tokens(s_proj)
    c_from_s = scaled_dot_attention(tc, ts, ts, d)
    s_from_c = scaled_dot_attention(ts, tc, tc, d)
    spatial = c.shape[2:]
    concat = np.concatenate([c_from_s, s_from_c], axis=1).T.reshape((1, 2 * d) + tuple(spatial))
    return c_proj, s_proj, concat


def cross_attention_fuse(c, s, params, name, config):
    """
    Fuse one pyramid level

    Args:
        c: CNN features (1, Cc, D, H, W)
        s: global features (1, Cs, D, H, W), same spatial dims
        params: ParamStore holding '<name>.proj_c', '<name>.proj_s', '<name>.out'
        name: parameter prefix
        config: ModelConfig

    Returns:
        (1, d, D, H, W)
    """
    _, _, concat = fusion_terms(c, s, params, name)
    fused = conv3d_forward(concat, params, f'{name}.out', padding=0)
    fused = leaky_relu(instance_norm(fused, config.norm_epsilon), config.leaky_slope)
    if config.fusion_residual:
        if fused.shape[1] != c.shape[1]:
            raise ContractError(f'{name}: residual needs d={fused.shape[1]} to equal CNN channels {c.shape[1]}')
        fused = fused + c
    return fused
