"""
Fusion self-check behind `infilmap check-fusion`

Compares cross_attention_fuse against a voxel-by-voxel evaluation of

    F = LReLU(IN(W_out [Attn(Q_C, K_S, V_S) || Attn(Q_S, K_C, V_C)] + b_out)) (+ C)

written with explicit loops, and checks the attention row sums and the
single-token closed form.
"""

import logging
import math

import numpy as np

from netref.fusion import attention_weights, cross_attention_fuse, fusion_param_shapes, fusion_terms
from netref.model import ModelConfig
from netref.params import ParamStore

log = logging.getLogger('netref.selfcheck')

TOLERANCE = 1e-6


def _project(feature, weight, bias):
    # explicit 1x1x1 convolution over one token list
    tokens = feature[0].reshape(feature.shape[1], -1).T
    out = []
    for token in tokens:
        row = []
        for o in range(weight.shape[0]):
            acc = bias[o]
            for i in range(weight.shape[1]):
                acc += weight[o, i, 0, 0, 0] * token[i]
            row.append(acc)
        out.append(row)
    return out


def _attend(queries, keys, values, d):
    out = []
    for q in queries:
        scores = [sum(a * b for a, b in zip(q, k)) / math.sqrt(d) for k in keys]
        top = max(scores)
        exps = [math.exp(s - top) for s in scores]
        total = sum(exps)
        out.append([sum(e * v[j] for e, v in zip(exps, values)) / total for j in range(len(values[0]))])
    return out


def fusion_oracle(c, s, params, name, config):
    """Loop-level evaluation of one fusion module (small inputs only)"""
    tc = _project(c, params[f'{name}.proj_c.weight'], params[f'{name}.proj_c.bias'])
    ts = _project(s, params[f'{name}.proj_s.weight'], params[f'{name}.proj_s.bias'])
    d = len(tc[0])
    concat = [a + b for a, b in zip(_attend(tc, ts, ts, d), _attend(ts, tc, tc, d))]
    w, b = params[f'{name}.out.weight'], params[f'{name}.out.bias']
    projected = [[b[o] + sum(w[o, i, 0, 0, 0] * row[i] for i in range(2 * d)) for o in range(d)] for row in concat]
    n = len(projected)
    result = np.zeros((d, n))
    for o in range(d):
        column = [projected[t][o] for t in range(n)]
        mean = sum(column) / n
        var = sum((v - mean) ** 2 for v in column) / n
        for t in range(n):
            z = (column[t] - mean) / math.sqrt(var + config.norm_epsilon)
            result[o, t] = z if z >= 0 else config.leaky_slope * z
    result = result.reshape((1, d) + tuple(c.shape[2:]))
    if config.fusion_residual:
        result = result + c
    return result


def check_fusion(seed=0, config=None, spatial=(2, 2, 2), d=4, global_channels=3):
    """
    Run the fusion checks on seeded random features

    Returns:
        dict with max_abs_diff, max_row_sum_error, single_token_error and passed
    """
    config = config or ModelConfig(base_filters=d, feature_size=global_channels)
    rng = np.random.default_rng(seed)
    name = 'fusion.check'
    params = ParamStore.initialize(fusion_param_shapes(name, d, global_channels, d), seed)
    c = rng.standard_normal((1, d) + tuple(spatial))
    s = rng.standard_normal((1, global_channels) + tuple(spatial))

    fused = cross_attention_fuse(c, s, params, name, config)
    oracle = fusion_oracle(c, s, params, name, config)
    max_abs_diff = float(np.max(np.abs(fused - oracle)))

    c_proj, s_proj, _ = fusion_terms(c, s, params, name)
    tc = c_proj[0].reshape(d, -1).T
    ts = s_proj[0].reshape(d, -1).T
    row_error = max(float(np.max(np.abs(attention_weights(tc, ts, d).sum(axis=1) - 1.0))),
                    float(np.max(np.abs(attention_weights(ts, tc, d).sum(axis=1) - 1.0))))

    # one token: each attention term is the other branch's projected value
    c1, s1 = c[:, :, :1, :1, :1], s[:, :, :1, :1, :1]
    c1_proj, s1_proj, concat = fusion_terms(c1, s1, params, name)
    closed = np.concatenate([s1_proj, c1_proj], axis=1)
    single_token_error = float(np.max(np.abs(concat - closed)))

    report = {
        'seed': int(seed),
        'spatial': list(spatial),
        'd': int(d),
        'max_abs_diff': max_abs_diff,
        'max_row_sum_error': row_error,
        'single_token_error': single_token_error,
        'tolerance': TOLERANCE,
    }
    report['passed'] = all(report[k] < TOLERANCE for k in ('max_abs_diff', 'max_row_sum_error', 'single_token_error'))
    log.info('Fusion check seed=%d: diff %.3g, row sums %.3g, single token %.3g',
             seed, max_abs_diff, row_error, single_token_error)
    return report
