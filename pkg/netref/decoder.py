"""
Four-level decoder with auxiliary heads

Level l upsamples by a stride-2 transposed convolution, concatenates the
skip features for its resolution and applies two conv -> norm -> LeakyReLU
stages. The first three levels (1/8, 1/4, 1/2 of the input) each carry a
1x1x1 auxiliary head; the last level ends in the 1x1x1 output head.
"""

import numpy as np

from errors import ContractError
from netref.layers import conv3d_forward, conv_norm_act, conv_transpose3d_forward

NUM_LEVELS = 4
AUX_FACTORS = (2, 4, 8)


def decoder_param_shapes(prefix, bottleneck_channels, skip_channels, fullres_channels, num_classes):
    """
    Args:
        prefix: parameter prefix
        bottleneck_channels: channels of the factor-16 input
        skip_channels: channels of the skips at factors 8, 4, 2 (in that order)
        fullres_channels: channels of the full-resolution skip (0 for none)
        num_classes: output classes
    """
    shapes = {}
    previous = bottleneck_channels
    outs = list(skip_channels) + [skip_channels[-1]]
    skips = list(skip_channels) + [fullres_channels]
    for level in range(NUM_LEVELS):
        out_ch, skip_ch = outs[level], skips[level]
        shapes[f'{prefix}.level{level}.up.weight'] = (previous, out_ch, 2, 2, 2)
        shapes[f'{prefix}.level{level}.up.bias'] = (out_ch,)
        shapes[f'{prefix}.level{level}.conv1.weight'] = (out_ch, out_ch + skip_ch, 3, 3, 3)
        shapes[f'{prefix}.level{level}.conv1.bias'] = (out_ch,)
        shapes[f'{prefix}.level{level}.conv2.weight'] = (out_ch, out_ch, 3, 3, 3)
        shapes[f'{prefix}.level{level}.conv2.bias'] = (out_ch,)
        if level < NUM_LEVELS - 1:
            shapes[f'{prefix}.aux{level}.weight'] = (num_classes, out_ch, 1, 1, 1)
            shapes[f'{prefix}.aux{level}.bias'] = (num_classes,)
        previous = out_ch
    shapes[f'{prefix}.head.weight'] = (num_classes, previous, 1, 1, 1)
    shapes[f'{prefix}.head.bias'] = (num_classes,)
    return shapes


def decoder_forward(bottleneck, fused_skips, fullres_skip, params, config, prefix='decoder'):
    """
    Decode to full-resolution logits

    Args:
        bottleneck: (1, Cb, D/16, H/16, W/16)
        fused_skips: skips at factors 8, 4, 2, in that order
        fullres_skip: full-resolution skip features, or None
        params: ParamStore
        config: ModelConfig
        prefix: parameter prefix

    Returns:
        (logits at full resolution, [aux logits at factors 2, 4, 8])
    """
    if len(fused_skips) != NUM_LEVELS - 1:
        raise ContractError(f'{prefix}: expected {NUM_LEVELS - 1} fused skips, got {len(fused_skips)}')
    skips = list(fused_skips) + [fullres_skip]
    h = bottleneck
    aux = []
    for level in range(NUM_LEVELS):
        h = conv_transpose3d_forward(h, params, f'{prefix}.level{level}.up')
        skip = skips[level]
        if skip is not None:
            if skip.shape[2:] != h.shape[2:]:
                raise ContractError(f'{prefix} level {level}: skip {skip.shape[2:]} does not match upsampled {h.shape[2:]}')
            h = np.concatenate([h, skip], axis=1)
        h = conv_norm_act(h, params, f'{prefix}.level{level}.conv1', config)
        h = conv_norm_act(h, params, f'{prefix}.level{level}.conv2', config)
        if level < NUM_LEVELS - 1:
            aux.append(conv3d_forward(h, params, f'{prefix}.aux{level}', padding=0))
    logits = conv3d_forward(h, params, f'{prefix}.head', padding=0)
    # heads run coarse to fine; report them fine to coarse
    return logits, aux[::-1]
