"""
Network composition: CNN encoder + global encoder -> four cross-attention
fusion modules (factors 2, 4, 8, 16) -> decoder with auxiliary heads

Ablation modes:
    full       both branches, fused skips
    cnn_only   CNN pyramid fed straight to the decoder
    swin_only  global pyramid fed to its own decoder (no full-resolution skip)
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from errors import ConfigError, ContractError
from netref.decoder import decoder_forward, decoder_param_shapes
from netref.encoders import (
    GLOBAL_FACTORS, StridedConvEncoder, cnn_channels, cnn_encoder_forward,
    cnn_encoder_param_shapes, global_channels, require_divisible,
)
from netref.fusion import cross_attention_fuse, fusion_param_shapes
from netref.layers import softmax
from netref.params import ParamStore

log = logging.getLogger('netref')

MODES = ('full', 'cnn_only', 'swin_only')
IN_CHANNELS = 4


@dataclass
class ModelConfig:
    base_filters: int = 32
    feature_size: int = 24
    num_classes: int = 4
    leaky_slope: float = 0.01
    norm_epsilon: float = 1e-5
    fusion_residual: bool = True
    fusion_dims: tuple = field(default=None)

    def __post_init__(self):
        if int(self.base_filters) < 1:
            raise ConfigError('model.base_filters', self.base_filters, 'an integer >= 1')
        if int(self.feature_size) < 1:
            raise ConfigError('model.feature_size', self.feature_size, 'an integer >= 1')
        if int(self.num_classes) != 4:
            raise ConfigError('model.num_classes', self.num_classes, 'exactly 4')
        if not self.norm_epsilon > 0:
            raise ConfigError('model.norm_epsilon', self.norm_epsilon, 'a positive number')
        self.base_filters = int(self.base_filters)
        self.feature_size = int(self.feature_size)
        skip_channels = tuple(cnn_channels(self.base_filters)[1:])
        if self.fusion_dims is None:
            # fusion width follows the CNN channels at factors 2, 4, 8, 16
            self.fusion_dims = skip_channels
        self.fusion_dims = tuple(int(d) for d in self.fusion_dims)
        if len(self.fusion_dims) != len(GLOBAL_FACTORS) or min(self.fusion_dims) < 1:
            raise ConfigError('model.fusion_dims', self.fusion_dims, 'four positive integers')
        if self.fusion_residual and self.fusion_dims != skip_channels:
            # the residual adds the fused map back onto the CNN feature map
            raise ConfigError('model.fusion_dims', self.fusion_dims, f'{skip_channels} when fusion_residual is on')

    @property
    def cnn_channels(self):
        return cnn_channels(self.base_filters)

    @property
    def global_channels(self):
        return global_channels(self.feature_size)


def _require_mode(mode):
    if mode not in MODES:
        raise ConfigError('ablation', mode, f'one of {", ".join(MODES)}')


def param_shapes(config, mode='full', encoder=None):
    """Every parameter a forward pass in `mode` touches, in build order"""
    _require_mode(mode)
    encoder = encoder or StridedConvEncoder()
    c_ch, s_ch = config.cnn_channels, config.global_channels
    shapes = {}
    if mode in ('full', 'cnn_only'):
        shapes.update(cnn_encoder_param_shapes(config, IN_CHANNELS))
    if mode in ('full', 'swin_only'):
        shapes.update(encoder.param_shapes(config, IN_CHANNELS))
    if mode == 'full':
        for level, factor in enumerate(GLOBAL_FACTORS):
            shapes.update(fusion_param_shapes(
                f'fusion.f{factor}', c_ch[level + 1], s_ch[level], config.fusion_dims[level]))
        d = config.fusion_dims
        shapes.update(decoder_param_shapes('decoder', d[3], (d[2], d[1], d[0]), c_ch[0], config.num_classes))
    elif mode == 'cnn_only':
        shapes.update(decoder_param_shapes('decoder', c_ch[4], (c_ch[3], c_ch[2], c_ch[1]), c_ch[0], config.num_classes))
    else:
        shapes.update(decoder_param_shapes('swin_decoder', s_ch[3], (s_ch[2], s_ch[1], s_ch[0]), 0, config.num_classes))
    return shapes


def build_params(config, seed=0, mode='full', encoder=None):
    """
    Seeded parameters for one mode

    Tensors shared between modes (same name) get identical values, because
    each tensor is seeded from (seed, name) alone.
    """
    shapes = param_shapes(config, mode, encoder)
    store = ParamStore.initialize(shapes, seed)
    log.debug('Built %d tensors (%d values) for mode %s',
              len(store), sum(int(np.prod(s)) for s in shapes.values()), mode)
    return store


def as_network_input(volume):
    """MultiModalVolume or (4, D, H, W) / (1, 4, D, H, W) array -> float64 (1, 4, D, H, W)"""
    if hasattr(volume, 'stack'):
        x = volume.stack(np.float64)
    else:
        x = np.asarray(volume, dtype=np.float64)
    if x.ndim == 4:
        x = x[None]
    if x.ndim != 5 or x.shape[:2] != (1, IN_CHANNELS):
        raise ContractError(f'network input must be (1, 4, D, H, W), got {x.shape}')
    return x


def infiltrnet_logits(volume, params, config, ablation='full', encoder=None):
    """
    Forward pass up to the logits

    Returns:
        (logits (1, 4, D, H, W), [aux logits at factors 2, 4, 8])
    """
    _require_mode(ablation)
    x = as_network_input(volume)
    require_divisible(x.shape)
    encoder = encoder or StridedConvEncoder()

    if ablation == 'swin_only':
        s = encoder.forward(x, params, config)
        return decoder_forward(
            s.level(16), [s.level(8), s.level(4), s.level(2)], None, params, config, prefix='swin_decoder')

    c = cnn_encoder_forward(x, params, config)
    if ablation == 'cnn_only':
        return decoder_forward(
            c.level(16), [c.level(8), c.level(4), c.level(2)], c.level(1), params, config)

    s = encoder.forward(x, params, config)
    fused = {
        factor: cross_attention_fuse(c.level(factor), s.level(factor), params, f'fusion.f{factor}', config)
        for factor in GLOBAL_FACTORS
    }
    return decoder_forward(fused[16], [fused[8], fused[4], fused[2]], c.level(1), params, config)


def infiltrnet_forward(volume, params, config, ablation='full', encoder=None):
    """Four-class probability map (1, 4, D, H, W) for a normalized volume"""
    logits, _ = infiltrnet_logits(volume, params, config, ablation, encoder)
    return softmax(logits, axis=1)
