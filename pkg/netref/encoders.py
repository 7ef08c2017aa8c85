"""
Encoder branches

The CNN branch is a five-level residual encoder. The global-context branch
is pluggable: any GlobalEncoder subclass may be used as long as its pyramid
satisfies the contract (factors 2, 4, 8, 16 with channels F, 2F, 4F, 8F).
The bundled StridedConvEncoder is a plain strided-convolution stand-in.
"""

from dataclasses import dataclass

from errors import PyramidError, SizeError
from netref.layers import conv3d_forward, conv_norm_act, residual_block

CNN_FACTORS = (1, 2, 4, 8, 16)
GLOBAL_FACTORS = (2, 4, 8, 16)


def cnn_channels(base_filters):
    c = base_filters
    return (c, c, 2 * c, 4 * c, 8 * c)


def global_channels(feature_size):
    f = feature_size
    return (f, 2 * f, 4 * f, 8 * f)


@dataclass(frozen=True, eq=False)
class EncoderPyramid:
    """Feature maps ordered from fine to coarse, with their downsample factors"""
    features: tuple
    factors: tuple

    def level(self, factor):
        return self.features[self.factors.index(factor)]

    @property
    def channels(self):
        return tuple(f.shape[1] for f in self.features)

    def validate(self, input_shape, factors, channels, who):
        """Raise PyramidError unless the pyramid matches the declared contract"""
        if tuple(self.factors) != tuple(factors) or len(self.features) != len(factors):
            raise PyramidError(f'{who}: factors {tuple(self.factors)}, expected {tuple(factors)}')
        batch, spatial = input_shape[0], tuple(input_shape[2:])
        for feature, factor, expected in zip(self.features, factors, channels):
            want = (batch, expected) + tuple(n // factor for n in spatial)
            if tuple(feature.shape) != want:
                raise PyramidError(f'{who}: level /{factor} has shape {feature.shape}, expected {want}')


def require_divisible(shape, divisor=16):
    spatial = tuple(shape[2:])
    if any(n % divisor for n in spatial):
        raise SizeError(f'spatial dims {spatial} must be divisible by {divisor}; zero-pad the input first')


def cnn_encoder_param_shapes(config, in_channels=4):
    shapes = {}
    channels = cnn_channels(config.base_filters)
    previous = in_channels
    for level, ch in enumerate(channels):
        prefix = f'cnn.level{level}'
        block_in = previous
        if level > 0:
            shapes[f'{prefix}.down.weight'] = (ch, previous, 3, 3, 3)
            shapes[f'{prefix}.down.bias'] = (ch,)
            block_in = ch
        shapes[f'{prefix}.block.conv1.weight'] = (ch, block_in, 3, 3, 3)
        shapes[f'{prefix}.block.conv1.bias'] = (ch,)
        shapes[f'{prefix}.block.conv2.weight'] = (ch, ch, 3, 3, 3)
        shapes[f'{prefix}.block.conv2.bias'] = (ch,)
        if block_in != ch:
            shapes[f'{prefix}.block.skip.weight'] = (ch, block_in, 1, 1, 1)
            shapes[f'{prefix}.block.skip.bias'] = (ch,)
        previous = ch
    return shapes


def cnn_encoder_forward(x, params, config):
    """
    Residual CNN encoder

    Args:
        x: (1, 4, D, H, W) normalized input, D/H/W divisible by 16
        params: ParamStore
        config: ModelConfig

    Returns:
        EncoderPyramid at factors (1, 2, 4, 8, 16) with channels (C, C, 2C, 4C, 8C)
    """
    require_divisible(x.shape)
    features = []
    h = x
    for level in range(len(CNN_FACTORS)):
        prefix = f'cnn.level{level}'
        if level > 0:
            h = conv3d_forward(h, params, f'{prefix}.down', stride=2)
        h = residual_block(h, params, f'{prefix}.block', config)
        features.append(h)
    pyramid = EncoderPyramid(tuple(features), CNN_FACTORS)
    pyramid.validate(x.shape, CNN_FACTORS, cnn_channels(config.base_filters), 'cnn encoder')
    return pyramid


class GlobalEncoder:
    """Base class for global-context encoders"""

    def __init__(self, name='Base Global Encoder'):
        self.name = name

    def param_shapes(self, config, in_channels=4):
        return {}

    def encode(self, x, params, config):
        """Return an EncoderPyramid; must be implemented by subclasses"""
        raise NotImplementedError('Subclasses must implement encode method')

    def forward(self, x, params, config):
        require_divisible(x.shape)
        pyramid = self.encode(x, params, config)
        if not isinstance(pyramid, EncoderPyramid):
            raise PyramidError(f'{self.name}: encode returned {type(pyramid).__name__}, not an EncoderPyramid')
        pyramid.validate(x.shape, GLOBAL_FACTORS, global_channels(config.feature_size), self.name)
        return pyramid


class StridedConvEncoder(GlobalEncoder):
    """Four stride-2 conv -> norm -> LeakyReLU stages on the raw input"""

    def __init__(self):
        super().__init__('strided-conv global encoder')

    def param_shapes(self, config, in_channels=4):
        shapes = {}
        previous = in_channels
        for level, ch in enumerate(global_channels(config.feature_size)):
            shapes[f'global.level{level}.weight'] = (ch, previous, 3, 3, 3)
            shapes[f'global.level{level}.bias'] = (ch,)
            previous = ch
        return shapes

    def encode(self, x, params, config):
        features = []
        h = x
        for level in range(len(GLOBAL_FACTORS)):
            h = conv_norm_act(h, params, f'global.level{level}', config, stride=2)
            features.append(h)
        return EncoderPyramid(tuple(features), GLOBAL_FACTORS)


def global_encoder_forward(x, params, config, encoder=None):
    """Run the configured global encoder (the strided-conv stand-in by default)"""
    encoder = encoder or StridedConvEncoder()
    return encoder.forward(x, params, config)
