"""
Forward-only reference implementation of the dual-branch segmentation network
"""

from netref.encoders import EncoderPyramid, GlobalEncoder, StridedConvEncoder
from netref.model import MODES, ModelConfig, build_params, infiltrnet_forward, infiltrnet_logits, param_shapes
from netref.params import ParamStore

__all__ = [
    'EncoderPyramid',
    'GlobalEncoder',
    'MODES',
    'ModelConfig',
    'ParamStore',
    'StridedConvEncoder',
    'build_params',
    'infiltrnet_forward',
    'infiltrnet_logits',
    'param_shapes',
]
