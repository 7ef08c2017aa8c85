"""
Run configuration

Defaults carry the reference constants. Sources are layered:
built-in defaults < JSON file < command-line flags (dotted keys such as
'loss.lambda_boundary'). Unknown keys are rejected.
"""

import json
import logging
import os
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass

from errors import ConfigError
from labelgen import VOCABULARIES
from losses import LossWeights
from netref.model import MODES, ModelConfig
from pipeline import (
    MIN_COMPONENT_VOXELS, OCCLUSION_SCALES, OCCLUSION_STRIDE, PATCH_SIZE, PATCHES_PER_VOLUME,
    WINDOW_OVERLAP, WINDOW_SIZE, InferenceOptions, PostProcConfig,
)

log = logging.getLogger('config')

THREADS_ENV = 'INFILMAP_THREADS'


def default_threads():
    value = os.environ.get(THREADS_ENV)
    if value is None:
        return 1
    try:
        threads = int(value)
    except ValueError:
        raise ConfigError(THREADS_ENV, value, 'an integer >= 1') from None
    if threads < 1:
        raise ConfigError(THREADS_ENV, value, 'an integer >= 1')
    return threads


@dataclass
class InferenceConfig:
    window: tuple = WINDOW_SIZE
    overlap: float = WINDOW_OVERLAP
    sliding_window: bool = True
    tta: bool = True
    postproc: bool = True
    min_component_voxels: int = MIN_COMPONENT_VOXELS
    fill_holes: bool = True
    patch_size: tuple = PATCH_SIZE
    patches_per_volume: int = PATCHES_PER_VOLUME
    occlusion_scales: tuple = OCCLUSION_SCALES
    occlusion_stride: int = OCCLUSION_STRIDE
    occlusion_target_class: int = 3
    occlusion_fill_value: float = 0.0

    def __post_init__(self):
        for key in ('window', 'patch_size', 'occlusion_scales'):
            value = getattr(self, key)
            if isinstance(value, int):
                value = (value,) * (1 if key == 'occlusion_scales' else 3)
            value = tuple(int(v) for v in value)
            if not value or min(value) < 1 or (key != 'occlusion_scales' and len(value) != 3):
                raise ConfigError(f'inference.{key}', getattr(self, key), 'positive integers (three for a size)')
            setattr(self, key, value)
        if not 0 <= self.overlap < 1:
            raise ConfigError('inference.overlap', self.overlap, 'a real in [0, 1)')
        if int(self.min_component_voxels) < 0:
            raise ConfigError('inference.min_component_voxels', self.min_component_voxels, 'an integer >= 0')
        if int(self.patches_per_volume) < 1:
            raise ConfigError('inference.patches_per_volume', self.patches_per_volume, 'an integer >= 1')
        if int(self.occlusion_stride) < 1:
            raise ConfigError('inference.occlusion_stride', self.occlusion_stride, 'an integer >= 1')
        if int(self.occlusion_target_class) not in (0, 1, 2, 3):
            raise ConfigError('inference.occlusion_target_class', self.occlusion_target_class, '0, 1, 2 or 3')

    def options(self, tta=None, postproc=None):
        return InferenceOptions(
            window=self.window,
            overlap=self.overlap,
            sliding_window=self.sliding_window,
            tta=self.tta if tta is None else tta,
            postproc=self.postproc if postproc is None else postproc,
            postproc_config=PostProcConfig(self.min_component_voxels, self.fill_holes),
        )


@dataclass
class AblationFlags:
    boundary_loss: bool = True
    aux: bool = True
    mode: str = 'full'

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError('ablation.mode', self.mode, f'one of {", ".join(MODES)}')


@dataclass
class TrainingNotes:
    """Optimisation settings of the reference training run; informational only"""
    optimizer: str = 'AdamW'
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    schedule: str = 'cosine'
    warmup_epochs: int = 5
    early_stopping_patience: int = 15
    mixed_precision: bool = True


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    dataset: str = 'brats2020'
    seed: int = 0
    threads: int = field(default_factory=default_threads)
    training_notes: TrainingNotes = field(default_factory=TrainingNotes)

    def __post_init__(self):
        if self.dataset not in VOCABULARIES:
            raise ConfigError('dataset', self.dataset, ' or '.join(VOCABULARIES))
        if int(self.threads) < 1:
            raise ConfigError('threads', self.threads, 'an integer >= 1')

    def loss_weights(self):
        """Loss weights with the ablated terms switched off"""
        return LossWeights(
            class_weights=self.loss.class_weights,
            lambda_boundary=self.loss.lambda_boundary if self.ablation.boundary_loss else 0.0,
            lambda_aux=self.loss.lambda_aux if self.ablation.aux else 0.0,
            boundary_extra=self.loss.boundary_extra,
            dice_smooth=self.loss.dice_smooth,
        )

    def to_dict(self):
        return _plain(asdict(self))


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(cls, data, prefix=''):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip('.') or 'config', data, 'a JSON object')
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(prefix + key, data[key], f'one of {", ".join(sorted(known))}')
    kwargs = {}
    for key, value in data.items():
        nested = known[key].default_factory
        if nested is not MISSING and isinstance(nested, type) and is_dataclass(nested):
            kwargs[key] = _build(nested, value, f'{prefix}{key}.')
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(prefix.rstrip('.') or 'config', data, f'well-typed values ({e})') from e


def _set_dotted(tree, dotted, value):
    parts = dotted.split('.')
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(dotted, value, 'a key inside a section')
    node[parts[-1]] = value


def load_config(path=None, overrides=None):
    """
    Resolve a RunConfig

    Args:
        path: optional JSON config file
        overrides: {dotted key: value} from command-line flags; these win

    Returns:
        validated RunConfig
    """
    tree = {}
    if path:
        try:
            with open(path) as f:
                tree = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError('config', path, f'valid JSON ({e})') from e
        except OSError as e:
            raise OSError(f'could not read config {path}: {e}') from e
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(tree, key, value)
    config = _build(RunConfig, tree)
    log.debug('Resolved configuration from %s with %d overrides', path or 'defaults', len(overrides or {}))
    return config


def dump_config(config):
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + '\n'
