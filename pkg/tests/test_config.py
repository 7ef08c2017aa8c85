import json

import pytest

from config import THREADS_ENV, RunConfig, default_threads, dump_config, load_config
from errors import ConfigError


def test_defaults():
    config = load_config()
    assert config.model.base_filters == 32
    assert config.model.feature_size == 24
    assert config.loss.class_weights == (0.1, 1.0, 1.5, 2.0)
    assert config.inference.window == (96, 96, 96)
    assert config.inference.min_component_voxels == 500
    assert config.dataset == 'brats2020'
    assert config.training_notes.optimizer == 'AdamW'


def test_flags_override_the_file(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'loss': {'lambda_boundary': 0.5, 'lambda_aux': 0.1}, 'seed': 3}))
    config = load_config(str(path), {'loss.lambda_boundary': 0.9, 'inference.window': [32, 32, 32], 'seed': None})
    assert config.loss.lambda_boundary == 0.9
    assert config.loss.lambda_aux == 0.1
    assert config.seed == 3
    assert config.inference.window == (32, 32, 32)


@pytest.mark.parametrize('overrides, key', [
    ({'loss.lambda_boundary': -1.0}, 'loss.lambda_boundary'),
    ({'inference.overlap': 1.5}, 'inference.overlap'),
    ({'ablation.mode': 'both'}, 'ablation.mode'),
    ({'dataset': 'brats2019'}, 'dataset'),
    ({'model.base_filters': 0}, 'model.base_filters'),
    ({'threads': 0}, 'threads'),
])
def test_invalid_values_name_the_key(overrides, key):
    with pytest.raises(ConfigError) as info:
        load_config(overrides=overrides)
    assert info.value.key == key
    assert key in str(info.value)


def test_unknown_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_config(overrides={'loss.lambda_boundry': 0.1})
    assert info.value.key == 'loss.lambda_boundry'
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'modle': {}}))
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_malformed_file(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text('{not json')
    with pytest.raises(ConfigError):
        load_config(str(path))
    with pytest.raises(OSError, match='absent.json'):
        load_config(str(tmp_path / 'absent.json'))


def test_dump_loads_back_equal(tmp_path):
    config = load_config(overrides={'model.feature_size': 12, 'ablation.aux': False, 'seed': 9})
    path = tmp_path / 'dumped.json'
    path.write_text(dump_config(config))
    assert load_config(str(path)) == config


def test_ablation_switches_off_loss_terms():
    config = load_config(overrides={'ablation.boundary_loss': False})
    weights = config.loss_weights()
    assert weights.lambda_boundary == 0.0
    assert weights.lambda_aux == 0.3


def test_options_follow_the_inference_section():
    config = load_config(overrides={'inference.min_component_voxels': 50, 'inference.tta': False})
    options = config.inference.options()
    assert options.tta is False
    assert options.postproc_config.min_component_voxels == 50
    assert config.inference.options(tta=True).tta is True


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, '3')
    assert default_threads() == 3
    assert RunConfig().threads == 3
    monkeypatch.setenv(THREADS_ENV, 'many')
    with pytest.raises(ConfigError):
        default_threads()
    monkeypatch.delenv(THREADS_ENV)
    assert default_threads() == 1
