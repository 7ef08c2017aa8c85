import json
import os

import numpy as np
import pytest

from errors import BoundsError, SpecError
import phantom as phantom_module
from labelgen import brute_force_zone_oracle, generate_zone_labels, vocabulary_for
from phantom import (
    PhantomSpec, generate_phantom, load_spec, oracle_predictor, phantom_batch, portable_normal, save_phantom,
)
from pipeline import InferenceOptions, evaluate_patient
from predictors import WindowRequest
from voxelgrid import Zone
from volume_io import find_modality_files, find_volume, read_multimodal, read_volume


@pytest.fixture(scope='module')
def sphere_phantom():
    spec = PhantomSpec(
        dims=(64, 64, 64),
        center_mm=(32.0, 32.0, 32.0),
        core_radii_mm=(8.0, 8.0, 8.0),
        edema_radii_mm=(8.0, 8.0, 8.0),
        brain_radii_mm=(31.0, 31.0, 31.0),
    )
    return generate_phantom(spec)


def test_high_risk_zone_reaches_ten_mm_past_the_surface(sphere_phantom):
    row = sphere_phantom.zones.data[32, 32]
    assert row[40] == Zone.OUTSIDE
    assert row[50] == Zone.HIGH
    assert row[51] == Zone.MEDIUM
    assert row[60] == Zone.MEDIUM
    assert row[61] == Zone.LOW
    assert row[63] == Zone.OUTSIDE


def test_labelgen_agrees_with_analytic_zones(sphere_phantom):
    fast = generate_zone_labels(sphere_phantom.seg, sphere_phantom.volume, vocabulary_for('brats2020'))
    np.testing.assert_array_equal(fast.data, sphere_phantom.zones.data)


def test_phantom_zones_come_from_the_labelgen_scan(monkeypatch):
    calls = []

    def spy(regions, brain, spacing, max_voxels):
        calls.append((regions.whole.dims, max_voxels))
        return brute_force_zone_oracle(regions, brain, spacing, max_voxels)

    monkeypatch.setattr(phantom_module, 'brute_force_zone_oracle', spy)
    spec = PhantomSpec(dims=(16, 16, 16), center_mm=(7.5, 7.5, 7.5), core_radii_mm=(2.0, 2.0, 2.0),
                       edema_radii_mm=(3.0, 3.0, 3.0), brain_radii_mm=(7.0, 7.0, 7.0))
    phantom = generate_phantom(spec)
    assert calls == [((16, 16, 16), 16 ** 3)]
    fast = generate_zone_labels(phantom.seg, phantom.volume, vocabulary_for('brats2020'))
    np.testing.assert_array_equal(fast.data, phantom.zones.data)


def test_segmentation_layers(sphere_phantom):
    vocab = vocabulary_for('brats2020')
    seg = sphere_phantom.seg.data
    assert seg[32, 32, 32] == vocab.necrotic
    assert seg[32, 32, 39] == vocab.enhancing
    assert not np.any(seg == vocab.edema)
    assert set(np.unique(seg)) <= vocab.values


def test_brain_is_the_flair_support(sphere_phantom):
    flair = sphere_phantom.volume.flair.data
    assert flair[0, 0, 0] == 0.0
    assert np.all(flair[sphere_phantom.seg.data != 0] > 0)


def test_noise_free_phantoms_are_reproducible():
    spec = PhantomSpec(dims=(16, 16, 16), center_mm=(7.5, 7.5, 7.5), core_radii_mm=(2.0, 2.0, 2.0),
                       edema_radii_mm=(3.0, 3.0, 3.0), brain_radii_mm=(7.0, 7.0, 7.0))
    a, b = generate_phantom(spec), generate_phantom(spec)
    np.testing.assert_array_equal(a.volume.stack(), b.volume.stack())
    np.testing.assert_array_equal(a.zones.data, b.zones.data)


def test_noise_depends_on_seed_only():
    base = dict(dims=(16, 16, 16), center_mm=(7.5, 7.5, 7.5), core_radii_mm=(2.0, 2.0, 2.0),
                edema_radii_mm=(3.0, 3.0, 3.0), brain_radii_mm=(7.0, 7.0, 7.0), noise_sigma=0.1)
    a = generate_phantom(PhantomSpec(seed=4, **base))
    b = generate_phantom(PhantomSpec(seed=4, **base))
    c = generate_phantom(PhantomSpec(seed=5, **base))
    np.testing.assert_array_equal(a.volume.stack(), b.volume.stack())
    assert not np.array_equal(a.volume.stack(), c.volume.stack())
    # noise never changes the labels or leaves the brain
    np.testing.assert_array_equal(a.zones.data, c.zones.data)
    assert np.all(a.volume.flair.data[a.volume.flair.data != 0] >= 1e-3)


def test_portable_normal_stream():
    draws = portable_normal(42, 20001)
    assert draws.shape == (20001,)
    np.testing.assert_array_equal(draws, portable_normal(42, 20001))
    np.testing.assert_array_equal(draws[:10], portable_normal(42, 10))
    assert abs(draws.mean()) < 0.05
    assert abs(draws.std() - 1.0) < 0.05


def test_anisotropic_phantom_matches_labelgen():
    spec = PhantomSpec(dims=(20, 32, 24), spacing=(2.0, 1.0, 1.5), center_mm=(17.0, 14.0, 16.0),
                       core_radii_mm=(4.0, 3.0, 5.0), edema_radii_mm=(6.0, 5.0, 7.0),
                       brain_radii_mm=(17.0, 14.0, 15.0), dataset='brats2025')
    phantom = generate_phantom(spec)
    fast = generate_zone_labels(phantom.seg, phantom.volume, vocabulary_for('brats2025'))
    np.testing.assert_array_equal(fast.data, phantom.zones.data)


@pytest.mark.parametrize('kwargs', [
    {'core_radii_mm': (12.0, 12.0, 12.0)},
    {'brain_radii_mm': (40.0, 30.0, 30.0)},
    {'center_mm': (10.0, 32.0, 32.0)},
    {'noise_sigma': -1.0},
    {'dims': (64, 64)},
    {'spacing': (1.0, 0.0, 1.0)},
    {'intensities': {'t1': (1, 1, 1, 1)}},
])
def test_invalid_specs(kwargs):
    with pytest.raises(SpecError):
        PhantomSpec(**kwargs)


def test_spec_file_round_trip(tmp_path):
    spec = PhantomSpec(seed=7, noise_sigma=0.05)
    path = tmp_path / 'spec.json'
    path.write_text(json.dumps(spec.to_dict()))
    assert load_spec(str(path)) == spec
    path.write_text(json.dumps({'radius': 3}))
    with pytest.raises(SpecError):
        load_spec(str(path))


def test_oracle_predictor_through_evaluation(small_phantom):
    predictor = oracle_predictor(small_phantom.zones)
    probs = predictor(np.zeros((4, 16, 16, 16)), WindowRequest.full((16, 16, 16), flips=(1,)))
    np.testing.assert_array_equal(probs.argmax(axis=0), small_phantom.zones.data[:, ::-1, :])
    with pytest.raises(BoundsError):
        predictor(np.zeros((4, 8, 8, 8)), WindowRequest((10, 0, 0), (8, 8, 8), (16, 16, 16)))
    options = InferenceOptions(sliding_window=False, postproc=False)
    _, report = evaluate_patient(small_phantom.volume, small_phantom.seg, predictor, options)
    assert report.mean['dsc'] == 1.0


def test_save_phantom_writes_a_patient_directory(tmp_path, small_phantom):
    paths = save_phantom(small_phantom, str(tmp_path), '.json')
    dataset, modality_paths = find_modality_files(str(tmp_path))
    assert dataset == 'brats2020'
    assert find_volume(str(tmp_path), 'seg') == paths['seg']
    volume = read_multimodal(str(tmp_path))
    np.testing.assert_array_equal(volume.stack(), small_phantom.volume.stack())
    np.testing.assert_array_equal(read_volume(paths['zones']).data, small_phantom.zones.data)
    with open(paths['spec']) as f:
        assert json.load(f)['dims'] == [16, 16, 16]
    assert sorted(os.path.basename(p) for p in modality_paths) == \
        ['phantom_flair.json', 'phantom_t1.json', 'phantom_t1ce.json', 'phantom_t2.json']


def test_phantom_batch_varies_seed_and_position():
    base = PhantomSpec(dims=(16, 16, 16), center_mm=(7.5, 7.5, 7.5), core_radii_mm=(2.0, 2.0, 2.0),
                       edema_radii_mm=(3.0, 3.0, 3.0), brain_radii_mm=(7.0, 7.0, 7.0), seed=10)
    batch = phantom_batch(base, 3)
    assert [p.spec.seed for p in batch] == [10, 11, 12]
    assert [p.spec.center_mm[2] for p in batch] == [6.5, 7.5, 8.5]
