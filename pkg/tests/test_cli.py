import json

import numpy as np
import pandas as pd
import pytest
from PIL import Image

import pipeline
from main import main
from volume_io import read_volume, write_volume
from voxelgrid import label_grid, zone_grid

SMALL_SPEC = {
    'dims': [16, 16, 16],
    'center_mm': [7.5, 7.5, 7.5],
    'core_radii_mm': [2.5, 2.5, 2.5],
    'edema_radii_mm': [3.5, 3.5, 3.5],
    'brain_radii_mm': [7.0, 7.0, 7.0],
}


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def stage_error(err):
    return json.loads(err.strip().splitlines()[-1])


@pytest.fixture
def patient_dir(tmp_path, capsys):
    spec = tmp_path / 'spec.json'
    spec.write_text(json.dumps(SMALL_SPEC))
    out_dir = tmp_path / 'patient'
    code, out, _ = run(capsys, 'phantom', '--spec', str(spec), '--out-dir', str(out_dir), '--suffix', '.json')
    assert code == 0
    assert set(json.loads(out)['paths']) == {'t1', 't1ce', 't2', 'flair', 'seg', 'zones', 'spec'}
    return out_dir


def test_labelgen_then_eval(tmp_path, capsys, patient_dir):
    zones = tmp_path / 'zones.json'
    summary = tmp_path / 'summary.json'
    code, out, _ = run(capsys, 'labelgen', '--seg', str(patient_dir / 'phantom_seg.json'),
                       '--volume', str(patient_dir), '--out', str(zones), '--summary', str(summary))
    assert code == 0
    assert json.loads(out) == json.loads(summary.read_text())
    np.testing.assert_array_equal(read_volume(str(zones)).data, read_volume(str(patient_dir / 'phantom_zones.json')).data)

    report = tmp_path / 'report.csv'
    code, out, _ = run(capsys, 'eval', '--pred', str(zones), '--truth', str(patient_dir / 'phantom_zones.json'),
                       '--out', str(report))
    assert code == 0
    assert json.loads(out)['mean']['dsc'] == 1.0
    assert pd.read_csv(report)['dice_mean'].iloc[0] == 1.0


def test_labelgen_without_tumor_is_skipped(tmp_path, capsys, patient_dir):
    seg = tmp_path / 'empty_seg.json'
    write_volume(label_grid(np.zeros((16, 16, 16), dtype=np.int16)), str(seg))
    out_path = tmp_path / 'zones.json'
    code, out, _ = run(capsys, 'labelgen', '--seg', str(seg), '--volume', str(patient_dir), '--out', str(out_path))
    assert code == 0
    assert json.loads(out)['skipped'] is True
    assert not out_path.exists()


def test_eval_shape_mismatch_names_the_stage(tmp_path, capsys):
    pred, truth = tmp_path / 'pred.json', tmp_path / 'truth.json'
    write_volume(zone_grid(np.ones((4, 4, 4))), str(pred))
    write_volume(zone_grid(np.ones((4, 4, 5))), str(truth))
    code, _, err = run(capsys, 'eval', '--pred', str(pred), '--truth', str(truth), '--out', str(tmp_path / 'r.json'))
    assert code == 1
    assert stage_error(err)['stage'] == 'metrics'


def test_missing_input_fails_in_read(tmp_path, capsys):
    code, _, err = run(capsys, 'eval', '--pred', str(tmp_path / 'nope.json'), '--truth', str(tmp_path / 'nope.json'),
                       '--out', str(tmp_path / 'r.json'))
    assert code == 1
    assert stage_error(err)['stage'] == 'read'


def test_invalid_flag_fails_in_config(capsys):
    code, _, err = run(capsys, '--overlap', '1.5', 'check-fusion')
    assert code == 1
    assert stage_error(err)['stage'] == 'config'
    assert 'inference.overlap' in stage_error(err)['message']


def test_dump_config(capsys):
    code, out, _ = run(capsys, '--dump-config', '--lambda-aux', '0.1', '--no-boundary-loss')
    assert code == 0
    config = json.loads(out)
    assert config['model']['base_filters'] == 32
    assert config['loss']['lambda_aux'] == 0.1
    assert config['ablation']['boundary_loss'] is False


def test_a_command_is_required(capsys):
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2


def test_check_commands(capsys):
    code, out, _ = run(capsys, 'check-grads', '--size', '8', '--fixtures', '1', '--coordinates', '3')
    assert code == 0
    assert json.loads(out)['passed'] is True
    code, out, _ = run(capsys, 'check-fusion')
    assert code == 0
    assert json.loads(out)['passed'] is True


def test_infer_and_render(tmp_path, capsys, patient_dir):
    pred = tmp_path / 'pred.json'
    code, _, err = run(capsys, '--base-filters', '2', '--feature-size', '2', '--window', '16',
                       'infer', '--volume', str(patient_dir), '--no-tta', '--out', str(pred))
    assert code == 0
    assert 'random weights' in err
    zones = read_volume(str(pred))
    assert zones.dims == (16, 16, 16)
    assert set(np.unique(zones.data)) <= {0, 1, 2, 3}

    png = tmp_path / 'slice.png'
    code, _, _ = run(capsys, 'render', '--flair', str(patient_dir / 'phantom_flair.json'),
                     '--zones', str(patient_dir / 'phantom_zones.json'), '--scale', '2', '--out', str(png))
    assert code == 0
    with Image.open(png) as image:
        assert image.size == (32, 32)

    code, _, err = run(capsys, 'render', '--flair', str(patient_dir / 'phantom_flair.json'), '--out', str(png))
    assert code == 1
    assert stage_error(err)['stage'] == 'render'


def test_report_with_oracle(tmp_path, capsys):
    spec = tmp_path / 'spec.json'
    spec.write_text(json.dumps(SMALL_SPEC))
    root = tmp_path / 'cohort'
    for name in ('case_b', 'case_a'):
        code, _, _ = run(capsys, 'phantom', '--spec', str(spec), '--out-dir', str(root / name), '--suffix', '.json')
        assert code == 0
    table_path = tmp_path / 'table.csv'
    code, _, _ = run(capsys, '--min-component', '0', '--threads', '2',
                     'report', '--root', str(root), '--predictor', 'oracle', '--out', str(table_path))
    assert code == 0
    table = pd.read_csv(table_path, index_col=0)
    assert list(table.index) == ['case_a', 'case_b', 'mean']
    assert table.loc['mean', 'dice_mean'] == 1.0


def test_report_needs_a_root(tmp_path, capsys):
    code, _, err = run(capsys, 'report', '--out', str(tmp_path / 't.csv'))
    assert code == 1
    assert stage_error(err)['stage'] == 'report'


def test_shared_options_work_after_the_command(capsys):
    code, out, _ = run(capsys, 'check-grads', '--seed', '3', '--size', '8', '--fixtures', '1', '--coordinates', '2')
    assert code == 0
    assert json.loads(out)['seed'] == 3
    code, out, _ = run(capsys, 'check-fusion', '--seed', '4', '--threads', '2', '--dataset', 'brats2025')
    assert code == 0
    code, out, _ = run(capsys, '--seed', '5', 'check-grads', '--fixtures', '1', '--coordinates', '2')
    assert code == 0
    assert json.loads(out)['seed'] == 5


def test_option_before_the_command_survives_the_subparser(capsys):
    code, out, _ = run(capsys, '--lambda-aux', '0.1', 'check-grads', '--fixtures', '1', '--coordinates', '2')
    assert code == 0
    assert json.loads(out)['weights']['lambda_aux'] == 0.1


def test_labelgen_with_a_flair_file(tmp_path, capsys, patient_dir):
    zones = tmp_path / 'zones.json'
    code, out, _ = run(capsys, 'labelgen', '--seg', str(patient_dir / 'phantom_seg.json'),
                       '--flair', str(patient_dir / 'phantom_flair.json'), '--dataset', 'brats2020',
                       '--out', str(zones))
    assert code == 0
    assert 'zone_voxels' in json.loads(out)
    np.testing.assert_array_equal(read_volume(str(zones)).data,
                                  read_volume(str(patient_dir / 'phantom_zones.json')).data)


def test_labelgen_needs_flair_or_volume(tmp_path, capsys, patient_dir):
    code, _, err = run(capsys, 'labelgen', '--seg', str(patient_dir / 'phantom_seg.json'),
                       '--out', str(tmp_path / 'zones.json'))
    assert code == 1
    assert stage_error(err)['stage'] == 'read'


def test_ablation_flags_change_the_checked_loss(capsys):
    argv = ['check-grads', '--fixtures', '2', '--coordinates', '2']
    _, out, _ = run(capsys, *argv)
    full = json.loads(out)
    _, out, _ = run(capsys, *argv, '--no-boundary-loss')
    no_boundary = json.loads(out)
    _, out, _ = run(capsys, *argv, '--no-aux')
    no_aux = json.loads(out)

    assert full['weights'] == {'lambda_boundary': 0.3, 'lambda_aux': 0.3}
    assert no_boundary['weights'] == {'lambda_boundary': 0.0, 'lambda_aux': 0.3}
    assert no_aux['weights'] == {'lambda_boundary': 0.3, 'lambda_aux': 0.0}
    losses = full['mean_loss']
    # the fixtures are the same; only the composition changes
    assert no_boundary['mean_loss']['boundary'] == losses['boundary']
    assert no_boundary['mean_loss']['total'] == pytest.approx(losses['dice_ce'] + 0.3 * losses['aux'], abs=1e-12)
    assert no_aux['mean_loss']['total'] == pytest.approx(losses['dice_ce'] + 0.3 * losses['boundary'], abs=1e-12)
    assert no_boundary['passed'] and no_aux['passed']


def test_report_ablation_honours_loss_flags(tmp_path, capsys):
    spec = tmp_path / 'spec.json'
    spec.write_text(json.dumps(SMALL_SPEC))
    table_path = tmp_path / 'ablation.csv'
    code, _, _ = run(capsys, 'report', '--ablation', '--spec', str(spec), '--phantoms', '1',
                     '--base-filters', '2', '--feature-size', '2', '--window', '16', '--no-aux', '--no-boundary-loss',
                     '--out', str(table_path))
    assert code == 0
    table = pd.read_csv(table_path, index_col=0)
    assert table.loc['full', 'total'] == pytest.approx(table.loc['full', 'dice_ce'], abs=1e-5)


def test_netref_window_not_divisible_by_16_fails(capsys, patient_dir, tmp_path):
    code, _, err = run(capsys, 'infer', '--volume', str(patient_dir), '--window', '24',
                       '--base-filters', '2', '--feature-size', '2', '--no-tta', '--out', str(tmp_path / 'pred.json'))
    assert code == 1
    assert stage_error(err)['stage'] == 'inference'
    assert 'divisible by 16' in stage_error(err)['message']


def test_occlusion_defaults_to_the_predicted_high_risk_zone(capsys, patient_dir, tmp_path, monkeypatch):
    truth = read_volume(str(patient_dir / 'phantom_zones.json')).data == 3
    calls = []

    def fake_mask(volume, predictor, options=None, zone=3):
        calls.append(predictor.name)
        return truth

    monkeypatch.setattr(pipeline, 'predicted_zone_mask', fake_mask)
    heat = tmp_path / 'heat.json'
    code, _, _ = run(capsys, 'occlusion', '--volume', str(patient_dir), '--scales', '8', '--stride', '8',
                     '--base-filters', '2', '--feature-size', '2', '--window', '16', '--out', str(heat))
    assert code == 0
    assert calls == ['netref (full)']
    grid = read_volume(str(heat))
    assert grid.dims == (16, 16, 16)
    assert grid.data.min() >= 0.0 and grid.data.max() <= 1.0


def test_occlusion_with_an_explicit_region(capsys, patient_dir, tmp_path):
    heat = tmp_path / 'heat.json'
    code, _, _ = run(capsys, 'occlusion', '--volume', str(patient_dir),
                     '--region', str(patient_dir / 'phantom_zones.json'), '--region-label', '3',
                     '--scales', '8', '--stride', '8', '--base-filters', '2', '--feature-size', '2',
                     '--window', '16', '--out', str(heat))
    assert code == 0
    assert read_volume(str(heat)).dims == (16, 16, 16)
