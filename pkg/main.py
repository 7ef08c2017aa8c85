#!/usr/bin/env python3
"""
infilmap command line

Every command runs as a sequence of named stages; an error escaping a stage
exits with status 1 and one JSON line {"stage": ..., "message": ...} on stderr.
"""

import argparse
import json
import logging
import sys
from contextlib import contextmanager

import numpy as np

log = logging.getLogger('main')


class StageFailed(Exception):
    def __init__(self, stage, message):
        super().__init__(f'{stage}: {message}')
        self.stage = stage
        self.message = message


@contextmanager
def stage(name):
    log.info('Stage %s', name)
    try:
        yield
    except StageFailed:
        raise
    except Exception as e:
        raise StageFailed(name, str(e) or type(e).__name__) from e


def configure_logging(verbosity):
    """One stderr handler on the root logger; WARNING by default, -v INFO, -vv DEBUG"""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, '_infilmap', False):
            root.removeHandler(handler)
    stderr_handler = logging.StreamHandler(sys.stderr)
    stderr_handler.setFormatter(logging.Formatter('%(asctime)s %(name)s: %(message)s', datefmt='%H:%M:%S'))
    stderr_handler._infilmap = True
    root.addHandler(stderr_handler)
    root.setLevel(logging.DEBUG if verbosity >= 2 else logging.INFO if verbosity == 1 else logging.WARNING)


def _csv_ints(text):
    try:
        return tuple(int(v) for v in text.split(','))
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma-separated integers, got {text!r}') from None


def _size(text):
    values = _csv_ints(text)
    return values * 3 if len(values) == 1 else values


def _shared_options(suppress):
    """
    Options accepted both before and after the command name

    The copy attached to each subcommand defaults to SUPPRESS so that an
    option given only before the command is not reset by the subparser.
    """
    def default(value):
        return argparse.SUPPRESS if suppress else value

    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument('--config', default=default(None), help='JSON configuration file')
    shared.add_argument('--dump-config', action='store_true', default=default(False),
                        help='Print the resolved configuration as JSON and exit')
    shared.add_argument('-v', '--verbose', action='count', default=default(0), help='More logging (-v info, -vv debug)')
    shared.add_argument('--seed', type=int, default=default(None), help='Seed for every random draw')
    shared.add_argument('--threads', type=int, default=default(None),
                        help='Worker threads for batch commands (default $INFILMAP_THREADS or 1)')
    shared.add_argument('--dataset', choices=['brats2020', 'brats2025'], default=default(None),
                        help='Label vocabulary of the segmentations')
    shared.add_argument('--base-filters', type=int, default=default(None), help='CNN base filter count C')
    shared.add_argument('--feature-size', type=int, default=default(None), help='Global branch feature size F')
    shared.add_argument('--lambda-boundary', type=float, default=default(None), help='Weight of the boundary loss')
    shared.add_argument('--lambda-aux', type=float, default=default(None), help='Weight of the auxiliary loss')
    shared.add_argument('--window', type=_size, default=default(None), help='Sliding window size, e.g. 96 or 96,96,96')
    shared.add_argument('--overlap', type=float, default=default(None), help='Sliding window overlap fraction')
    shared.add_argument('--min-component', type=int, default=default(None),
                        help='Smallest component kept by post-processing (voxels)')
    shared.add_argument('--mode', choices=['full', 'cnn_only', 'swin_only'], default=default(None),
                        help='Network branch mode')
    shared.add_argument('--no-boundary-loss', action='store_true', default=default(False), help='Ablate the boundary loss')
    shared.add_argument('--no-aux', action='store_true', default=default(False), help='Ablate the auxiliary loss')
    return shared


def build_parser():
    parser = argparse.ArgumentParser(prog='infilmap', parents=[_shared_options(False)],
                                     description='Glioma infiltration risk maps: labels, inference and evaluation')
    shared = [_shared_options(True)]
    sub = parser.add_subparsers(dest='command')

    p = sub.add_parser('labelgen', parents=shared, help='Risk zones from a segmentation')
    p.add_argument('--seg', required=True, help='BraTS segmentation volume')
    p.add_argument('--flair', help='FLAIR volume; the brain mask is its non-zero voxels')
    p.add_argument('--volume', nargs='+', help='Patient directory or four modality files (T1, T1ce, T2, FLAIR)')
    p.add_argument('--out', required=True, help='Zone grid output (.nii, .nii.gz or .json)')
    p.add_argument('--summary', help='Write zone counts and volumes as JSON here')

    p = sub.add_parser('eval', parents=shared, help='Per-zone metrics of a prediction')
    p.add_argument('--pred', required=True, help='Predicted zone grid')
    p.add_argument('--truth', required=True, help='Reference zone grid')
    p.add_argument('--out', required=True, help='Report (.json or .csv)')

    p = sub.add_parser('infer', parents=shared, help='Predict a zone grid')
    p.add_argument('--volume', nargs='+', required=True, help='Patient directory or four modality files')
    p.add_argument('--weights', help='Parameter manifest (random weights from --seed when omitted)')
    p.add_argument('--tta', action=argparse.BooleanOptionalAction, default=None, help='Eight-flip test-time augmentation')
    p.add_argument('--postproc', action=argparse.BooleanOptionalAction, default=None, help='Component clean-up')
    p.add_argument('--out', required=True, help='Zone grid output')

    p = sub.add_parser('occlusion', parents=shared, help='Occlusion sensitivity heatmap')
    p.add_argument('--volume', nargs='+', required=True, help='Patient directory or four modality files')
    p.add_argument('--weights', help='Parameter manifest (random weights from --seed when omitted)')
    p.add_argument('--region', help='Target region volume, mask or zone grid (default: the predicted high-risk zone)')
    p.add_argument('--region-label', type=int, help='Use voxels equal to this label as the region (default: non-zero)')
    p.add_argument('--scales', type=_csv_ints, help='Occluder cube sizes, e.g. 8,16,32')
    p.add_argument('--stride', type=int, help='Occluder stride')
    p.add_argument('--target-class', type=int, help='Class whose probability drop is measured')
    p.add_argument('--out', required=True, help='Heatmap output')

    p = sub.add_parser('phantom', parents=shared, help='Write a synthetic patient')
    p.add_argument('--spec', help='Phantom spec JSON (defaults when omitted)')
    p.add_argument('--out-dir', required=True, help='Output directory')
    p.add_argument('--suffix', default='.nii.gz', choices=['.nii.gz', '.nii', '.json'], help='Volume file format')

    p = sub.add_parser('check-grads', parents=shared, help='Finite-difference check of the loss gradients')
    p.add_argument('--size', type=int, default=8, help='Fixture edge length (multiple of 8)')
    p.add_argument('--fixtures', type=int, default=5, help='Random fixtures')
    p.add_argument('--coordinates', type=int, default=20, help='Coordinates per component and fixture')

    p = sub.add_parser('check-fusion', parents=shared, help='Check cross-attention fusion against a loop oracle')
    p.add_argument('--size', type=int, default=2, help='Spatial edge length of the fixture')

    p = sub.add_parser('report', parents=shared, help='Batch metrics over a cohort, or the ablation table over phantoms')
    p.add_argument('--root', help='Cohort directory (one sub-directory per patient)')
    p.add_argument('--predictor', choices=['oracle', 'netref'], default='netref', help='Predictor to evaluate')
    p.add_argument('--weights', help='Parameter manifest for the netref predictor')
    p.add_argument('--subset', choices=['train', 'val', 'test', 'all'], default='all', help='Cohort split to report on')
    p.add_argument('--ablation', action='store_true', help='Run the six ablation configurations on phantoms')
    p.add_argument('--spec', help='Phantom spec JSON for --ablation')
    p.add_argument('--phantoms', type=int, default=2, help='Phantom count for --ablation')
    p.add_argument('--out', required=True, help='Table output (.csv or .json)')

    p = sub.add_parser('render', parents=shared, help='PNG slice of a zone map or heatmap over FLAIR')
    p.add_argument('--flair', required=True, help='FLAIR volume')
    p.add_argument('--zones', help='Zone grid to overlay')
    p.add_argument('--heatmap', help='Occlusion heatmap to overlay (instead of zones)')
    p.add_argument('--view', choices=['axial', 'coronal', 'sagittal'], default='axial', help='Slice orientation')
    p.add_argument('--index', type=int, help='Slice index (default: middle)')
    p.add_argument('--scale', type=int, default=4, help='Pixel upscaling factor')
    p.add_argument('--out', required=True, help='PNG output')
    return parser


def config_overrides(args):
    overrides = {
        'seed': args.seed,
        'threads': args.threads,
        'dataset': args.dataset,
        'model.base_filters': args.base_filters,
        'model.feature_size': args.feature_size,
        'loss.lambda_boundary': args.lambda_boundary,
        'loss.lambda_aux': args.lambda_aux,
        'inference.window': list(args.window) if args.window else None,
        'inference.overlap': args.overlap,
        'inference.min_component_voxels': args.min_component,
        'ablation.mode': args.mode,
        'ablation.boundary_loss': False if args.no_boundary_loss else None,
        'ablation.aux': False if args.no_aux else None,
    }
    for key in ('tta', 'postproc'):
        if getattr(args, key, None) is not None:
            overrides[f'inference.{key}'] = getattr(args, key)
    if getattr(args, 'scales', None):
        overrides['inference.occlusion_scales'] = list(args.scales)
    if getattr(args, 'stride', None):
        overrides['inference.occlusion_stride'] = args.stride
    if getattr(args, 'target_class', None) is not None:
        overrides['inference.occlusion_target_class'] = args.target_class
    return overrides


def _emit(payload):
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + '\n')


def _volume_arg(values):
    return values[0] if len(values) == 1 else values


def _network(config, weights):
    from netref.model import build_params, param_shapes
    from netref.params import ParamStore
    mode = config.ablation.mode
    if weights:
        params = ParamStore.load(weights)
        params.check_shapes(param_shapes(config.model, mode))
    else:
        log.warning('No --weights given; using random weights from seed %d', config.seed)
        params = build_params(config.model, config.seed, mode)
    return params


def _netref_predictor(config, params):
    from predictors import NetrefPredictor
    predictor = NetrefPredictor(params, config.model, config.ablation.mode)
    if config.inference.sliding_window:
        predictor.check_window(config.inference.window)
    return predictor


def cmd_labelgen(args, config):
    from errors import NoTumorError
    from labelgen import generate_zone_labels, vocabulary_for, zone_summary
    from volume_io import read_multimodal, read_volume, write_volume
    from voxelgrid import Role
    if not args.flair and not args.volume:
        raise StageFailed('read', 'give --flair or --volume')
    with stage('read'):
        seg = read_volume(args.seg, Role.LABEL)
        if args.flair:
            volume = read_volume(args.flair, Role.INTENSITY)
        else:
            volume = read_multimodal(_volume_arg(args.volume))
    with stage('labelgen'):
        try:
            zones = generate_zone_labels(seg, volume, vocabulary_for(config.dataset))
        except NoTumorError as e:
            log.warning('Patient skipped: %s', e)
            _emit({'skipped': True, 'reason': str(e)})
            return 0
        summary = zone_summary(zones)
    with stage('write'):
        write_volume(zones, args.out)
        if args.summary:
            with open(args.summary, 'w') as f:
                json.dump(summary, f, indent=2, sort_keys=True)
                f.write('\n')
    _emit(summary)
    return 0


def cmd_eval(args, config):
    from metrics import evaluate_zones, write_report
    from volume_io import read_volume
    from voxelgrid import Role
    with stage('read'):
        pred = read_volume(args.pred, Role.LABEL)
        truth = read_volume(args.truth, Role.LABEL)
    with stage('metrics'):
        report = evaluate_zones(pred, truth, truth.spacing)
    with stage('write'):
        write_report(report, args.out)
    _emit(report.to_dict())
    return 0


def cmd_infer(args, config):
    from pipeline import predict_zones
    from volume_io import read_multimodal, write_volume
    with stage('read'):
        volume = read_multimodal(_volume_arg(args.volume))
        params = _network(config, args.weights)
    with stage('inference'):
        predictor = _netref_predictor(config, params)
        prediction = predict_zones(volume, predictor, config.inference.options())
    with stage('write'):
        write_volume(prediction.zones, args.out)
    return 0


def cmd_occlusion(args, config):
    from pipeline import full_volume_infer, occlusion_map, predicted_zone_mask, sliding_window_infer, zscore_normalize
    from volume_io import read_multimodal, read_volume, write_volume
    from voxelgrid import Role
    inference = config.inference
    with stage('read'):
        volume = read_multimodal(_volume_arg(args.volume))
        region = read_volume(args.region, Role.LABEL) if args.region else None
        params = _network(config, args.weights)
    with stage('occlusion'):
        predictor = _netref_predictor(config, params)
        if region is None:
            mask = predicted_zone_mask(volume, predictor, inference.options())
            log.info('Occlusion target: %d predicted high-risk voxels', int(mask.sum()))
        else:
            data = np.asarray(region.data)
            mask = data == args.region_label if args.region_label is not None else data != 0
        if inference.sliding_window:
            def infer(x):
                return sliding_window_infer(x, predictor, inference.window, inference.overlap)
        else:
            def infer(x):
                return full_volume_infer(x, predictor)
        heat = occlusion_map(zscore_normalize(volume), predictor, mask, inference.occlusion_scales,
                             inference.occlusion_stride, inference.occlusion_target_class,
                             inference.occlusion_fill_value, infer)
    with stage('write'):
        write_volume(heat, args.out)
    return 0


def cmd_phantom(args, config):
    from phantom import PhantomSpec, generate_phantom, load_spec, save_phantom
    with stage('spec'):
        spec = load_spec(args.spec) if args.spec else PhantomSpec(seed=config.seed, dataset=config.dataset)
    with stage('phantom'):
        phantom = generate_phantom(spec)
    with stage('write'):
        paths = save_phantom(phantom, args.out_dir, args.suffix)
    _emit({'paths': paths})
    return 0


def cmd_check_grads(args, config):
    from gradcheck import check_gradients
    with stage('check-grads'):
        report = check_gradients(config.seed, args.size, args.fixtures, args.coordinates, config.loss_weights())
    _emit(report)
    return 0 if report['passed'] else 1


def cmd_check_fusion(args, config):
    from netref.selfcheck import check_fusion
    with stage('check-fusion'):
        report = check_fusion(config.seed, spatial=(args.size,) * 3)
    _emit(report)
    return 0 if report['passed'] else 1


def _write_table(frame, path):
    if str(path).lower().endswith('.json'):
        frame.to_json(path, orient='index', indent=2, double_precision=10)
    else:
        frame.to_csv(path, float_format='%.6f', lineterminator='\n')


def cmd_report(args, config):
    from cohort import discover_patients, run_ablation, run_report, split_cohort, truth_zones
    from phantom import PhantomSpec, load_spec, phantom_batch
    from predictors import OraclePredictor
    if args.ablation:
        with stage('phantom'):
            base = load_spec(args.spec) if args.spec else PhantomSpec(seed=config.seed, dataset=config.dataset)
            phantoms = phantom_batch(base, args.phantoms)
        with stage('ablation'):
            table, _ = run_ablation(phantoms, config.model, config.inference.options(), config.loss_weights(),
                                    config.seed)
        with stage('write'):
            _write_table(table, args.out)
        return 0

    if not args.root:
        raise StageFailed('report', '--root is required unless --ablation is given')
    with stage('discover'):
        patients = discover_patients(args.root)
        split = split_cohort([p.patient_id for p in patients], config.dataset, config.seed)
        wanted = set(split.subset(args.subset))
        patients = [p for p in patients if p.patient_id in wanted]
    with stage('predictor'):
        if args.predictor == 'oracle':
            def factory(record, volume, seg):
                return OraclePredictor(truth_zones(volume, seg, record.dataset))
        else:
            params = _network(config, args.weights)
            _netref_predictor(config, params)

            def factory(record, volume, seg):
                return _netref_predictor(config, params)
    with stage('report'):
        table, _ = run_report(patients, factory, config.inference.options(), config.threads)
    with stage('write'):
        _write_table(table, args.out)
    return 0


def cmd_render(args, config):
    from render import render_heatmap_slice, render_zone_slice, save_png
    from volume_io import read_volume
    from voxelgrid import Role
    if not args.zones and not args.heatmap:
        raise StageFailed('render', 'give --zones or --heatmap')
    with stage('read'):
        flair = read_volume(args.flair, Role.INTENSITY)
        overlay = read_volume(args.heatmap, Role.INTENSITY) if args.heatmap else read_volume(args.zones, Role.LABEL)
    with stage('render'):
        if args.heatmap:
            image = render_heatmap_slice(flair, overlay, args.view, args.index, args.scale)
        else:
            image = render_zone_slice(flair, overlay, args.view, args.index, args.scale)
    with stage('write'):
        save_png(image, args.out)
    return 0


COMMANDS = {
    'labelgen': cmd_labelgen,
    'eval': cmd_eval,
    'infer': cmd_infer,
    'occlusion': cmd_occlusion,
    'phantom': cmd_phantom,
    'check-grads': cmd_check_grads,
    'check-fusion': cmd_check_fusion,
    'report': cmd_report,
    'render': cmd_render,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    if not args.command and not args.dump_config:
        parser.error('a command is required')
    try:
        with stage('config'):
            from config import dump_config, load_config
            config = load_config(args.config, config_overrides(args))
        if args.dump_config:
            sys.stdout.write(dump_config(config))
            return 0
        return COMMANDS[args.command](args, config)
    except StageFailed as e:
        log.debug('Stage %s failed', e.stage, exc_info=True)
        sys.stderr.write(json.dumps({'stage': e.stage, 'message': e.message}) + '\n')
        return 1


if __name__ == '__main__':
    sys.exit(main())
