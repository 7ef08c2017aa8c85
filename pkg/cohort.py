"""
Batch evaluation over a cohort of patients and the ablation table

A cohort is a directory with one sub-directory per patient, holding the
four modality files and a '_seg' segmentation under either BraTS naming
scheme. Patients run in a thread pool; results are always collected in
patient-id order.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from errors import FormatError, NoTumorError
from labelgen import generate_zone_labels, vocabulary_for
from losses import LossWeights, total_loss
from metrics import TABLE_COLUMNS
from netref.model import build_params, infiltrnet_logits
from pipeline import InferenceOptions, evaluate_patient, zscore_normalize
from predictors import NetrefPredictor
from voxelgrid import Role
from volume_io import SEG_SUFFIX, find_modality_files, find_volume, read_multimodal, read_volume

log = logging.getLogger('cohort')

SPLIT_PRESETS = {
    'brats2020': (294, 37, 37),
    'brats2025': (1000, 125, 126),
}

LOSS_COLUMNS = ('dice_ce', 'boundary', 'aux', 'total')


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    directory: str
    dataset: str
    modality_paths: tuple
    seg_path: str


@dataclass(frozen=True)
class CohortSplit:
    train: list
    val: list
    test: list

    def subset(self, name):
        return {'train': self.train, 'val': self.val, 'test': self.test, 'all': self.train + self.val + self.test}[name]


def discover_patients(root):
    """Patient directories under root with all four modalities and a segmentation, sorted by id"""
    records = []
    for entry in sorted(os.listdir(root)):
        directory = os.path.join(root, entry)
        if not os.path.isdir(directory):
            continue
        try:
            dataset, paths = find_modality_files(directory)
        except FormatError as e:
            log.warning('Skipping %s: %s', entry, e)
            continue
        seg = find_volume(directory, SEG_SUFFIX)
        if seg is None:
            log.warning('Skipping %s: no segmentation', entry)
            continue
        records.append(PatientRecord(entry, directory, dataset, tuple(paths), seg))
    log.info('Discovered %d patients under %s', len(records), root)
    return records


def split_counts(total, counts):
    """Scale (train, val, test) counts to a cohort of `total` patients"""
    train, val, test = counts
    wanted = train + val + test
    if total >= wanted:
        return total - val - test, val, test
    val = int(total * val / wanted)
    test = int(total * test / wanted)
    if total >= 3:
        val, test = max(val, 1), max(test, 1)
    return total - val - test, val, test


def split_cohort(patient_ids, counts='brats2020', seed=0):
    """
    Seeded train/val/test split

    Args:
        patient_ids: ids to split
        counts: (train, val, test) or a preset name ('brats2020', 'brats2025');
                a cohort larger than the counts puts the surplus into train
        seed: shuffle seed
    """
    if isinstance(counts, str):
        counts = SPLIT_PRESETS[counts]
    ids = sorted(patient_ids)
    n_train, n_val, n_test = split_counts(len(ids), counts)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return CohortSplit(
        train=sorted(shuffled[:n_train]),
        val=sorted(shuffled[n_train:n_train + n_val]),
        test=sorted(shuffled[n_train + n_val:]),
    )


def _table(rows, index):
    frame = pd.DataFrame(rows, index=pd.Index(index, name='patient'))
    frame = frame.astype(float)
    if len(frame):
        frame.loc['mean'] = frame.mean(axis=0, skipna=True)
    return frame


def _evaluate_record(record, predictor_factory, options):
    volume = read_multimodal(record.modality_paths)
    seg = read_volume(record.seg_path, Role.LABEL)
    vocab = vocabulary_for(record.dataset)
    try:
        predictor = predictor_factory(record, volume, seg)
        _, report = evaluate_patient(volume, seg, predictor, options, vocab)
    except NoTumorError as e:
        log.warning('Patient %s skipped: %s', record.patient_id, e)
        return None
    log.info('Patient %s: mean Dice %s', record.patient_id, report.mean['dsc'])
    return report


def run_report(patients, predictor_factory, options=None, threads=1):
    """
    Evaluate every patient and tabulate the metrics

    Args:
        patients: PatientRecords
        predictor_factory: (record, volume, seg) -> Predictor
        options: InferenceOptions
        threads: worker threads

    Returns:
        (DataFrame with one row per patient plus a 'mean' row, {patient_id: MetricsReport})
    """
    options = options or InferenceOptions()
    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        reports = list(pool.map(lambda r: _evaluate_record(r, predictor_factory, options), patients))
    kept = [(p.patient_id, r) for p, r in zip(patients, reports) if r is not None]
    frame = _table([r.table_row() for _, r in kept], [pid for pid, _ in kept])
    return frame.reindex(columns=list(TABLE_COLUMNS)), dict(kept)


@dataclass(frozen=True)
class AblationConfig:
    name: str
    mode: str = 'full'
    boundary_loss: bool = True
    aux: bool = True
    tta: bool = True
    postproc: bool = True


ABLATIONS = (
    AblationConfig('full'),
    AblationConfig('no_boundary_loss', boundary_loss=False),
    AblationConfig('no_aux', aux=False),
    AblationConfig('no_tta_pp', tta=False, postproc=False),
    AblationConfig('cnn_only', mode='cnn_only'),
    AblationConfig('swin_only', mode='swin_only'),
)


@dataclass(eq=False)
class AblationResult:
    config: AblationConfig
    table: pd.DataFrame
    losses: pd.DataFrame
    reports: dict = field(default_factory=dict)

    def summary(self):
        row = {'configuration': self.config.name}
        row.update(self.table.loc['mean'].to_dict() if 'mean' in self.table.index else {})
        row.update(self.losses.loc['mean'].to_dict() if 'mean' in self.losses.index else {})
        return row


def _pad_to_multiple(array, multiple, spatial_from):
    pad = [(0, 0)] * spatial_from + [(0, -n % multiple) for n in array.shape[spatial_from:]]
    return np.pad(array, pad)


def _phantom_losses(phantom, params, model_config, mode, weights):
    x = _pad_to_multiple(zscore_normalize(phantom.volume).stack(np.float64), 16, 1)
    labels = _pad_to_multiple(np.asarray(phantom.zones.data), 16, 0)
    logits, aux = infiltrnet_logits(x, params, model_config, mode)
    return total_loss(logits, aux, labels, weights).to_dict()


def run_ablation(phantoms, model_config, options=None, loss_weights=None, seed=0, ablations=ABLATIONS):
    """
    Run every ablation configuration over a phantom batch with a
    random-weights network

    Returns:
        (summary DataFrame indexed by configuration, {name: AblationResult})
    """
    options = options or InferenceOptions()
    loss_weights = loss_weights or LossWeights()
    results = {}
    for ablation in ablations:
        params = build_params(model_config, seed, ablation.mode)
        weights = replace(
            loss_weights,
            lambda_boundary=loss_weights.lambda_boundary if ablation.boundary_loss else 0.0,
            lambda_aux=loss_weights.lambda_aux if ablation.aux else 0.0,
        )
        run_options = replace(options, tta=options.tta and ablation.tta, postproc=options.postproc and ablation.postproc)
        predictor = NetrefPredictor(params, model_config, ablation.mode)
        if run_options.sliding_window:
            predictor.check_window(run_options.window)
        rows, loss_rows, reports, index = [], [], {}, []
        for i, phantom in enumerate(phantoms):
            name = f'phantom{i:03d}'
            vocab = vocabulary_for(phantom.spec.dataset)
            _, report = evaluate_patient(phantom.volume, phantom.seg, predictor, run_options, vocab)
            reports[name] = report
            rows.append(report.table_row())
            loss_rows.append(_phantom_losses(phantom, params, model_config, ablation.mode, weights))
            index.append(name)
        results[ablation.name] = AblationResult(
            ablation,
            _table(rows, index).reindex(columns=list(TABLE_COLUMNS)),
            _table(loss_rows, index).reindex(columns=list(LOSS_COLUMNS)),
            reports,
        )
        log.info('Ablation %s done over %d phantoms', ablation.name, len(phantoms))
    summary = pd.DataFrame([r.summary() for r in results.values()]).set_index('configuration')
    return summary, results


def truth_zones(volume, seg, dataset):
    """Zone grid a patient is scored against"""
    return generate_zone_labels(seg, volume, vocabulary_for(dataset))
