"""
Per-zone evaluation: Dice, HD95, IoU, volumetric similarity, sensitivity
and precision for risk zones 1-3, plus their means

A metric whose denominator is zero is undefined (None) and left out of the
means. Both masks empty counts as perfect agreement for DSC, IoU and VS.
"""

import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure

from errors import ContractError
from voxelgrid import RISK_ZONES, VoxelGrid

log = logging.getLogger('metrics')

METRICS = ('dsc', 'hd95_mm', 'iou', 'vs', 'sensitivity', 'precision')
HD_PERCENTILE = 95.0

# Column order of the results tables
TABLE_COLUMNS = (
    'dice_mean', 'dice_zone1', 'dice_zone2', 'dice_zone3',
    'hd95_mm', 'iou_mean', 'vs_mean', 'sensitivity_mean', 'precision_mean',
)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def _array(grid):
    return grid.data if isinstance(grid, VoxelGrid) else np.asarray(grid)


def _require_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ContractError(f'{what}: prediction {a.shape} and truth {b.shape} differ in shape')


def zone_confusion(pred, truth, zone):
    """One-vs-rest counts for one zone"""
    p, t = _array(pred), _array(truth)
    _require_same_shape(p, t, 'zone_confusion')
    p, t = p == int(zone), t == int(zone)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def _ratio(num, den):
    return num / den if den > 0 else None


def overlap_metrics(counts, vol_pred, vol_truth):
    """
    Returns:
        {dsc, iou, vs, sensitivity, precision}; None marks an undefined value
    """
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    if vol_pred == 0 and vol_truth == 0:
        return {'dsc': 1.0, 'iou': 1.0, 'vs': 1.0, 'sensitivity': None, 'precision': None}
    vol_sum = vol_pred + vol_truth
    return {
        'dsc': _ratio(2 * tp, 2 * tp + fp + fn),
        'iou': _ratio(tp, tp + fp + fn),
        'vs': 1.0 - abs(vol_pred - vol_truth) / vol_sum if vol_sum > 0 else None,
        'sensitivity': _ratio(tp, tp + fn),
        'precision': _ratio(tp, tp + fp),
    }


def extract_surface(mask):
    """
    Surface of a binary mask as a boolean grid: mask voxels with a 6-neighbour
    outside the mask or outside the volume
    """
    m = np.asarray(_array(mask), dtype=bool)
    if not m.any():
        return np.zeros(m.shape, dtype=bool)
    structure = generate_binary_structure(3, 1)
    return m & ~binary_erosion(m, structure=structure, border_value=0)


def surface_distances(from_surface, to_surface, spacing):
    """Distance (mm) from each voxel of from_surface to the nearest voxel of to_surface"""
    dist = distance_transform_edt(~to_surface, sampling=spacing)
    return dist[from_surface]


def hd95(pred, truth, spacing=(1.0, 1.0, 1.0)):
    """
    95th percentile of the pooled bidirectional surface distances (mm)

    Returns:
        float; 0.0 when both surfaces are empty, None when exactly one is
    """
    p, t = np.asarray(_array(pred), dtype=bool), np.asarray(_array(truth), dtype=bool)
    _require_same_shape(p, t, 'hd95')
    sp, st = extract_surface(p), extract_surface(t)
    has_p, has_t = bool(sp.any()), bool(st.any())
    if not has_p and not has_t:
        return 0.0
    if has_p != has_t:
        return None
    pooled = np.concatenate([surface_distances(sp, st, spacing), surface_distances(st, sp, spacing)])
    return float(np.percentile(pooled, HD_PERCENTILE))


@dataclass
class MetricsReport:
    zones: dict
    mean: dict
    undefined: list = field(default_factory=list)

    def to_dict(self):
        return {
            'zones': {str(z): dict(m) for z, m in self.zones.items()},
            'mean': dict(self.mean),
            'undefined': [list(u) for u in self.undefined],
        }

    def table_row(self):
        """One row in results-table column order"""
        return {
            'dice_mean': self.mean['dsc'],
            'dice_zone1': self.zones[1]['dsc'],
            'dice_zone2': self.zones[2]['dsc'],
            'dice_zone3': self.zones[3]['dsc'],
            'hd95_mm': self.mean['hd95_mm'],
            'iou_mean': self.mean['iou'],
            'vs_mean': self.mean['vs'],
            'sensitivity_mean': self.mean['sensitivity'],
            'precision_mean': self.mean['precision'],
        }


def _mean(values):
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def evaluate_zones(pred, truth, spacing=None):
    """
    Score a predicted zone grid against the truth

    Args:
        pred, truth: zone grids (VoxelGrid or arrays) of equal shape
        spacing: mm per voxel; defaults to the truth grid's spacing

    Returns:
        MetricsReport
    """
    p, t = _array(pred), _array(truth)
    _require_same_shape(p, t, 'evaluate_zones')
    if spacing is None:
        spacing = truth.spacing if isinstance(truth, VoxelGrid) else (1.0, 1.0, 1.0)
    zones, undefined = {}, []
    for zone in RISK_ZONES:
        zone = int(zone)
        counts = zone_confusion(p, t, zone)
        scores = overlap_metrics(counts, counts.tp + counts.fp, counts.tp + counts.fn)
        scores['hd95_mm'] = hd95(p == zone, t == zone, spacing)
        zones[zone] = {m: scores[m] for m in METRICS}
        undefined.extend((zone, m) for m in METRICS if scores[m] is None)
    mean = {m: _mean(zones[z][m] for z in zones) for m in METRICS}
    if undefined:
        log.info('Undefined metrics left out of the means: %s', ', '.join(f'zone {z} {m}' for z, m in undefined))
    return MetricsReport(zones, mean, undefined)


def write_report(report, path):
    """JSON (full report) or CSV (one table row) chosen by suffix"""
    reports = report if isinstance(report, (list, tuple)) else [report]
    try:
        if str(path).lower().endswith('.csv'):
            with open(path, 'w', newline='') as f:
                writer = csv.DictWriter(f, fieldnames=TABLE_COLUMNS, lineterminator='\n')
                writer.writeheader()
                for r in reports:
                    writer.writerow({k: '' if v is None else f'{v:.6f}' for k, v in r.table_row().items()})
        else:
            payload = reports[0].to_dict() if len(reports) == 1 else [r.to_dict() for r in reports]
            with open(path, 'w') as f:
                json.dump(payload, f, indent=2, sort_keys=True)
                f.write('\n')
    except OSError as e:
        raise OSError(f'could not write report {os.fspath(path)}: {e}') from e
    log.debug('Wrote report to %s', path)
