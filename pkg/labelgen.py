"""
Infiltration risk label generation

Zones are derived from a BraTS segmentation: the whole tumor T (core plus
edema) is the reference set of an exact Euclidean distance transform, and
every voxel is binned by its distance to T:

    3  edema, or 0 < D <= 10 mm
    2  10 < D <= 20 mm
    1  D > 20 mm inside the brain (non-zero FLAIR)
    0  tumor core and everything else
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure

from errors import ConfigError, NoTumorError, SizeError, VocabularyError
from voxelgrid import Role, VoxelGrid, Zone, mask_grid, require_same_geometry, zone_grid

log = logging.getLogger('labelgen')

HIGH_RISK_MM = 10.0
MEDIUM_RISK_MM = 20.0

ORACLE_MAX_VOXELS = 64 ** 3


@dataclass(frozen=True)
class LabelVocabularyMap:
    """Raw BraTS label values for one dataset release"""
    dataset: str
    necrotic: int
    edema: int
    enhancing: int

    @property
    def values(self):
        return frozenset({0, self.necrotic, self.edema, self.enhancing})


VOCABULARIES = {
    'brats2020': LabelVocabularyMap('brats2020', necrotic=1, edema=2, enhancing=4),
    'brats2025': LabelVocabularyMap('brats2025', necrotic=1, edema=2, enhancing=3),
}


def vocabulary_for(dataset):
    try:
        return VOCABULARIES[dataset]
    except KeyError:
        raise ConfigError('dataset', dataset, ' or '.join(VOCABULARIES)) from None


@dataclass(frozen=True, eq=False)
class TumorRegions:
    """Tumor core (necrotic + enhancing), edema and their union"""
    core: VoxelGrid
    edema: VoxelGrid
    whole: VoxelGrid


def parse_brats_mask(mask, vocab):
    """
    Split a BraTS segmentation into core, edema and whole-tumor masks

    Args:
        mask: label VoxelGrid with raw BraTS values
        vocab: LabelVocabularyMap of the release the mask comes from

    Returns:
        TumorRegions
    """
    data = np.asarray(mask.data)
    values, counts = np.unique(data, return_counts=True)
    unknown = {int(v): int(c) for v, c in zip(values, counts) if int(v) not in vocab.values}
    if unknown:
        raise VocabularyError(unknown)

    core = (data == vocab.necrotic) | (data == vocab.enhancing)
    edema = data == vocab.edema
    return TumorRegions(
        core=mask_grid(core, mask.spacing),
        edema=mask_grid(edema, mask.spacing),
        whole=mask_grid(core | edema, mask.spacing),
    )


def brain_mask_from_flair(volume):
    """Brain mask: exactly the non-zero FLAIR voxels, no cleanup

    volume may be a MultiModalVolume or the FLAIR VoxelGrid itself.
    """
    flair = getattr(volume, 'flair', volume)
    return mask_grid(np.asarray(flair.data) != 0, flair.spacing)


def exact_edt(reference):
    """
    Exact anisotropic Euclidean distance (mm) from every voxel to the nearest
    reference voxel; 0 on the reference set itself.

    Uses scipy's separable exact transform, not a chamfer approximation.
    """
    ref = np.asarray(reference.data, dtype=bool)
    if not ref.any():
        raise NoTumorError('no tumor: the reference set for the distance transform is empty')
    dist = distance_transform_edt(~ref, sampling=reference.spacing)
    return VoxelGrid(dist, reference.spacing, Role.DISTANCE)


def assign_zones(regions, dist, brain):
    """
    Bin voxels into risk zones by their distance to the whole tumor

    Args:
        regions: TumorRegions
        dist: DistanceField computed against regions.whole
        brain: binary brain mask

    Returns:
        zone-label VoxelGrid
    """
    require_same_geometry(regions.whole, regions.core, regions.edema, dist, brain, what='label inputs')
    d = np.asarray(dist.data)
    edema = np.asarray(regions.edema.data, dtype=bool)
    in_brain = np.asarray(brain.data, dtype=bool)

    zones = np.full(d.shape, int(Zone.OUTSIDE), dtype=np.uint8)
    high = edema | ((d > 0) & (d <= HIGH_RISK_MM))
    medium = ~high & (d > HIGH_RISK_MM) & (d <= MEDIUM_RISK_MM)
    low = ~high & (d > MEDIUM_RISK_MM) & in_brain
    zones[high] = Zone.HIGH
    zones[medium] = Zone.MEDIUM
    zones[low] = Zone.LOW

    stray = int(np.count_nonzero(edema & ~in_brain))
    if stray:
        log.warning('%d edema voxels lie outside the FLAIR brain mask; labelled high risk', stray)
    return zone_grid(zones, dist.spacing)


def generate_zone_labels(seg, volume, vocab):
    """Full label path: parse -> brain mask -> EDT -> zones

    volume is a MultiModalVolume or a FLAIR VoxelGrid.
    """
    regions = parse_brats_mask(seg, vocab)
    brain = brain_mask_from_flair(volume)
    require_same_geometry(seg, brain, what='segmentation and FLAIR')
    dist = exact_edt(regions.whole)
    return assign_zones(regions, dist, brain)


def zone_summary(zones):
    """Voxel counts and volumes (ml) per zone"""
    data = np.asarray(zones.data)
    voxel_ml = zones.voxel_volume_mm3 / 1000.0
    counts = {int(z): int(np.count_nonzero(data == z)) for z in Zone}
    return {
        'zone_voxels': {str(z): n for z, n in counts.items()},
        'zone_volume_ml': {str(z): n * voxel_ml for z, n in counts.items()},
    }


def _surface_voxels(mask):
    """Voxels of mask with at least one 6-neighbour outside it"""
    structure = generate_binary_structure(3, 1)
    return mask & ~binary_erosion(mask, structure=structure, border_value=1)


def brute_force_zone_oracle(regions, brain, spacing, max_voxels=ORACLE_MAX_VOXELS):
    """
    Zone labels by direct nearest-voxel scan (test oracle)

    The nearest tumor voxel to any point outside T always lies on T's
    6-surface, so only surface voxels are scanned.
    """
    whole = np.asarray(regions.whole.data, dtype=bool)
    if whole.size > max_voxels:
        raise SizeError(f'oracle scan limited to {max_voxels} voxels, grid has {whole.size}')
    edema = np.asarray(regions.edema.data, dtype=bool)
    in_brain = np.asarray(brain.data, dtype=bool)
    zones = np.zeros(whole.shape, dtype=np.uint8)

    if not whole.any():
        zones[in_brain] = Zone.LOW
        return zone_grid(zones, spacing)

    targets = np.argwhere(_surface_voxels(whole))
    outside = np.argwhere(~whole)
    for start in range(0, len(outside), 1024):
        chunk = outside[start:start + 1024]
        d2 = np.zeros((len(chunk), len(targets)))
        for axis in range(3):
            diff = (chunk[:, axis, None] - targets[None, :, axis]).astype(np.float64) * spacing[axis]
            d2 += diff * diff
        d = np.sqrt(d2.min(axis=1))
        idx = tuple(chunk.T)
        label = np.zeros(len(chunk), dtype=np.uint8)
        label[(d > MEDIUM_RISK_MM) & in_brain[idx]] = Zone.LOW
        label[(d > HIGH_RISK_MM) & (d <= MEDIUM_RISK_MM)] = Zone.MEDIUM
        label[(d > 0) & (d <= HIGH_RISK_MM)] = Zone.HIGH
        zones[idx] = label
    zones[edema] = Zone.HIGH
    return zone_grid(zones, spacing)
