"""
From a predictor and a multi-modal volume to a final zone map

Pre-processing (z-score), training patch sampling and augmentation,
sliding-window inference, flip test-time augmentation, connected-component
post-processing and occlusion sensitivity.

Work items (windows, flips, occluder positions) are always visited in a
fixed enumeration order and reduced in that order.
"""

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import binary_dilation, binary_fill_holes, find_objects, generate_binary_structure, label

from errors import ConfigError, ContractError, SizeError
from labelgen import VOCABULARIES, generate_zone_labels
from metrics import evaluate_zones
from predictors import WindowRequest
from voxelgrid import PLANES, MultiModalVolume, Role, VoxelGrid, Zone, zone_grid

log = logging.getLogger('pipeline')

ZSCORE_EPSILON = 1e-8
PATCH_SIZE = (96, 96, 96)
PATCHES_PER_VOLUME = 2
WINDOW_SIZE = (96, 96, 96)
WINDOW_OVERLAP = 0.5
MIN_COMPONENT_VOXELS = 500
OCCLUSION_SCALES = (8, 16, 32)
OCCLUSION_STRIDE = 8

# All eight subsets of the three spatial axes
TTA_FLIPS = ((), (0,), (1,), (2,), (0, 1), (0, 2), (1, 2), (0, 1, 2))
POSTPROC_ORDER = (Zone.HIGH, Zone.MEDIUM, Zone.LOW)
PLANE_NAMES = tuple(PLANES)

_SIX = generate_binary_structure(3, 1)


@dataclass
class PostProcConfig:
    min_component_voxels: int = MIN_COMPONENT_VOXELS
    fill_holes: bool = True
    connectivity: int = 6

    def __post_init__(self):
        if int(self.min_component_voxels) < 0:
            raise ConfigError('inference.min_component_voxels', self.min_component_voxels, 'an integer >= 0')
        if int(self.connectivity) != 6:
            raise ConfigError('inference.connectivity', self.connectivity, '6')
        self.min_component_voxels = int(self.min_component_voxels)


@dataclass
class InferenceOptions:
    window: tuple = WINDOW_SIZE
    overlap: float = WINDOW_OVERLAP
    sliding_window: bool = True
    tta: bool = True
    postproc: bool = True
    postproc_config: PostProcConfig = field(default_factory=PostProcConfig)

    def __post_init__(self):
        self.window = tuple(int(n) for n in self.window)
        if len(self.window) != 3 or min(self.window) < 1:
            raise ConfigError('inference.window', self.window, 'three positive integers')
        if not 0 <= self.overlap < 1:
            raise ConfigError('inference.overlap', self.overlap, 'a real in [0, 1)')


def _as_array(volume):
    if isinstance(volume, MultiModalVolume):
        return volume.stack(np.float64)
    x = np.asarray(volume, dtype=np.float64)
    if x.ndim != 4:
        raise ContractError(f'expected a (4, D, H, W) volume, got shape {x.shape}')
    return x


def _pad_to(array, dims, spatial_from=0):
    """Zero-pad the trailing three axes at the high end to at least dims"""
    pad = [(0, 0)] * spatial_from + [(0, max(0, d - n)) for n, d in zip(array.shape[spatial_from:], dims)]
    return np.pad(array, pad) if any(p for _, p in pad) else array


def zscore_normalize(volume):
    """Per modality: non-zero voxels to mean 0 / std 1, zeros stay 0"""
    def normalize(grid):
        data = np.asarray(grid.data, dtype=np.float64)
        nonzero = data != 0
        out = np.zeros_like(data)
        if nonzero.any():
            values = data[nonzero]
            out[nonzero] = (values - values.mean()) / max(values.std(), ZSCORE_EPSILON)
        return grid.with_data(out)
    return volume.map(normalize)


@dataclass(frozen=True)
class AugmentTransform:
    """Flips (applied first) then quarter turns in one plane"""
    flips: tuple = ()
    plane: str = 'axial'
    quarter_turns: int = 0


@dataclass(eq=False)
class PatchSample:
    origin: tuple
    size: tuple
    modalities: np.ndarray
    labels: np.ndarray
    polarity: str
    center: tuple = None
    transform: AugmentTransform = None


def _draw_center(rng, candidates, fallback_dims):
    if len(candidates):
        return tuple(int(i) for i in candidates[rng.integers(len(candidates))])
    return tuple(int(rng.integers(n)) for n in fallback_dims)


def sample_patches(volume, labels, count=PATCHES_PER_VOLUME, size=PATCH_SIZE, seed=0):
    """
    Balanced training patches, alternating positive and negative

    Positive centers are drawn from zones 2 and 3, negative centers from
    zone 1 and background; a polarity with no candidates falls back to any
    voxel. Volumes smaller than the patch are zero-padded first.
    """
    size = tuple(int(n) for n in size)
    x = _pad_to(_as_array(volume), size, spatial_from=1)
    y = labels.data if isinstance(labels, VoxelGrid) else np.asarray(labels)
    y = _pad_to(y, size)
    if x.shape[1:] != y.shape:
        raise SizeError(f'volume {x.shape[1:]} and labels {y.shape} differ in dims')
    rng = np.random.default_rng(seed)
    candidates = {
        'positive': np.argwhere(y >= Zone.MEDIUM),
        'negative': np.argwhere(y <= Zone.LOW),
    }
    patches = []
    for i in range(count):
        polarity = 'positive' if i % 2 == 0 else 'negative'
        center = _draw_center(rng, candidates[polarity], y.shape)
        origin = tuple(int(min(max(c - s // 2, 0), n - s)) for c, s, n in zip(center, size, y.shape))
        window = tuple(slice(o, o + s) for o, s in zip(origin, size))
        patches.append(PatchSample(
            origin=origin,
            size=size,
            modalities=x[(slice(None),) + window].copy(),
            labels=y[window].copy(),
            polarity=polarity,
            center=center,
        ))
    return patches


def draw_transform(rng):
    flips = tuple(axis for axis in range(3) if rng.random() < 0.5)
    plane = PLANE_NAMES[int(rng.integers(len(PLANE_NAMES)))]
    return AugmentTransform(flips, plane, int(rng.integers(4)))


def _apply(array, transform, spatial_from, inverse=False):
    flip_axes = tuple(a + spatial_from for a in transform.flips)
    rot_axes = tuple(a + spatial_from for a in PLANES[transform.plane])
    if not inverse:
        if flip_axes:
            array = np.flip(array, axis=flip_axes)
        array = np.rot90(array, k=transform.quarter_turns, axes=rot_axes)
    else:
        array = np.rot90(array, k=-transform.quarter_turns, axes=rot_axes)
        if flip_axes:
            array = np.flip(array, axis=flip_axes)
    return np.ascontiguousarray(array)


def augment_patch(patch, seed):
    """Random per-axis flips then a random in-plane quarter rotation, recorded on the patch"""
    transform = draw_transform(np.random.default_rng(seed))
    labels = _apply(patch.labels, transform, 0)
    return replace(
        patch,
        modalities=_apply(patch.modalities, transform, 1),
        labels=labels,
        size=tuple(labels.shape),
        transform=transform,
    )


def invert_augmentation(patch):
    if patch.transform is None:
        return patch
    labels = _apply(patch.labels, patch.transform, 0, inverse=True)
    return replace(
        patch,
        modalities=_apply(patch.modalities, patch.transform, 1, inverse=True),
        labels=labels,
        size=tuple(labels.shape),
        transform=None,
    )


def window_starts(n, window, stride):
    """Window origins along one axis; the last one is clamped to the boundary"""
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def full_volume_infer(volume, predictor, flips=()):
    """One predictor call over the whole volume"""
    x = _as_array(volume)
    return predictor(x, WindowRequest.full(x.shape[1:], flips))


def sliding_window_infer(volume, predictor, window=WINDOW_SIZE, overlap=WINDOW_OVERLAP, flips=()):
    """
    Uniformly averaged predictions over overlapping windows

    Args:
        volume: MultiModalVolume or array (4, D, H, W)
        predictor: Predictor
        window: window dims
        overlap: fraction of the window shared by neighbouring windows
        flips: axes the volume was flipped along (forwarded to the predictor)

    Returns:
        array (4, D, H, W)
    """
    x = _as_array(volume)
    dims = x.shape[1:]
    window = tuple(int(n) for n in window)
    frame = _pad_to(x, window, spatial_from=1)
    frame_dims = frame.shape[1:]
    strides = [max(1, int(w * (1.0 - overlap))) for w in window]
    lattice = [window_starts(n, w, s) for n, w, s in zip(frame_dims, window, strides)]

    total = np.zeros((4,) + frame_dims)
    counts = np.zeros(frame_dims)
    for origin in itertools.product(*lattice):
        box = tuple(slice(o, o + w) for o, w in zip(origin, window))
        request = WindowRequest(origin, window, frame_dims, tuple(flips))
        total[(slice(None),) + box] += predictor(frame[(slice(None),) + box], request)
        counts[box] += 1
    log.debug('Sliding window: %d windows over %s', int(np.prod([len(s) for s in lattice])), frame_dims)
    out = total / counts
    return out[(slice(None),) + tuple(slice(0, n) for n in dims)]


def tta_predict(volume, predictor, base_infer=None):
    """
    Average of base_infer over all eight axis-flip combinations

    base_infer(x, predictor, flips=...) runs on the flipped volume; its output
    is flipped back before averaging.
    """
    base_infer = base_infer or full_volume_infer
    x = _as_array(volume)
    total = np.zeros((4,) + x.shape[1:])
    for flips in TTA_FLIPS:
        axes = tuple(a + 1 for a in flips)
        flipped = np.flip(x, axis=axes) if axes else x
        probs = base_infer(np.ascontiguousarray(flipped), predictor, flips=flips)
        total += np.flip(probs, axis=axes) if axes else probs
    return total / len(TTA_FLIPS)


def _majority_neighbour(data, component):
    """Most frequent label among the 6-neighbours of a component (ties -> lower)"""
    ring = binary_dilation(component, structure=_SIX) & ~component
    if not ring.any():
        return None
    return int(np.argmax(np.bincount(data[ring], minlength=len(Zone))))


def _remove_small_components(data, zone, min_voxels):
    components, count = label(data == zone, structure=_SIX)
    if not count:
        return 0
    sizes = np.bincount(components.ravel())
    removed = 0
    for index, box in enumerate(find_objects(components), start=1):
        if sizes[index] >= min_voxels:
            continue
        # a one-voxel margin holds the component's whole 6-neighbourhood
        box = tuple(slice(max(s.start - 1, 0), s.stop + 1) for s in box)
        component = components[box] == index
        target = _majority_neighbour(data[box], component)
        if target is None:
            continue
        data[box][component] = target
        removed += 1
    return removed


def _fill_small_holes(data, zone, max_voxels, locked):
    mask = data == zone
    holes = binary_fill_holes(mask, structure=_SIX) & ~mask
    if not holes.any():
        return 0
    pockets, count = label(holes, structure=_SIX)
    sizes = np.bincount(pockets.ravel())
    small = sizes < max_voxels
    small[0] = False
    fill = small[pockets] & ~locked
    data[fill] = zone
    locked |= fill
    return int(np.count_nonzero(fill))


def postprocess(zones, config=None):
    """
    Clean a zone grid

    For zones 3, 2, 1: 6-connected components smaller than
    min_component_voxels take the majority label of their 6-neighbours.
    Then, again for zones 3, 2, 1: enclosed pockets smaller than
    min_component_voxels are filled with the zone; a filled voxel is not
    revisited by a later zone.
    """
    config = config or PostProcConfig()
    spacing = zones.spacing if isinstance(zones, VoxelGrid) else (1.0, 1.0, 1.0)
    data = np.array(zones.data if isinstance(zones, VoxelGrid) else zones, dtype=np.uint8)
    removed = filled = 0
    for zone in POSTPROC_ORDER:
        removed += _remove_small_components(data, int(zone), config.min_component_voxels)
    if config.fill_holes:
        locked = np.zeros(data.shape, dtype=bool)
        for zone in POSTPROC_ORDER:
            filled += _fill_small_holes(data, int(zone), config.min_component_voxels, locked)
    log.debug('Post-processing: %d components relabelled, %d voxels filled', removed, filled)
    return zone_grid(data, spacing)


def occlusion_map(volume, predictor, target_region, patch_sizes=OCCLUSION_SCALES, stride=OCCLUSION_STRIDE,
                  target_class=int(Zone.HIGH), fill_value=0.0, infer=None):
    """
    Multi-scale occlusion sensitivity

    Every occluder cube sets all modalities to fill_value; the drop in mean
    target-class probability over target_region is credited to the cube's
    voxels. Per scale each voxel gets the mean drop of the cubes covering it;
    scales are averaged, negatives clipped and the map scaled to [0, 1].

    Args:
        infer: x -> probabilities; defaults to one full-volume predictor call

    Returns:
        VoxelGrid of sensitivities in [0, 1]
    """
    x = _as_array(volume)
    dims = x.shape[1:]
    spacing = volume.spacing if isinstance(volume, MultiModalVolume) else (1.0, 1.0, 1.0)
    region = np.asarray(target_region.data if isinstance(target_region, VoxelGrid) else target_region, dtype=bool)
    if region.shape != dims:
        raise SizeError(f'target region {region.shape} does not match volume {dims}')
    if not region.any():
        raise ContractError('occlusion target region is empty')
    for s in patch_sizes:
        if any(int(s) > n for n in dims):
            raise SizeError(f'occluder size {s} exceeds volume dims {dims}')
    infer = infer or (lambda v: full_volume_infer(v, predictor))

    baseline = float(infer(x)[target_class][region].mean())
    per_scale = []
    for s in patch_sizes:
        s = int(s)
        total = np.zeros(dims)
        counts = np.zeros(dims)
        for origin in itertools.product(*[window_starts(n, s, int(stride)) for n in dims]):
            cube = tuple(slice(o, o + s) for o in origin)
            occluded = x.copy()
            occluded[(slice(None),) + cube] = fill_value
            drop = baseline - float(infer(occluded)[target_class][region].mean())
            total[cube] += drop
            counts[cube] += 1
        per_scale.append(np.divide(total, counts, out=np.zeros(dims), where=counts > 0))
        log.debug('Occlusion scale %d done', s)
    heat = np.clip(np.mean(per_scale, axis=0), 0.0, None)
    peak = heat.max()
    heat = heat / peak if peak > 0 else np.zeros(dims)
    return VoxelGrid(heat, spacing, Role.INTENSITY)


@dataclass(eq=False)
class ZonePrediction:
    probabilities: np.ndarray
    raw_zones: VoxelGrid
    zones: VoxelGrid


def predict_zones(volume, predictor, options=None):
    """normalize -> infer (+- TTA) -> argmax -> (+- post-processing)"""
    options = options or InferenceOptions()
    x = zscore_normalize(volume).stack(np.float64)
    if options.sliding_window:
        def base_infer(v, p, flips=()):
            return sliding_window_infer(v, p, options.window, options.overlap, flips)
    else:
        base_infer = full_volume_infer
    probs = tta_predict(x, predictor, base_infer) if options.tta else base_infer(x, predictor)
    raw = zone_grid(np.argmax(probs, axis=0), volume.spacing)
    zones = postprocess(raw, options.postproc_config) if options.postproc else raw
    return ZonePrediction(probs, raw, zones)


def predicted_zone_mask(volume, predictor, options=None, zone=Zone.HIGH):
    """Voxels the predictor assigns to `zone`; the default occlusion target"""
    mask = np.asarray(predict_zones(volume, predictor, options).zones.data) == int(zone)
    if not mask.any():
        raise ContractError(f'the predicted zone {int(zone)} is empty; pass an explicit target region')
    return mask


def evaluate_patient(volume, truth_seg, predictor, options=None, vocab=None):
    """
    Predict one patient and score it against zones derived from its segmentation

    Returns:
        (zone grid, MetricsReport)
    """
    vocab = vocab or VOCABULARIES['brats2020']
    truth = generate_zone_labels(truth_seg, volume, vocab)
    prediction = predict_zones(volume, predictor, options)
    return prediction.zones, evaluate_zones(prediction.zones, truth, truth.spacing)
