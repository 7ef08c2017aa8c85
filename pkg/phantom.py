"""
Synthetic patient generator for end-to-end testing

A phantom is three nested axis-aligned ellipsoids inside an ellipsoidal
brain: the tumor core (necrotic centre plus enhancing shell) inside the
edema ellipsoid. Voxel v sits at index * spacing (mm).

Noise comes from a portable stream: PCG64 seeded through SeedSequence(seed),
uniforms from the top 53 bits of each 64-bit draw, normals by Box-Muller.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from errors import SpecError
from labelgen import TumorRegions, brute_force_zone_oracle, vocabulary_for
from predictors import OraclePredictor
from voxelgrid import MODALITY_NAMES, MultiModalVolume, Role, VoxelGrid, label_grid, mask_grid
from volume_io import MODALITY_SUFFIXES, SEG_SUFFIX, write_volume

log = logging.getLogger('phantom')

NECROTIC_FRACTION = 0.6
MIN_BRAIN_INTENSITY = 1e-3

# (brain, edema, necrotic, enhancing) per modality
DEFAULT_INTENSITIES = {
    't1': (0.8, 0.6, 0.3, 0.7),
    't1ce': (0.8, 0.6, 0.3, 1.5),
    't2': (0.6, 1.2, 1.4, 0.9),
    'flair': (0.7, 1.4, 0.5, 1.0),
}


@dataclass
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    center_mm: tuple = (32.0, 32.0, 32.0)
    core_radii_mm: tuple = (6.0, 6.0, 6.0)
    edema_radii_mm: tuple = (10.0, 10.0, 10.0)
    brain_radii_mm: tuple = (30.0, 30.0, 30.0)
    intensities: dict = field(default_factory=lambda: dict(DEFAULT_INTENSITIES))
    noise_sigma: float = 0.0
    seed: int = 0
    dataset: str = 'brats2020'

    def __post_init__(self):
        for key in ('dims', 'spacing', 'center_mm', 'core_radii_mm', 'edema_radii_mm', 'brain_radii_mm'):
            value = tuple(getattr(self, key))
            if len(value) != 3:
                raise SpecError(f'{key} needs three values, got {value}')
            setattr(self, key, value)
        self.dims = tuple(int(n) for n in self.dims)
        self.intensities = {k: tuple(float(x) for x in v) for k, v in self.intensities.items()}
        self.validate()

    def validate(self):
        if min(self.dims) < 1:
            raise SpecError(f'dims must be positive, got {self.dims}')
        for key in ('spacing', 'core_radii_mm', 'edema_radii_mm', 'brain_radii_mm'):
            if min(getattr(self, key)) <= 0:
                raise SpecError(f'{key} must be positive, got {getattr(self, key)}')
        if self.noise_sigma < 0:
            raise SpecError(f'noise_sigma must be >= 0, got {self.noise_sigma}')
        if any(c > e for c, e in zip(self.core_radii_mm, self.edema_radii_mm)):
            raise SpecError(f'core {self.core_radii_mm} is not inside edema {self.edema_radii_mm}')
        if set(self.intensities) != set(MODALITY_NAMES) or any(len(v) != 4 for v in self.intensities.values()):
            raise SpecError(f'intensities need (brain, edema, necrotic, enhancing) for {", ".join(MODALITY_NAMES)}')
        extent = [(n - 1) * s for n, s in zip(self.dims, self.spacing)]
        brain_center = [e / 2.0 for e in extent]
        for c, r, e in zip(brain_center, self.brain_radii_mm, extent):
            if c - r < 0 or c + r > e:
                raise SpecError(f'brain ellipsoid {self.brain_radii_mm} does not fit the volume {self.dims}')
        # edema inside brain: test the edema extreme points along every axis
        for axis in range(3):
            for sign in (-1.0, 1.0):
                point = list(self.center_mm)
                point[axis] += sign * self.edema_radii_mm[axis]
                r = sum(((p - c) / a) ** 2 for p, c, a in zip(point, brain_center, self.brain_radii_mm))
                if r > 1.0:
                    raise SpecError(f'edema ellipsoid reaches outside the brain at {tuple(point)}')
        vocabulary_for(self.dataset)

    @property
    def brain_center_mm(self):
        return tuple((n - 1) * s / 2.0 for n, s in zip(self.dims, self.spacing))

    def to_dict(self):
        d = asdict(self)
        d['intensities'] = {k: list(v) for k, v in self.intensities.items()}
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f'unknown phantom spec keys: {", ".join(sorted(unknown))}')
        return cls(**d)


@dataclass(eq=False)
class Phantom:
    volume: MultiModalVolume
    seg: VoxelGrid
    zones: VoxelGrid
    spec: PhantomSpec


def load_spec(path):
    with open(path) as f:
        try:
            return PhantomSpec.from_dict(json.load(f))
        except (json.JSONDecodeError, TypeError) as e:
            raise SpecError(f'{path}: {e}') from e


def portable_normal(seed, count):
    """Standard normals from PCG64 + Box-Muller, identical on every platform"""
    pairs = (count + 1) // 2
    raw = np.random.PCG64(seed).random_raw(2 * pairs)
    u = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
    u1, u2 = 1.0 - u[0::2], u[1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    normals = np.empty(2 * pairs)
    normals[0::2] = radius * np.cos(2.0 * np.pi * u2)
    normals[1::2] = radius * np.sin(2.0 * np.pi * u2)
    return normals[:count]


def _normalized_radius(dims, spacing, center, radii):
    grids = np.meshgrid(*[np.arange(n) * s for n, s in zip(dims, spacing)], indexing='ij')
    total = np.zeros(dims)
    for g, c, r in zip(grids, center, radii):
        total += ((g - c) / r) ** 2
    return np.sqrt(total)


def analytic_zones(core, edema, brain, spacing):
    """Risk zones of the phantom geometry by direct nearest-surface-voxel scan"""
    regions = TumorRegions(
        core=mask_grid(core, spacing),
        edema=mask_grid(edema, spacing),
        whole=mask_grid(core | edema, spacing),
    )
    # the phantom's own dims bound the scan, not the oracle's default cap
    return brute_force_zone_oracle(regions, mask_grid(brain, spacing), spacing, max_voxels=core.size)


def generate_phantom(spec):
    """
    Build a phantom

    Returns:
        Phantom with the four modalities, the BraTS-style segmentation and
        the analytic zone grid
    """
    spec.validate()
    dims, spacing = spec.dims, spec.spacing
    vocab = vocabulary_for(spec.dataset)
    r_brain = _normalized_radius(dims, spacing, spec.brain_center_mm, spec.brain_radii_mm)
    r_core = _normalized_radius(dims, spacing, spec.center_mm, spec.core_radii_mm)
    r_edema = _normalized_radius(dims, spacing, spec.center_mm, spec.edema_radii_mm)

    brain = r_brain <= 1.0
    core = r_core <= 1.0
    necrotic = r_core <= NECROTIC_FRACTION
    enhancing = core & ~necrotic
    edema = (r_edema <= 1.0) & ~core
    whole = core | edema
    if not whole.any():
        raise SpecError('the tumor covers no voxel at this resolution')
    if (whole & ~brain).any():
        raise SpecError('tumor voxels fall outside the brain mask')

    seg = np.zeros(dims, dtype=np.int16)
    seg[edema] = vocab.edema
    seg[enhancing] = vocab.enhancing
    seg[necrotic] = vocab.necrotic

    count = int(np.prod(dims))
    modalities = []
    for index, name in enumerate(MODALITY_NAMES):
        brain_v, edema_v, necrotic_v, enhancing_v = spec.intensities[name]
        image = np.zeros(dims)
        image[brain] = brain_v
        image[edema] = edema_v
        image[enhancing] = enhancing_v
        image[necrotic] = necrotic_v
        if spec.noise_sigma > 0:
            noise = portable_normal([int(spec.seed), index], count).reshape(dims)
            image[brain] += spec.noise_sigma * noise[brain]
        image[brain] = np.maximum(image[brain], MIN_BRAIN_INTENSITY)
        modalities.append(VoxelGrid(image, spacing, Role.INTENSITY))

    zones = analytic_zones(core, edema, brain, spacing)
    log.info('Phantom %s: %d tumor voxels, zone counts %s', dims, int(whole.sum()),
             np.bincount(np.asarray(zones.data).ravel(), minlength=4).tolist())
    return Phantom(
        volume=MultiModalVolume(tuple(modalities)),
        seg=label_grid(seg, spacing, vocab.values),
        zones=zones,
        spec=spec,
    )


def oracle_predictor(truth):
    """Flip-equivariant predictor that reproduces the given zone grid"""
    return OraclePredictor(truth)


def save_phantom(phantom, out_dir, suffix='.nii.gz', stem='phantom'):
    """Write the modalities, segmentation, zones and the spec echo; returns the paths"""
    os.makedirs(out_dir, exist_ok=True)
    names = MODALITY_SUFFIXES[phantom.spec.dataset]
    paths = {}
    for name, grid in zip(names, phantom.volume.modalities):
        paths[name] = os.path.join(out_dir, f'{stem}_{name}{suffix}')
        write_volume(grid, paths[name])
    paths[SEG_SUFFIX] = os.path.join(out_dir, f'{stem}_{SEG_SUFFIX}{suffix}')
    write_volume(phantom.seg, paths[SEG_SUFFIX])
    paths['zones'] = os.path.join(out_dir, f'{stem}_zones{suffix}')
    write_volume(phantom.zones, paths['zones'])
    paths['spec'] = os.path.join(out_dir, 'spec.json')
    with open(paths['spec'], 'w') as f:
        json.dump(phantom.spec.to_dict(), f, indent=2, sort_keys=True)
        f.write('\n')
    return paths


def phantom_batch(base, count):
    """`count` phantoms from one spec: seeds base.seed + i, tumor nudged by up to 1 mm along width"""
    phantoms = []
    for i in range(count):
        center = list(base.center_mm)
        center[2] += float(i % 3 - 1) * base.spacing[2]
        spec = replace(base, seed=base.seed + i, center_mm=tuple(center))
        phantoms.append(generate_phantom(spec))
    return phantoms
