"""
Volume types shared by every infilmap module

Axis convention: arrays are indexed (depth, height, width) and stored
row-major, so x (width) is the fastest-varying axis in memory. Spacing
follows the same order: (sz, sy, sx) in mm.
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from errors import ContractError, SizeError, VocabularyError

AXES = {'depth': 0, 'height': 1, 'width': 2}

# Planes for rot90, named by the two axes they contain
PLANES = {
    'axial': (1, 2),      # height/width
    'coronal': (0, 2),    # depth/width
    'sagittal': (0, 1),   # depth/height
}


class Zone(enum.IntEnum):
    """Infiltration risk labels"""
    OUTSIDE = 0
    LOW = 1
    MEDIUM = 2
    HIGH = 3


ZONE_VALUES = frozenset(int(z) for z in Zone)
RISK_ZONES = (Zone.LOW, Zone.MEDIUM, Zone.HIGH)


class Role(enum.Enum):
    """What the scalars of a grid mean"""
    INTENSITY = 'intensity'
    LABEL = 'label'
    DISTANCE = 'distance'
    PROBABILITY = 'probability'


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """A 3D scalar or label grid with physical spacing.

    The array is made read-only on construction; operations return new grids.
    """
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    role: Role = Role.INTENSITY
    vocabulary: frozenset = None

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        if data.ndim != 3:
            raise SizeError(f'voxel grids are 3D, got array of shape {data.shape}')
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not s > 0 for s in spacing):
            raise SizeError(f'spacing must be three positive values, got {self.spacing}')
        if self.role is Role.LABEL:
            if not np.issubdtype(data.dtype, np.integer) and data.dtype != np.bool_:
                data = data.astype(np.int16)
            if self.vocabulary is not None and data.size:
                values, counts = np.unique(data, return_counts=True)
                bad = {int(v): int(c) for v, c in zip(values, counts) if int(v) not in self.vocabulary}
                if bad:
                    raise VocabularyError(bad)
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)
        object.__setattr__(self, 'spacing', spacing)
        if self.vocabulary is not None:
            object.__setattr__(self, 'vocabulary', frozenset(int(v) for v in self.vocabulary))

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)

    @property
    def size(self):
        return int(self.data.size)

    @property
    def voxel_volume_mm3(self):
        return float(np.prod(self.spacing))

    def with_data(self, data, role=None, vocabulary=None):
        """New grid with the same spacing and replaced contents"""
        role = self.role if role is None else role
        if vocabulary is None and role is self.role:
            vocabulary = self.vocabulary
        return VoxelGrid(data, self.spacing, role, vocabulary)

    def same_geometry(self, other):
        return self.dims == other.dims and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-9)


def label_grid(data, spacing=(1.0, 1.0, 1.0), vocabulary=None):
    return VoxelGrid(np.asarray(data), spacing, Role.LABEL, vocabulary)


def zone_grid(data, spacing=(1.0, 1.0, 1.0)):
    return VoxelGrid(np.asarray(data).astype(np.uint8), spacing, Role.LABEL, ZONE_VALUES)


def mask_grid(data, spacing=(1.0, 1.0, 1.0)):
    return VoxelGrid(np.asarray(data, dtype=bool), spacing, Role.LABEL, frozenset({0, 1}))


def require_same_geometry(*grids, what='grids'):
    first = grids[0]
    for other in grids[1:]:
        if first.dims != other.dims:
            raise SizeError(f'{what} differ in dims: {first.dims} vs {other.dims}')
        if not first.same_geometry(other):
            raise SizeError(f'{what} differ in spacing: {first.spacing} vs {other.spacing}')


MODALITY_NAMES = ('t1', 't1ce', 't2', 'flair')
FLAIR_INDEX = 3


@dataclass(frozen=True, eq=False)
class MultiModalVolume:
    """Four co-registered MRI modalities in canonical order (T1, T1ce, T2, FLAIR)"""
    modalities: tuple
    names: tuple = field(default=MODALITY_NAMES)

    def __post_init__(self):
        modalities = tuple(self.modalities)
        if len(modalities) != 4:
            raise ContractError(f'expected 4 modalities, got {len(modalities)}')
        require_same_geometry(*modalities, what='modalities')
        object.__setattr__(self, 'modalities', modalities)

    @property
    def flair(self):
        return self.modalities[FLAIR_INDEX]

    @property
    def dims(self):
        return self.modalities[0].dims

    @property
    def spacing(self):
        return self.modalities[0].spacing

    def stack(self, dtype=np.float64):
        """Channel-first array of shape (4, D, H, W)"""
        return np.stack([np.asarray(g.data, dtype=dtype) for g in self.modalities])

    @classmethod
    def from_array(cls, array, spacing=(1.0, 1.0, 1.0)):
        return cls(tuple(VoxelGrid(channel, spacing, Role.INTENSITY) for channel in np.asarray(array)))

    def map(self, fn):
        """Apply a grid -> grid function to every modality"""
        return MultiModalVolume(tuple(fn(g) for g in self.modalities), self.names)


def _axis_indices(axes):
    indices = []
    for axis in axes:
        if isinstance(axis, str):
            if axis not in AXES:
                raise ValueError(f'unknown axis {axis!r}')
            axis = AXES[axis]
        indices.append(int(axis))
    return tuple(sorted(set(indices)))


def flip_axes(grid, axes):
    """Mirror a grid along a subset of {depth, height, width}"""
    axes = _axis_indices(axes)
    if not axes:
        return grid
    return grid.with_data(np.flip(grid.data, axis=axes))


def rot90(grid, plane, quarter_turns):
    """Rotate a grid by quarter turns inside one orthogonal plane.

    Odd turns swap the two in-plane dims and their spacing components.
    """
    axes = PLANES[plane] if isinstance(plane, str) else tuple(plane)
    k = int(quarter_turns) % 4
    if k == 0:
        return grid
    data = np.rot90(grid.data, k=k, axes=axes)
    spacing = list(grid.spacing)
    if k % 2:
        spacing[axes[0]], spacing[axes[1]] = spacing[axes[1]], spacing[axes[0]]
    return VoxelGrid(data, tuple(spacing), grid.role, grid.vocabulary)
