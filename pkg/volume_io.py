"""
Reading and writing volumes

Two on-disk formats are supported:
- NIfTI-1 single file (.nii, .nii.gz), reduced to dims + spacing
- the internal raw format: a JSON header {dims, spacing, dtype, role} next to
  a little-endian .raw payload with the same stem
"""

import gzip
import json
import logging
import os

import nibabel as nib
import numpy as np

from errors import FormatError, SizeError
from voxelgrid import MODALITY_NAMES, MultiModalVolume, Role, VoxelGrid, require_same_geometry

log = logging.getLogger('volume_io')

NIFTI_SUFFIXES = ('.nii.gz', '.nii')
RAW_SUFFIX = '.json'

# Modality filename suffixes in canonical order (T1, T1ce, T2, FLAIR)
MODALITY_SUFFIXES = {
    'brats2020': ('t1', 't1ce', 't2', 'flair'),
    'brats2025': ('t1n', 't1c', 't2w', 't2f'),
}
SEG_SUFFIX = 'seg'

_NIFTI_WRITE_DTYPES = (np.uint8, np.int16, np.float32)


def _volume_format(path):
    name = str(path).lower()
    if name.endswith(NIFTI_SUFFIXES):
        return 'nifti'
    if name.endswith(RAW_SUFFIX):
        return 'raw'
    raise FormatError('suffix', f'{path} is neither .nii, .nii.gz nor .json')


def _raw_payload_path(path):
    return str(path)[:-len(RAW_SUFFIX)] + '.raw'


def _convert_role(data, role):
    if role is Role.LABEL:
        if np.issubdtype(data.dtype, np.floating):
            if not np.all(np.isfinite(data)) or np.any(data != np.round(data)):
                raise FormatError('datatype', 'label volume holds non-integer values')
            data = data.astype(np.int16)
        return data
    return data.astype(np.float64)


def read_volume(path, role=None):
    """
    Read a volume from disk

    Args:
        path: .nii / .nii.gz / .json path
        role: Role to convert the scalars to; when None the role stored in the
              file is used (intensity if the file does not say)

    Returns:
        VoxelGrid with dims (depth, height, width) and spacing (sz, sy, sx)
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f'no such volume: {path}')
    if _volume_format(path) == 'nifti':
        data, spacing, stored_role = _read_nifti(path)
    else:
        data, spacing, stored_role = _read_raw(path)
    role = role or stored_role or Role.INTENSITY
    return VoxelGrid(_convert_role(data, role), spacing, role)


def _read_nifti(path):
    try:
        img = nib.load(str(path))
    except Exception as e:
        raise FormatError('header', f'{path}: {e}') from e
    if not isinstance(img, (nib.Nifti1Image, nib.Nifti1Pair)):
        raise FormatError('sizeof_hdr', f'{path} is not a NIfTI-1 file')
    header = img.header
    shape = tuple(int(n) for n in img.shape)
    if len(shape) == 4 and shape[3] == 1:
        shape = shape[:3]
    if len(shape) != 3:
        raise FormatError('dim', f'{path} has {len(img.shape)} dimensions, expected 3')
    if any(n < 1 for n in shape):
        raise FormatError('dim', f'{path} has an empty dimension {shape}')
    dtype = header.get_data_dtype()
    if not (np.issubdtype(dtype, np.integer) or np.issubdtype(dtype, np.floating)):
        raise FormatError('datatype', f'{path} stores unsupported type {dtype}')
    zooms = header.get_zooms()[:3]
    if any(not z > 0 for z in zooms):
        raise FormatError('pixdim', f'{path} has non-positive voxel size {zooms}')

    if not str(path).lower().endswith('.gz'):
        expected = int(header['vox_offset']) + int(np.prod(shape)) * dtype.itemsize
        actual = os.path.getsize(path)
        if actual < expected:
            raise SizeError(f'{path}: header promises {expected} bytes, file has {actual}')
    try:
        array = np.asanyarray(img.dataobj)
    except (EOFError, ValueError, OSError) as e:
        raise SizeError(f'{path}: payload does not match header dims {shape}: {e}') from e
    array = np.asarray(array).reshape(shape)

    # NIfTI index order is (x, y, z); ours is (z, y, x)
    data = np.ascontiguousarray(array.transpose(2, 1, 0))
    # zooms are stored as float32; recover the decimal that was written
    spacing = tuple(float(str(np.float32(z))) for z in reversed(zooms))
    intent = header['intent_name'].item()
    if isinstance(intent, bytes):
        intent = intent.decode('ascii', errors='ignore')
    stored_role = _role_from_name(intent)
    return data, spacing, stored_role


def _read_raw(path):
    try:
        with open(path) as f:
            header = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError('header', f'{path}: {e}') from e
    for key in ('dims', 'spacing', 'dtype'):
        if key not in header:
            raise FormatError(key, f'{path} is missing header field {key!r}')
    dims = header['dims']
    if not isinstance(dims, list) or len(dims) != 3 or any(not isinstance(n, int) or n < 1 for n in dims):
        raise FormatError('dims', f'{path} has invalid dims {dims!r}')
    spacing = header['spacing']
    if not isinstance(spacing, list) or len(spacing) != 3 or any(not isinstance(s, (int, float)) or s <= 0 for s in spacing):
        raise FormatError('spacing', f'{path} has invalid spacing {spacing!r}')
    try:
        dtype = np.dtype(header['dtype']).newbyteorder('<')
    except TypeError as e:
        raise FormatError('dtype', f'{path} has invalid dtype {header["dtype"]!r}') from e
    role = header.get('role')
    if role is not None and _role_from_name(role) is None:
        raise FormatError('role', f'{path} has unknown role {role!r}')

    payload = _raw_payload_path(path)
    with open(payload, 'rb') as f:
        raw = f.read()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise SizeError(f'{payload}: expected {expected} bytes for dims {dims}, found {len(raw)}')
    data = np.frombuffer(raw, dtype=dtype).reshape(dims)
    return data.astype(dtype.newbyteorder('=')), tuple(float(s) for s in spacing), _role_from_name(role)


def _role_from_name(name):
    for role in Role:
        if role.value == name:
            return role
    return None


def _nifti_dtype(grid):
    data = grid.data
    if grid.role is Role.LABEL:
        if data.size == 0 or (data.min() >= 0 and data.max() <= 255):
            return np.uint8
        return np.int16
    return np.float32


def write_volume(grid, path):
    """
    Write a grid to disk

    Args:
        grid: VoxelGrid to store
        path: destination; the suffix selects NIfTI or the raw format
    """
    if any(n == 0 for n in grid.dims):
        raise SizeError(f'refusing to write a grid with an empty dimension {grid.dims}')
    fmt = _volume_format(path)
    try:
        if fmt == 'nifti':
            _write_nifti(grid, path)
        else:
            _write_raw(grid, path)
    except OSError as e:
        raise OSError(f'could not write {path}: {e}') from e
    log.debug('Wrote %s %s to %s', grid.role.value, grid.dims, path)


def _write_nifti(grid, path):
    dtype = _nifti_dtype(grid)
    if dtype not in _NIFTI_WRITE_DTYPES:
        raise FormatError('datatype', f'cannot store {dtype} in NIfTI')
    array = np.ascontiguousarray(np.asarray(grid.data).astype(dtype).transpose(2, 1, 0))
    sz, sy, sx = grid.spacing
    affine = np.diag([sx, sy, sz, 1.0])
    img = nib.Nifti1Image(array, affine)
    img.header.set_data_dtype(dtype)
    img.header.set_zooms((sx, sy, sz))
    img.header['intent_name'] = grid.role.value.encode('ascii')
    img.header.set_slope_inter(1.0, 0.0)
    payload = img.to_bytes()
    if str(path).lower().endswith('.gz'):
        # fixed mtime and no embedded filename keep the bytes reproducible
        with open(path, 'wb') as f, gzip.GzipFile(filename='', mode='wb', fileobj=f, mtime=0) as gz:
            gz.write(payload)
    else:
        with open(path, 'wb') as f:
            f.write(payload)


def _write_raw(grid, path):
    data = np.asarray(grid.data)
    if data.dtype == np.bool_:
        data = data.astype(np.uint8)
    dtype = data.dtype.newbyteorder('<')
    header = {
        'dims': list(grid.dims),
        'spacing': list(grid.spacing),
        'dtype': dtype.str,
        'role': grid.role.value,
    }
    with open(path, 'w') as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write('\n')
    with open(_raw_payload_path(path), 'wb') as f:
        f.write(data.astype(dtype).tobytes(order='C'))


def find_volume(directory, suffix):
    """Locate '<anything>[_-]<suffix>.<ext>' inside a patient directory"""
    matches = []
    for entry in sorted(os.listdir(directory)):
        lower = entry.lower()
        for ext in NIFTI_SUFFIXES + (RAW_SUFFIX,):
            if lower.endswith(ext):
                stem = lower[:-len(ext)]
                if stem.endswith('_' + suffix) or stem.endswith('-' + suffix) or stem == suffix:
                    matches.append(os.path.join(directory, entry))
                break
    if len(matches) > 1:
        raise FormatError('filename', f'{directory} holds several {suffix!r} volumes: {matches}')
    return matches[0] if matches else None


def find_modality_files(directory):
    """
    Find the four modality files of one patient directory

    Returns:
        (dataset tag, [t1, t1ce, t2, flair] paths)
    """
    for dataset, suffixes in MODALITY_SUFFIXES.items():
        paths = [find_volume(directory, s) for s in suffixes]
        if all(paths):
            return dataset, paths
    raise FormatError('filename', f'{directory} does not contain all four modalities '
                      f'({", ".join(MODALITY_NAMES)}) under either naming scheme')


def read_multimodal(paths):
    """
    Read a MultiModalVolume

    Args:
        paths: a patient directory, or four paths in canonical order
    """
    if isinstance(paths, (str, os.PathLike)):
        _, paths = find_modality_files(paths)
    elif len(paths) == 1 and os.path.isdir(paths[0]):
        _, paths = find_modality_files(paths[0])
    if len(paths) != 4:
        raise SizeError(f'expected 4 modality paths, got {len(paths)}')
    grids = [read_volume(p, Role.INTENSITY) for p in paths]
    require_same_geometry(*grids, what='modalities')
    return MultiModalVolume(tuple(grids))
