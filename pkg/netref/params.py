"""
Named parameter tensors with reproducible initialization and a
language-neutral on-disk layout (JSON manifest + little-endian raw payloads)
"""

import json
import logging
import os
import zlib

import numpy as np

from errors import ContractError, FormatError, SizeError

log = logging.getLogger('netref.params')

MANIFEST_VERSION = 1


def _fan_in(name, shape):
    if len(shape) == 1:
        return None
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive


class ParamStore:
    """Mapping of parameter name -> float64 array.

    Each tensor is drawn from its own generator seeded with (seed, crc32(name)),
    so a tensor's values depend only on the seed and its name, never on which
    other tensors were built alongside it.
    """

    def __init__(self, tensors=None, seed=0):
        self.seed = int(seed)
        self.tensors = dict(tensors or {})

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    @classmethod
    def initialize(cls, shapes, seed):
        """
        Draw every tensor uniformly in +-1/sqrt(fan_in)

        Args:
            shapes: ordered mapping name -> shape; a bias takes the fan-in of the
                    weight with the same layer prefix
            seed: integer seed
        """
        store = cls(seed=seed)
        fan_ins = {}
        for name, shape in shapes.items():
            fan = _fan_in(name, shape)
            if fan is not None:
                fan_ins[name.rsplit('.', 1)[0]] = fan
        for name, shape in shapes.items():
            layer = name.rsplit('.', 1)[0]
            fan = fan_ins.get(layer) or _fan_in(name, shape) or 1
            bound = 1.0 / np.sqrt(fan)
            rng = np.random.default_rng([int(seed), zlib.crc32(name.encode('utf-8'))])
            store.tensors[name] = rng.uniform(-bound, bound, size=tuple(shape))
        return store

    def check_shapes(self, shapes):
        """Every required tensor is present with its contract shape"""
        for name, shape in shapes.items():
            if name not in self.tensors:
                raise ContractError(f'parameter {name} is missing')
            if tuple(self.tensors[name].shape) != tuple(shape):
                raise ContractError(f'parameter {name} has shape {self.tensors[name].shape}, expected {tuple(shape)}')

    def save(self, path):
        """
        Write <path> (JSON manifest) and one '<stem>.<index>.raw' payload per tensor
        """
        stem = os.path.splitext(str(path))[0]
        entries = []
        for index, (name, tensor) in enumerate(self.tensors.items()):
            payload = f'{os.path.basename(stem)}.{index:04d}.raw'
            with open(os.path.join(os.path.dirname(str(path)) or '.', payload), 'wb') as f:
                f.write(np.ascontiguousarray(tensor, dtype='<f8').tobytes())
            entries.append({'name': name, 'shape': list(tensor.shape), 'file': payload})
        manifest = {'version': MANIFEST_VERSION, 'seed': self.seed, 'dtype': '<f8', 'tensors': entries}
        with open(path, 'w') as f:
            json.dump(manifest, f, indent=2)
            f.write('\n')
        log.info('Saved %d parameter tensors to %s', len(entries), path)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            try:
                manifest = json.load(f)
            except json.JSONDecodeError as e:
                raise FormatError('manifest', f'{path}: {e}') from e
        for key in ('seed', 'tensors'):
            if key not in manifest:
                raise FormatError(key, f'{path} is missing manifest field {key!r}')
        dtype = np.dtype(manifest.get('dtype', '<f8'))
        base = os.path.dirname(str(path)) or '.'
        store = cls(seed=manifest['seed'])
        for entry in manifest['tensors']:
            for key in ('name', 'shape', 'file'):
                if key not in entry:
                    raise FormatError(key, f'{path}: tensor entry without {key!r}')
            with open(os.path.join(base, entry['file']), 'rb') as f:
                raw = f.read()
            count = int(np.prod(entry['shape'])) if entry['shape'] else 1
            if len(raw) != count * dtype.itemsize:
                raise SizeError(f"{entry['file']}: expected {count * dtype.itemsize} bytes for {entry['name']}, found {len(raw)}")
            store.tensors[entry['name']] = np.frombuffer(raw, dtype=dtype).astype(np.float64).reshape(entry['shape'])
        log.info('Loaded %d parameter tensors from %s', len(store), path)
        return store
