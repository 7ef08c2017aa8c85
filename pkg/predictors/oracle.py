"""
Oracle predictor: smoothed one-hot of a known zone grid

Emits (1 - 4 eps) * onehot + eps for the part of the truth under the
requested window. The truth is flipped the same way as the frame, so the
predictor is flip-equivariant by construction.
"""

import numpy as np

from errors import BoundsError
from voxelgrid import VoxelGrid
from .base import NUM_CLASSES, Predictor

EPSILON = 1e-6


class OraclePredictor(Predictor):
    def __init__(self, truth, epsilon=EPSILON):
        super().__init__('oracle')
        data = truth.data if isinstance(truth, VoxelGrid) else np.asarray(truth)
        self.truth = np.asarray(data, dtype=np.intp)
        self.epsilon = float(epsilon)

    def _frame(self, request):
        frame_dims = tuple(int(n) for n in request.volume_dims)
        if any(f < t for f, t in zip(frame_dims, self.truth.shape)):
            raise BoundsError(f'frame {frame_dims} is smaller than the truth grid {self.truth.shape}')
        truth = np.flip(self.truth, axis=tuple(request.flips)) if request.flips else self.truth
        # frames are zero-padded at the high end after flipping
        pad = [(0, f - t) for f, t in zip(frame_dims, truth.shape)]
        return np.pad(truth, pad) if any(p for _, p in pad) else truth

    def predict(self, window, request):
        origin = tuple(int(o) for o in request.origin)
        size = tuple(int(s) for s in window.shape[1:])
        frame = self._frame(request)
        if any(o < 0 or o + s > n for o, s, n in zip(origin, size, frame.shape)):
            raise BoundsError(f'window at {origin} of size {size} leaves the frame {frame.shape}')
        labels = frame[tuple(slice(o, o + s) for o, s in zip(origin, size))]
        onehot = (np.arange(NUM_CLASSES).reshape(NUM_CLASSES, 1, 1, 1) == labels[None]).astype(np.float64)
        return (1.0 - NUM_CLASSES * self.epsilon) * onehot + self.epsilon
