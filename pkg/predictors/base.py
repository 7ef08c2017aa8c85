"""
Base class for predictors
"""

from dataclasses import dataclass

import numpy as np

from errors import ContractError

NUM_CLASSES = 4
SUM_TOLERANCE = 1e-5


@dataclass(frozen=True)
class WindowRequest:
    """Where a window sits in the frame the pipeline is predicting.

    origin/size index into a frame of `volume_dims` (the possibly padded,
    possibly flipped volume); `flips` lists the axes the frame was flipped
    along relative to the original volume.
    """
    origin: tuple
    size: tuple
    volume_dims: tuple
    flips: tuple = ()

    @classmethod
    def full(cls, dims, flips=()):
        dims = tuple(int(n) for n in dims)
        return cls((0, 0, 0), dims, dims, tuple(flips))


class Predictor:
    """Base class that all predictors inherit from"""

    def __init__(self, name='Base Predictor'):
        self.name = name

    def predict(self, window, request):
        """
        Class probabilities for one window.
        Must be implemented by subclasses.

        Args:
            window: normalized modalities, array (4, d, h, w)
            request: WindowRequest locating the window

        Returns:
            array (4, d, h, w), probabilities summing to 1 per voxel
        """
        raise NotImplementedError('Subclasses must implement predict method')

    def __call__(self, window, request=None):
        window = np.asarray(window, dtype=np.float64)
        if request is None:
            request = WindowRequest.full(window.shape[1:])
        probs = np.asarray(self.predict(window, request), dtype=np.float64)
        self.check_output(window, probs)
        return probs

    def check_output(self, window, probs):
        """Raise ContractError unless probs is a 4-class map over the window"""
        want = (NUM_CLASSES,) + tuple(window.shape[1:])
        if probs.shape != want:
            raise ContractError(f'{self.name}: returned shape {probs.shape}, expected {want}')
        if probs.size and np.max(np.abs(probs.sum(axis=0) - 1.0)) > SUM_TOLERANCE:
            raise ContractError(f'{self.name}: probabilities do not sum to 1 per voxel')
