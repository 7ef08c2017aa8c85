"""
Constant predictor: the same class distribution everywhere, input ignored
"""

import numpy as np

from errors import ContractError
from .base import NUM_CLASSES, Predictor


class ConstantPredictor(Predictor):
    def __init__(self, distribution=(0.25, 0.25, 0.25, 0.25)):
        super().__init__('constant')
        distribution = np.asarray(distribution, dtype=np.float64)
        if distribution.shape != (NUM_CLASSES,) or abs(distribution.sum() - 1.0) > 1e-12 or distribution.min() < 0:
            raise ContractError(f'constant predictor needs {NUM_CLASSES} probabilities summing to 1')
        self.distribution = distribution

    def predict(self, window, request):
        shape = (NUM_CLASSES,) + tuple(window.shape[1:])
        return np.broadcast_to(self.distribution.reshape(NUM_CLASSES, 1, 1, 1), shape).copy()
