"""
Predictor backed by the reference network
"""

import logging

from netref.encoders import require_divisible
from netref.model import infiltrnet_forward
from .base import Predictor

log = logging.getLogger('predictors.network')

# total downsampling of the encoder pyramid
WINDOW_DIVISOR = 16


class NetrefPredictor(Predictor):
    """Runs infiltrnet_forward on each window (dims must be divisible by 16)"""

    def __init__(self, params, config, ablation='full', encoder=None):
        super().__init__(f'netref ({ablation})')
        self.params = params
        self.config = config
        self.ablation = ablation
        self.encoder = encoder

    def check_window(self, window):
        """Raise SizeError unless every sliding-window dim is divisible by 16"""
        window = tuple(int(n) for n in window)
        require_divisible((1, 1) + window, WINDOW_DIVISOR)
        return window

    def predict(self, window, request):
        log.debug('Window at %s size %s', request.origin, request.size)
        return infiltrnet_forward(window[None], self.params, self.config, self.ablation, self.encoder)[0]
