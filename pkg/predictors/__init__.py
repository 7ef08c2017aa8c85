# Predictor plug-ins
from .base import Predictor, WindowRequest
from .constant import ConstantPredictor
from .network import NetrefPredictor
from .oracle import OraclePredictor

__all__ = ['ConstantPredictor', 'NetrefPredictor', 'OraclePredictor', 'Predictor', 'WindowRequest']
