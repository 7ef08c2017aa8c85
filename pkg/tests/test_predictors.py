import numpy as np
import pytest

from errors import BoundsError, ContractError, SizeError
from netref import build_params
from predictors import ConstantPredictor, NetrefPredictor, OraclePredictor, Predictor, WindowRequest


class HalfPredictor(Predictor):
    """Breaks the contract: probabilities sum to 0.5"""

    def __init__(self):
        super().__init__('half')

    def predict(self, window, request):
        return np.full((4,) + window.shape[1:], 0.125)


class ThreeClassPredictor(Predictor):
    def predict(self, window, request):
        return np.full((3,) + window.shape[1:], 1 / 3)


def test_base_predictor_must_be_subclassed():
    with pytest.raises(NotImplementedError):
        Predictor()(np.zeros((4, 2, 2, 2)))


def test_output_contract_is_checked():
    with pytest.raises(ContractError, match='half'):
        HalfPredictor()(np.zeros((4, 2, 2, 2)))
    with pytest.raises(ContractError):
        ThreeClassPredictor()(np.zeros((4, 2, 2, 2)))


def test_constant_predictor():
    probs = ConstantPredictor((0.1, 0.2, 0.3, 0.4))(np.zeros((4, 2, 3, 4)))
    assert probs.shape == (4, 2, 3, 4)
    np.testing.assert_allclose(probs[:, 1, 2, 3], [0.1, 0.2, 0.3, 0.4])
    with pytest.raises(ContractError):
        ConstantPredictor((0.5, 0.5, 0.5, 0.5))


def test_oracle_reproduces_truth_with_smoothing(rng):
    truth = rng.integers(0, 4, size=(5, 6, 7))
    probs = OraclePredictor(truth)(np.zeros((4, 5, 6, 7)))
    np.testing.assert_array_equal(probs.argmax(axis=0), truth)
    assert probs.min() == pytest.approx(1e-6)
    np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-12)


def test_oracle_windows_and_flips(rng):
    truth = rng.integers(0, 4, size=(6, 6, 6))
    oracle = OraclePredictor(truth)
    request = WindowRequest((2, 0, 3), (3, 4, 3), (6, 6, 6))
    probs = oracle(np.zeros((4, 3, 4, 3)), request)
    np.testing.assert_array_equal(probs.argmax(axis=0), truth[2:5, 0:4, 3:6])

    flipped = oracle(np.zeros((4, 6, 6, 6)), WindowRequest.full((6, 6, 6), flips=(0, 2)))
    np.testing.assert_array_equal(flipped.argmax(axis=0), truth[::-1, :, ::-1])


def test_oracle_pads_frames_at_the_high_end(rng):
    truth = rng.integers(1, 4, size=(3, 3, 3))
    probs = OraclePredictor(truth)(np.zeros((4, 4, 4, 4)), WindowRequest.full((4, 4, 4)))
    labels = probs.argmax(axis=0)
    np.testing.assert_array_equal(labels[:3, :3, :3], truth)
    assert np.all(labels[3] == 0)


def test_oracle_bounds(rng):
    oracle = OraclePredictor(rng.integers(0, 4, size=(4, 4, 4)))
    with pytest.raises(BoundsError):
        oracle(np.zeros((4, 2, 2, 2)), WindowRequest((3, 0, 0), (2, 2, 2), (4, 4, 4)))
    with pytest.raises(BoundsError):
        oracle(np.zeros((4, 2, 2, 2)), WindowRequest((0, 0, 0), (2, 2, 2), (2, 2, 2)))


def test_netref_predictor(rng, tiny_model):
    predictor = NetrefPredictor(build_params(tiny_model, 0), tiny_model)
    probs = predictor(rng.standard_normal((4, 16, 16, 16)))
    assert probs.shape == (4, 16, 16, 16)
    assert predictor.name == 'netref (full)'


def test_netref_window_must_be_divisible_by_16(tiny_model):
    predictor = NetrefPredictor(build_params(tiny_model, 0), tiny_model)
    assert predictor.check_window([16, 32, 48]) == (16, 32, 48)
    with pytest.raises(SizeError, match='divisible by 16'):
        predictor.check_window((24, 16, 16))
