"""
Finite-difference verification of the analytic loss gradients
(`infilmap check-grads`)
"""

import logging

import numpy as np

from errors import SizeError
from losses import AUX_FACTORS, NUM_CLASSES, LossWeights, aux_loss, boundary_loss, dice_ce_loss, total_loss

log = logging.getLogger('gradcheck')

STEP = 1e-5
TOLERANCE = 1e-4
# below this magnitude the comparison is absolute; central differences carry ~1e-10 noise
GRADIENT_FLOOR = 1e-5


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRADIENT_FLOOR)


def make_fixture(rng, size):
    """Random logits, three aux heads and a label grid holding every class"""
    if size < 8 or size % 8:
        raise SizeError(f'gradient fixtures need a size divisible by 8, got {size}')
    shape = (size, size, size)
    labels = rng.integers(0, NUM_CLASSES, size=shape)
    labels.flat[:NUM_CLASSES] = np.arange(NUM_CLASSES)
    logits = rng.standard_normal((1, NUM_CLASSES) + shape)
    aux = [rng.standard_normal((1, NUM_CLASSES) + tuple(n // f for n in shape)) for f in AUX_FACTORS]
    return logits, aux, labels


def _central(fn, array, index, h):
    saved = array.flat[index]
    array.flat[index] = saved + h
    plus = fn()
    array.flat[index] = saved - h
    minus = fn()
    array.flat[index] = saved
    return (plus - minus) / (2.0 * h)


def check_gradients(seed=0, size=8, fixtures=5, coordinates=20, weights=None, h=STEP):
    """
    Compare analytic and central-difference gradients

    Returns:
        dict with per-component max relative error, the sample counts, the
        loss weights in force with the mean loss terms, and passed
    """
    weights = weights or LossWeights()
    rng = np.random.default_rng(seed)
    worst = {'dice_ce': 0.0, 'boundary': 0.0, 'aux': 0.0, 'total': 0.0}
    losses = {'dice_ce': 0.0, 'boundary': 0.0, 'aux': 0.0, 'total': 0.0}

    for _ in range(fixtures):
        logits, aux, labels = make_fixture(rng, size)

        _, grad = dice_ce_loss(logits, labels, weights)
        for index in rng.integers(0, logits.size, size=coordinates):
            numeric = _central(lambda: dice_ce_loss(logits, labels, weights)[0], logits, index, h)
            worst['dice_ce'] = max(worst['dice_ce'], relative_error(grad.flat[index], numeric))

        _, grad = boundary_loss(logits, labels, weights)
        for index in rng.integers(0, logits.size, size=coordinates):
            numeric = _central(lambda: boundary_loss(logits, labels, weights)[0], logits, index, h)
            worst['boundary'] = max(worst['boundary'], relative_error(grad.flat[index], numeric))

        _, grads = aux_loss(aux, labels, weights)
        for _ in range(coordinates):
            head = int(rng.integers(0, len(aux)))
            index = int(rng.integers(0, aux[head].size))
            numeric = _central(lambda: aux_loss(aux, labels, weights)[0], aux[head], index, h)
            worst['aux'] = max(worst['aux'], relative_error(grads[head].flat[index], numeric))

        breakdown = total_loss(logits, aux, labels, weights)
        for key, value in breakdown.to_dict().items():
            losses[key] += value / fixtures
        for index in rng.integers(0, logits.size, size=coordinates):
            numeric = _central(lambda: total_loss(logits, aux, labels, weights).total, logits, index, h)
            worst['total'] = max(worst['total'], relative_error(breakdown.grad_logits.flat[index], numeric))
        for _ in range(coordinates):
            head = int(rng.integers(0, len(aux)))
            index = int(rng.integers(0, aux[head].size))
            numeric = _central(lambda: total_loss(logits, aux, labels, weights).total, aux[head], index, h)
            worst['total'] = max(worst['total'], relative_error(breakdown.grad_aux[head].flat[index], numeric))

    report = {
        'seed': int(seed),
        'size': int(size),
        'fixtures': int(fixtures),
        'coordinates': int(coordinates),
        'step': h,
        'tolerance': TOLERANCE,
        'weights': {'lambda_boundary': weights.lambda_boundary, 'lambda_aux': weights.lambda_aux},
        'mean_loss': losses,
        'max_relative_error': worst,
        'passed': all(v < TOLERANCE for v in worst.values()),
    }
    log.info('Gradient check: %s', ', '.join(f'{k} {v:.3g}' for k, v in worst.items()))
    return report
