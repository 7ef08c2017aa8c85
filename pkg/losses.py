"""
Training objective with analytic gradients w.r.t. the logits

    L = L_DiceCE + lambda_b * L_boundary + lambda_a * L_aux

L_DiceCE is class-weighted cross-entropy plus class-weighted soft Dice,
L_boundary is cross-entropy restricted to 6-neighbourhood label transitions
and scaled by boundary_extra, L_aux is the mean DiceCE of the three
auxiliary heads against nearest-neighbour downsampled labels.

Logits are channel-first (1, 4, D, H, W); labels are zone grids (D, H, W).
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from errors import ConfigError, ContractError, SizeError
from voxelgrid import VoxelGrid, zone_grid

log = logging.getLogger('losses')

NUM_CLASSES = 4
AUX_FACTORS = (2, 4, 8)


@dataclass
class LossWeights:
    class_weights: tuple = (0.1, 1.0, 1.5, 2.0)
    lambda_boundary: float = 0.3
    lambda_aux: float = 0.3
    boundary_extra: float = 0.5
    dice_smooth: float = 1e-5

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if len(self.class_weights) != NUM_CLASSES or min(self.class_weights) < 0 or sum(self.class_weights) <= 0:
            raise ConfigError('loss.class_weights', self.class_weights, 'four non-negative reals with a positive sum')
        for key in ('lambda_boundary', 'lambda_aux', 'boundary_extra'):
            if not getattr(self, key) >= 0:
                raise ConfigError(f'loss.{key}', getattr(self, key), 'a real >= 0')
        if not self.dice_smooth > 0:
            raise ConfigError('loss.dice_smooth', self.dice_smooth, 'a real > 0')


@dataclass(eq=False)
class LossBreakdown:
    dice_ce: float
    boundary: float
    aux: float
    total: float
    grad_logits: np.ndarray
    grad_aux: list = field(default_factory=list)

    def to_dict(self):
        return {'dice_ce': self.dice_ce, 'boundary': self.boundary, 'aux': self.aux, 'total': self.total}


def _labels(labels):
    data = labels.data if isinstance(labels, VoxelGrid) else np.asarray(labels)
    if data.ndim != 3:
        raise ContractError(f'labels must be a 3D zone grid, got shape {data.shape}')
    if data.size and (data.min() < 0 or data.max() >= NUM_CLASSES):
        raise ContractError(f'labels must lie in 0..{NUM_CLASSES - 1}')
    return data.astype(np.intp)


def _check_logits(logits, labels, who):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 5 or logits.shape[:2] != (1, NUM_CLASSES):
        raise ContractError(f'{who}: logits must be (1, {NUM_CLASSES}, D, H, W), got {logits.shape}')
    if logits.shape[2:] != labels.shape:
        raise ContractError(f'{who}: logits {logits.shape[2:]} do not match labels {labels.shape}')
    return logits[0]


def _log_softmax(z):
    shifted = z - z.max(axis=0, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def _one_hot(labels):
    return (np.arange(NUM_CLASSES).reshape(NUM_CLASSES, 1, 1, 1) == labels[None]).astype(np.float64)


def dice_ce_loss(logits, labels, weights=None):
    """
    Weighted cross-entropy + weighted soft Dice

    CE   = sum_v w_y(v) * -log p_y(v) / sum_v w_y(v)
    Dice = sum_c w_c * (1 - (2 I_c + s) / (P_c + G_c + s)) / sum_c w_c

    Returns:
        (value, grad) with grad shaped like logits
    """
    weights = weights or LossWeights()
    labels = _labels(labels)
    z = _check_logits(logits, labels, 'dice_ce_loss')
    w = np.asarray(weights.class_weights)
    s = weights.dice_smooth

    log_p = _log_softmax(z)
    p = np.exp(log_p)
    y = _one_hot(labels)

    wy = w[labels]
    w_total = wy.sum()
    nll = -np.take_along_axis(log_p, labels[None], axis=0)[0]
    if w_total > 0:
        ce = float((wy * nll).sum() / w_total)
        grad_ce = wy[None] * (p - y) / w_total
    else:
        ce, grad_ce = 0.0, np.zeros_like(p)

    axes = (1, 2, 3)
    inter = (p * y).sum(axis=axes)
    denom = p.sum(axis=axes) + y.sum(axis=axes) + s
    dice_c = (2.0 * inter + s) / denom
    dice = float((w * (1.0 - dice_c)).sum() / w.sum())

    # d dice / d p_c(v), then through the softmax Jacobian
    coeff = (-w / w.sum()).reshape(NUM_CLASSES, 1, 1, 1)
    g = coeff * (2.0 * y * denom.reshape(NUM_CLASSES, 1, 1, 1) - (2.0 * inter + s).reshape(NUM_CLASSES, 1, 1, 1)) \
        / (denom ** 2).reshape(NUM_CLASSES, 1, 1, 1)
    grad_dice = p * (g - (p * g).sum(axis=0, keepdims=True))

    return ce + dice, (grad_ce + grad_dice)[None]


def boundary_mask_6n(labels):
    """Voxels with at least one in-bounds 6-neighbour carrying a different label"""
    data = labels.data if isinstance(labels, VoxelGrid) else np.asarray(labels)
    mask = np.zeros(data.shape, dtype=bool)
    for axis in range(data.ndim):
        n = data.shape[axis]
        if n < 2:
            continue
        lo = [slice(None)] * data.ndim
        hi = [slice(None)] * data.ndim
        lo[axis], hi[axis] = slice(0, n - 1), slice(1, n)
        differs = data[tuple(lo)] != data[tuple(hi)]
        mask[tuple(lo)] |= differs
        mask[tuple(hi)] |= differs
    return mask


def boundary_loss(logits, labels, weights=None):
    """
    boundary_extra * sum_v b(v) CE(v) / max(sum_v b(v), 1), unweighted CE

    Returns:
        (value, grad)
    """
    weights = weights or LossWeights()
    labels = _labels(labels)
    z = _check_logits(logits, labels, 'boundary_loss')
    b = boundary_mask_6n(labels).astype(np.float64)
    norm = max(float(b.sum()), 1.0)
    log_p = _log_softmax(z)
    nll = -np.take_along_axis(log_p, labels[None], axis=0)[0]
    value = weights.boundary_extra * float((b * nll).sum()) / norm
    grad = weights.boundary_extra * b[None] * (np.exp(log_p) - _one_hot(labels)) / norm
    return value, grad[None]


def downsample_labels(labels, factor):
    """Nearest-neighbour downsampling: each block takes its first-corner label"""
    factor = int(factor)
    data = labels.data if isinstance(labels, VoxelGrid) else np.asarray(labels)
    if factor < 1 or any(n % factor for n in data.shape):
        raise SizeError(f'label dims {data.shape} are not divisible by {factor}')
    out = data[::factor, ::factor, ::factor]
    if isinstance(labels, VoxelGrid):
        return zone_grid(out, tuple(sp * factor for sp in labels.spacing))
    return out.copy()


def aux_loss(aux_logits, labels, weights=None):
    """
    Mean DiceCE of the auxiliary heads at factors 2, 4, 8

    Returns:
        (value, [grad per head]) where each grad is d value / d aux_i
    """
    weights = weights or LossWeights()
    labels = _labels(labels)
    if len(aux_logits) != len(AUX_FACTORS):
        raise ContractError(f'aux_loss: expected {len(AUX_FACTORS)} heads, got {len(aux_logits)}')
    values, grads = [], []
    for head, factor in zip(aux_logits, AUX_FACTORS):
        want = tuple(n // factor for n in labels.shape)
        if tuple(np.shape(head)[2:]) != want or any(n % factor for n in labels.shape):
            raise ContractError(f'aux_loss: head at factor {factor} has spatial {np.shape(head)[2:]}, expected {want}')
        value, grad = dice_ce_loss(head, downsample_labels(labels, factor), weights)
        values.append(value)
        grads.append(grad / len(AUX_FACTORS))
    return sum(values) / len(AUX_FACTORS), grads


def total_loss(logits, aux_logits, labels, weights=None):
    """
    Compose the objective

    aux_logits may be None, in which case the auxiliary term is 0.
    """
    weights = weights or LossWeights()
    dice_ce, grad_dice_ce = dice_ce_loss(logits, labels, weights)
    boundary, grad_boundary = boundary_loss(logits, labels, weights)
    if aux_logits is None:
        aux, aux_grads = 0.0, []
    else:
        aux, aux_grads = aux_loss(aux_logits, labels, weights)
    total = dice_ce + weights.lambda_boundary * boundary + weights.lambda_aux * aux
    log.debug('Loss: dice_ce %.6f boundary %.6f aux %.6f total %.6f', dice_ce, boundary, aux, total)
    return LossBreakdown(
        dice_ce=dice_ce,
        boundary=boundary,
        aux=aux,
        total=total,
        grad_logits=grad_dice_ce + weights.lambda_boundary * grad_boundary,
        grad_aux=[weights.lambda_aux * g for g in aux_grads],
    )
