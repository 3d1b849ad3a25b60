"""Training loss: binary cross-entropy plus soft Dice loss."""

from __future__ import annotations

from typing import NamedTuple

from .errors import ShapeError
from .tensor import Tensor, add, as_tensor, clip, log, mean, mul, reciprocal, scale, sub, tsum

PRED_CLAMP = 1e-7
DICE_EPSILON = 1e-6


class LossParts(NamedTuple):
    total: Tensor
    bce: Tensor
    dice_loss: Tensor


def bce_dice_loss(pred, truth, eps: float = DICE_EPSILON) -> LossParts:
    """Mean BCE + (1 - soft Dice), both differentiable in ``pred``.

    ``pred`` is clamped to ``[1e-7, 1 - 1e-7]`` before the logarithms; the
    Dice term uses the clamped values too.
    """
    pred, truth = as_tensor(pred), as_tensor(truth)
    if pred.shape != truth.shape:
        raise ShapeError("loss operands differ in shape", pred.shape, truth.shape)
    y = truth.data.astype(pred.dtype)
    p = clip(pred, PRED_CLAMP, 1 - PRED_CLAMP)

    one = pred.dtype.type(1)
    ce = add(mul(log(p), y), mul(log(sub(one, p)), one - y))
    bce = scale(mean(ce), -1.0)

    inter = tsum(mul(p, y))
    denom = add(tsum(p), pred.dtype.type(y.sum() + eps))
    dice = mul(scale(inter, 2.0), reciprocal(denom))
    dice_loss = sub(one, dice)
    return LossParts(add(bce, dice_loss), bce, dice_loss)

