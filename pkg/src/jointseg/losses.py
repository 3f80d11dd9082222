"""Segmentation losses and the joint training objective.

Each mask prediction pays a per-pixel cross-entropy averaged over the
image plus a weighted soft-Dice complement on the foreground channel.
The joint objective weights the first network's loss, adds the second's
unweighted, and L2-regularizes both parameter sets separately, summed
over the batch.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import ops
from .tensor import Graph, Tensor

CHANNEL_SUM_TOL = 1e-4


def _validate_pair(probs: Tensor, target: np.ndarray) -> np.ndarray:
    if probs.data.ndim != 3 or probs.shape[0] != 2:
        raise ValueError(f"expected 2xHxW class probabilities, got {probs.shape}")
    arr = np.asarray(target)
    if arr.shape != probs.shape[1:]:
        raise ValueError(f"target {arr.shape} does not match probabilities "
                         f"{probs.shape[1:]}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("target mask must be binary")
    drift = np.abs(probs.data.sum(axis=0) - 1.0).max()
    if drift > CHANNEL_SUM_TOL:
        raise ValueError(
            f"class probabilities sum to 1 off by {drift:.2e} (> {CHANNEL_SUM_TOL})")
    return arr


def seg_loss(probs: Tensor, target: np.ndarray, dice_weight: float = 1.0,
             dice_smooth: float = 1e-6, g: Optional[Graph] = None) -> Tensor:
    """Mean cross-entropy plus ``dice_weight`` times (1 - soft Dice).

    ``probs`` is a 2xHxW softmax output (background, foreground);
    ``target`` the binary foreground mask. Soft Dice compares the
    foreground probability map against the mask, smoothed by
    ``dice_smooth`` in numerator and denominator.
    """
    arr = _validate_pair(probs, target)
    y = arr.astype(probs.data.dtype)
    onehot = Tensor(np.stack([1.0 - y, y]), dtype=probs.data.dtype,
                    requires_grad=False)
    ce_sum = ops.reduce_sum(ops.ew_mul(onehot, ops.log(probs, g), g), g)
    ce = ops.scale(ce_sum, -1.0 / y.size, g)
    if dice_weight == 0.0:
        return ce

    fg = ops.channel_slice(probs, 1, g)
    y_mask = Tensor(y[None], dtype=probs.data.dtype, requires_grad=False)
    overlap = ops.reduce_sum(ops.ew_mul(y_mask, fg, g), g)
    num = ops.shift(ops.scale(overlap, 2.0, g), dice_smooth, g)
    den = ops.shift(ops.reduce_sum(fg, g), float(y.sum()) + dice_smooth, g)
    dice_gap = ops.shift(ops.scale(ops.ew_div(num, den, g), -1.0, g), 1.0, g)
    return ops.ew_add(ce, ops.scale(dice_gap, dice_weight, g), g)


def l2_reg(tensors: Sequence[Tensor], g: Optional[Graph] = None) -> Tensor:
    """Sum of squares over every given parameter tensor."""
    if not tensors:
        raise ValueError("l2_reg needs at least one tensor")
    total = None
    for t in tensors:
        sq = ops.reduce_sum(ops.ew_mul(t, t, g), g)
        total = sq if total is None else ops.ew_add(total, sq, g)
    return total


def _sum(terms: Sequence[Tensor], g: Optional[Graph]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ops.ew_add(total, t, g)
    return total


def joint_total(scar_losses: Sequence[Tensor],
                myo_losses: Sequence[Tensor] = (),
                myo_reg: Optional[Tensor] = None,
                scar_reg: Optional[Tensor] = None,
                *, myo_loss_weight: float = 0.0,
                weight_decay_myo: float = 0.0,
                weight_decay_scar: float = 0.0,
                g: Optional[Graph] = None) -> Tensor:
    """Batch objective: weighted first-stage losses, plain second-stage
    losses, and one decay term per parameter set.

    Zero-coefficient parts are left out of the graph entirely, so with
    everything else zero this is exactly the summed second-stage loss.
    """
    if not scar_losses:
        raise ValueError("joint_total needs at least one scar-side loss term")
    total = _sum(list(scar_losses), g)
    if myo_loss_weight != 0.0 and myo_losses:
        total = ops.ew_add(total, ops.scale(_sum(list(myo_losses), g),
                                            myo_loss_weight, g), g)
    if weight_decay_myo != 0.0 and myo_reg is not None:
        total = ops.ew_add(total, ops.scale(myo_reg, weight_decay_myo, g), g)
    if weight_decay_scar != 0.0 and scar_reg is not None:
        total = ops.ew_add(total, ops.scale(scar_reg, weight_decay_scar, g), g)
    return total
