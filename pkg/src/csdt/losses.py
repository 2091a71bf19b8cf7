"""Segmentation, consistency and joint losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

DICE_SMOOTH = 1.0
RAMP_SCALE = 5.0


@dataclass
class LossWeights:
    lambda_u: float = 0.3
    ramp_exponent_scale: float = RAMP_SCALE
    t: int = 0
    t_max: int = 1

    def __post_init__(self):
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")
        if not 0 <= self.t <= self.t_max:
            raise ValueError(f"t={self.t} outside [0, {self.t_max}]")
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be >= 0")

    @property
    def lambda_c(self) -> float:
        return ramp_up_weight(self.t, self.t_max, self.ramp_exponent_scale)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def dice_loss_per_sample(pred, target, smooth: float = DICE_SMOOTH):
    """Soft Dice loss for each sample along the leading axis."""
    _check_shapes(pred, target)
    p = pred.reshape(pred.shape[0], -1)
    t = target.reshape(target.shape[0], -1)
    inter = (p * t).sum(dim=1)
    return 1.0 - (2.0 * inter + smooth) / (p.sum(dim=1) + t.sum(dim=1) + smooth)


def dice_loss(pred, target, smooth: float = DICE_SMOOTH):
    """Batch mean of per-sample soft Dice losses.

    A tensor without a batch axis (ndim <= 2) is treated as one sample.
    """
    if pred.ndim <= 2:
        pred, target = pred[None], target[None]
    return dice_loss_per_sample(pred, target, smooth).mean()


def consistency_loss(student_pred, teacher_pred):
    """Mean squared error between two probability maps."""
    _check_shapes(student_pred, teacher_pred)
    return torch.mean((student_pred - teacher_pred) ** 2)


def ramp_up_weight(t, t_max, scale: float = RAMP_SCALE) -> float:
    """Consistency weight ``exp(-scale * (1 - t/t_max)**2)``."""
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    if not 0 <= t <= t_max:
        raise ValueError(f"t={t} outside [0, {t_max}]")
    return math.exp(-scale * (1.0 - t / t_max) ** 2)


def total_loss(l_s, l_u, l_c, weights: LossWeights):
    """``l_s + lambda_c * l_c + lambda_u * l_u``.

    Components may be floats or scalar tensors; a disabled component is
    passed as 0.
    """
    for name, v in (("L_s", l_s), ("L_u", l_u), ("L_c", l_c)):
        val = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(val):
            raise FloatingPointError(f"{name} is not finite ({val})")
    return l_s + weights.lambda_c * l_c + weights.lambda_u * l_u
