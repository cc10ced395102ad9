"""Per-anchor training targets and the two training losses.

Confidence targets are 1 within an ``r_c``-second radius of a same-class
ground-truth action. Displacement targets are the signed anchor offset
``t - s*`` to the nearest same-class action ``s*``, defined only within the
``r_d``-second support radius; the support mask gates the regression loss.

Radii are compared inclusively in anchor units (``r * f``, not rounded).
Nearest-action ties at equal distance resolve toward the earlier action.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import ActionSet

HUBER_DELTA = 1.0  # residuals are in anchor units; one step is the natural scale


@dataclass
class RadiusConfig:
    r_c_s: float = 3.0
    r_d_s: float = 6.0
    feature_rate_hz: float = 2.0

    def __post_init__(self):
        if self.r_c_s <= 0 or self.r_d_s <= 0:
            raise ValueError("radii must be positive")
        if self.feature_rate_hz <= 0:
            raise ValueError("feature_rate_hz must be positive")

    @property
    def conf_radius_anchors(self) -> float:
        return self.r_c_s * self.feature_rate_hz

    @property
    def disp_radius_anchors(self) -> float:
        return self.r_d_s * self.feature_rate_hz


def _check_actions(actions: ActionSet, num_anchors: int, num_classes: int) -> None:
    for t, k in actions:
        if not (0 <= t < num_anchors and 0 <= k < num_classes):
            raise ValueError(f"action ({t}, {k}) outside grid [{num_anchors} x {num_classes}]")


def make_confidence_targets(actions: ActionSet, num_anchors: int, num_classes: int, cfg: RadiusConfig):
    """Binary ``[T x K]`` confidence targets."""
    _check_actions(actions, num_anchors, num_classes)
    conf = np.zeros((num_anchors, num_classes), dtype=np.float32)
    grid = np.arange(num_anchors, dtype=np.float64)
    for k in range(num_classes):
        s = actions.for_class(k)
        if s.size == 0:
            continue
        dist = np.abs(grid[:, None] - s[None, :])
        conf[dist.min(axis=1) <= cfg.conf_radius_anchors, k] = 1.0
    return conf


def make_displacement_targets(actions: ActionSet, num_anchors: int, num_classes: int, cfg: RadiusConfig):
    """``(D, S)``: signed offsets to the nearest same-class action, and the mask.

    ``S[t,k] = 1`` iff a class-``k`` action lies within the ``r_d`` radius of
    ``t``; there ``D[t,k] = t - s*`` with ``s*`` the nearest such action
    (ties toward the earlier one). ``D`` is 0 wherever ``S`` is 0.
    """
    _check_actions(actions, num_anchors, num_classes)
    disp = np.zeros((num_anchors, num_classes), dtype=np.float32)
    mask = np.zeros((num_anchors, num_classes), dtype=np.float32)
    grid = np.arange(num_anchors, dtype=np.int64)
    for k in range(num_classes):
        s = actions.for_class(k)  # sorted, so argmin ties pick the earlier action
        if s.size == 0:
            continue
        dist = np.abs(grid[:, None] - s[None, :])
        nearest = np.argmin(dist, axis=1)
        within = dist[grid, nearest] <= cfg.disp_radius_anchors
        mask[within, k] = 1.0
        disp[within, k] = (grid - s[nearest])[within]
    return disp, mask


def _as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float32
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def confidence_loss(conf_logits, conf_targets):
    """Summed binary cross-entropy on logits; targets may be soft (mixup).

    Gradient w.r.t. the logits is ``sigmoid(logits) - targets``.
    """
    if not torch.isfinite(conf_logits).all():
        raise ValueError("non-finite confidence logits")
    targets = _as_tensor(conf_targets, conf_logits)
    return F.binary_cross_entropy_with_logits(conf_logits, targets, reduction="sum")


def displacement_loss(disp_pred, disp_targets, disp_mask):
    """Summed Huber loss over masked anchors (threshold 1 anchor unit).

    Anchors where the mask is 0 contribute exactly zero loss and gradient.
    """
    if not torch.isfinite(disp_pred).all():
        raise ValueError("non-finite displacement predictions")
    targets = _as_tensor(disp_targets, disp_pred)
    mask = _as_tensor(disp_mask, disp_pred)
    per_anchor = F.huber_loss(disp_pred, targets, reduction="none", delta=HUBER_DELTA)
    return (per_anchor * mask).sum()
