"""Reference loss mathematics with analytic gradients.

All classification losses operate on probabilities (the network boundary is
assumed to apply its own sigmoid); inputs are clamped to
[1e-7, 1 - 1e-7] before any logarithm, and gradients are zero where the
clamp is active.

The combined objective is

    total = alpha * pos_cls + beta * neg_cls
          + gamma * (reg_residual + reg_corner + direction)

where the two detection terms are sums over the sampled positive/negative
anchors divided by the total sample size, and the three gamma-weighted
terms are sums over all regression-positive anchors divided by their
count.  With no regression positives those terms are zero and the
breakdown is flagged.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

PROB_EPSILON = 1e-7


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "focal_alpha", "focal_gamma"):
            if getattr(self, name) < 0:
                raise ContractError(f"loss weight {name} must be non-negative")


def _clamp(p):
    p = np.asarray(p, dtype=np.float64)
    clipped = np.clip(p, PROB_EPSILON, 1.0 - PROB_EPSILON)
    active = clipped == p
    return clipped, active.astype(np.float64)


def bce(p, t):
    """Elementwise binary cross-entropy on probabilities.

    Returns (loss, dloss/dp) with the same shape as the inputs.
    """
    pc, pass_through = _clamp(p)
    t = np.asarray(t, dtype=np.float64)
    loss = -t * np.log(pc) - (1.0 - t) * np.log(1.0 - pc)
    grad = (-t / pc + (1.0 - t) / (1.0 - pc)) * pass_through
    if np.ndim(p) == 0:
        return float(loss), float(grad)
    return loss, grad


def focal(p, t, alpha=0.25, gamma=2.0):
    """Elementwise focal loss on probabilities; returns (loss, dloss/dp)."""
    pc, pass_through = _clamp(p)
    t = np.asarray(t, dtype=np.float64)
    log_p = np.log(pc)
    log_not_p = np.log(1.0 - pc)
    pos = -alpha * (1.0 - pc) ** gamma * log_p
    neg = -(1.0 - alpha) * pc**gamma * log_not_p
    loss = np.where(t == 1.0, pos, neg)
    dpos = alpha * (gamma * (1.0 - pc) ** (gamma - 1.0) * log_p - (1.0 - pc) ** gamma / pc)
    dneg = (1.0 - alpha) * (-gamma * pc ** (gamma - 1.0) * log_not_p + pc**gamma / (1.0 - pc))
    grad = np.where(t == 1.0, dpos, dneg) * pass_through
    if np.ndim(p) == 0:
        return float(loss), float(grad)
    return loss, grad


def smooth_l1(pred, target):
    """Summed smooth L1 (Huber, transition at 1); returns (loss, dloss/dpred)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    small = np.abs(d) < 1.0
    loss = float(np.sum(np.where(small, 0.5 * d * d, np.abs(d) - 0.5)))
    grad = np.where(small, d, np.sign(d))
    return loss, grad


@dataclass
class LossBreakdown:
    pos_cls: float
    neg_cls: float
    reg_residual: float
    reg_corner: float
    direction: float
    total: float
    regression_skipped: bool
    d_det_probs: np.ndarray
    d_residuals: np.ndarray
    d_corners: np.ndarray
    d_dir_probs: np.ndarray


def total_loss(
    det_probs,
    residuals,
    corners,
    dir_probs,
    match,
    sample,
    residual_targets,
    corner_targets,
    direction_targets,
    weights=None,
    use_focal=False,
):
    """Aggregate the full objective and its gradients.

    ``det_probs`` (K,), ``residuals`` (K, 9), ``corners`` (K, 8), and
    ``dir_probs`` (K,) are the per-anchor network outputs; targets have
    matching shapes.  ``match`` supplies the regression positives
    (all of them, not a subsample) and ``sample`` the balanced detection
    anchors.  Direction always uses plain binary cross-entropy.
    """
    weights = weights or LossWeights()
    det_probs = np.asarray(det_probs, dtype=np.float64)
    residuals = np.asarray(residuals, dtype=np.float64)
    corners = np.asarray(corners, dtype=np.float64)
    dir_probs = np.asarray(dir_probs, dtype=np.float64)
    if residuals.shape != np.shape(residual_targets) or corners.shape != np.shape(corner_targets):
        raise ContractError("activation and target shapes do not match")

    if use_focal:
        def cls_loss(p, t):
            return focal(p, t, alpha=weights.focal_alpha, gamma=weights.focal_gamma)
    else:
        cls_loss = bce

    pos = sample.positive
    neg = sample.negative
    n_total = len(pos) + len(neg)
    if n_total == 0:
        raise ContractError("empty balanced sample")

    d_det = np.zeros_like(det_probs)
    pos_loss, pos_grad = cls_loss(det_probs[pos], np.ones(len(pos)))
    neg_loss, neg_grad = cls_loss(det_probs[neg], np.zeros(len(neg)))
    pos_cls = float(np.sum(pos_loss)) / n_total
    neg_cls = float(np.sum(neg_loss)) / n_total
    d_det[pos] += weights.alpha * pos_grad / n_total
    d_det[neg] += weights.beta * neg_grad / n_total

    reg_idx = match.reg_indices
    n_reg = len(reg_idx)
    d_res = np.zeros_like(residuals)
    d_cor = np.zeros_like(corners)
    d_dir = np.zeros_like(dir_probs)
    if n_reg == 0:
        reg_residual = reg_corner = direction = 0.0
    else:
        res_loss, res_grad = smooth_l1(residuals[reg_idx], np.asarray(residual_targets)[reg_idx])
        cor_loss, cor_grad = smooth_l1(corners[reg_idx], np.asarray(corner_targets)[reg_idx])
        dir_loss, dir_grad = bce(dir_probs[reg_idx], np.asarray(direction_targets)[reg_idx])
        reg_residual = res_loss / n_reg
        reg_corner = cor_loss / n_reg
        direction = float(np.sum(dir_loss)) / n_reg
        d_res[reg_idx] = weights.gamma * res_grad / n_reg
        d_cor[reg_idx] = weights.gamma * cor_grad / n_reg
        d_dir[reg_idx] = weights.gamma * dir_grad / n_reg

    total = (
        weights.alpha * pos_cls
        + weights.beta * neg_cls
        + weights.gamma * (reg_residual + reg_corner + direction)
    )
    return LossBreakdown(
        pos_cls=pos_cls,
        neg_cls=neg_cls,
        reg_residual=reg_residual,
        reg_corner=reg_corner,
        direction=direction,
        total=total,
        regression_skipped=n_reg == 0,
        d_det_probs=d_det,
        d_residuals=d_res,
        d_corners=d_cor,
        d_dir_probs=d_dir,
    )
