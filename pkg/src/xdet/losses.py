"""Classification and box-regression losses with exact analytic gradients.

The focal loss is evaluated from logits via softplus identities so it stays
finite for |logit| well beyond 20; probabilities are only formed in the
scalar diagnostic helpers, where p_t is clamped away from 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FocalParams",
    "NEGATIVE_LABEL",
    "IGNORED_LABEL",
    "weighted_ce",
    "focal_term",
    "focal_loss",
    "smooth_l1",
]

# Per-anchor label conventions for focal_loss: class id >= 0 marks a positive
# anchor of that class, NEGATIVE_LABEL a background anchor, IGNORED_LABEL an
# anchor excluded from the loss.
NEGATIVE_LABEL = -1
IGNORED_LABEL = -2

_P_FLOOR = 1e-7


@dataclass(frozen=True)
class FocalParams:
    """Class-balance weight alpha and focusing exponent gamma."""

    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1]: {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0: {self.gamma}")


def weighted_ce(p_t: float, alpha_t: float) -> float:
    """Weighted cross entropy -alpha_t * ln(p_t), with p_t floored at 1e-7."""
    return -alpha_t * math.log(max(float(p_t), _P_FLOOR))


def focal_term(p_t: float, alpha_t: float, gamma: float) -> float:
    """Scalar focal loss -alpha_t * (1 - p_t)**gamma * ln(p_t) (diagnostic path)."""
    p = max(float(p_t), _P_FLOOR)
    return -alpha_t * (1.0 - p) ** gamma * math.log(p)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def focal_loss(
    logits: np.ndarray, labels: np.ndarray, params: FocalParams
) -> tuple[float, np.ndarray]:
    """Binary focal loss over anchors with its exact gradient w.r.t. logits.

    ``logits`` has shape (num_anchors, num_classes); ``labels`` has shape
    (num_anchors,) using the label conventions above. A positive anchor is a
    positive example for its class and a negative example for every other
    class; negative anchors are negative for all classes; ignored anchors
    contribute neither loss nor gradient. The total is normalized by the
    number of positive anchors (at least 1).
    """
    z = np.asarray(logits)
    labels = np.asarray(labels)
    if z.ndim != 2:
        raise ValueError(f"logits must be 2-D (anchors, classes), got shape {z.shape}")
    if labels.shape != (z.shape[0],):
        raise ValueError(
            f"labels shape {labels.shape} does not match {z.shape[0]} anchors"
        )
    pos_anchor = labels >= 0
    valid = labels != IGNORED_LABEL

    # Signed targets: +1 where the entry is a positive example, else -1.
    t = np.full(z.shape, -1.0, dtype=z.dtype)
    idx = np.nonzero(pos_anchor)[0]
    t[idx, labels[idx]] = 1.0

    alpha_t = np.where(t > 0, params.alpha, 1.0 - params.alpha).astype(z.dtype)
    u = -t * z
    s = _sigmoid(u)  # equals 1 - p_t
    sp = np.logaddexp(0.0, u)  # equals -ln(p_t)
    focal_w = s ** params.gamma

    loss_mat = alpha_t * focal_w * sp
    grad_mat = -t * alpha_t * focal_w * (params.gamma * (1.0 - s) * sp + s)

    mask = valid[:, None]
    norm = max(1, int(np.count_nonzero(pos_anchor)))
    loss = float(np.sum(loss_mat, where=mask)) / norm
    grad = np.where(mask, grad_mat, 0.0) / norm
    return loss, grad.astype(z.dtype, copy=False)


def smooth_l1(
    pred_delta: np.ndarray, target_delta: np.ndarray, beta: float
) -> tuple[float, np.ndarray]:
    """Smooth-L1 (Huber) loss summed over all entries, plus gradient w.r.t. pred.

    Per coordinate: 0.5 * d^2 / beta for |d| < beta, else |d| - 0.5 * beta.
    """
    if beta <= 0:
        raise ValueError(f"beta must be positive: {beta}")
    pred = np.asarray(pred_delta)
    target = np.asarray(target_delta)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    ad = np.abs(d)
    quad = ad < beta
    loss = float(np.sum(np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)))
    grad = np.where(quad, d / beta, np.sign(d)).astype(pred.dtype, copy=False)
    return loss, grad
