"""Mask losses on logits with analytic gradients, and the weighted total."""

from __future__ import annotations

from typing import Sequence

import numpy as np

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
SMOOTH = 1.0


def _prep(logits, target):
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if x.shape != t.shape:
        raise ValueError(f"logits shape {x.shape} != target shape {t.shape}")
    return x, t


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _log_sigmoid(x):
    # log(sigmoid(x)) = -softplus(-x)
    return -np.logaddexp(0.0, -x)


def focal_loss(logits, target, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> dict:
    x, t = _prep(logits, target)
    p = _sigmoid(x)
    log_p = _log_sigmoid(x)
    log_q = _log_sigmoid(-x)
    q = 1.0 - p
    pos = -alpha * t * q**gamma * log_p
    neg = -(1.0 - alpha) * (1.0 - t) * p**gamma * log_q
    n = x.size
    d_pos = alpha * t * q**gamma * (gamma * p * log_p - q)
    d_neg = (1.0 - alpha) * (1.0 - t) * p**gamma * (p - gamma * q * log_q)
    return {"value": float((pos + neg).sum() / n), "grad": (d_pos + d_neg) / n}


def dice_loss(logits, target, smooth: float = SMOOTH) -> dict:
    x, t = _prep(logits, target)
    p = _sigmoid(x)
    inter = float((p * t).sum())
    denom = float(p.sum() + t.sum()) + smooth
    num = 2.0 * inter + smooth
    dp = -(2.0 * t * denom - num) / denom**2
    return {"value": 1.0 - num / denom, "grad": dp * p * (1.0 - p)}


def soft_iou_loss(logits, target, smooth: float = SMOOTH) -> dict:
    x, t = _prep(logits, target)
    p = _sigmoid(x)
    inter = float((p * t).sum())
    union = float(p.sum() + t.sum()) - inter + smooth
    num = inter + smooth
    dp = -(t * union - num * (1.0 - t)) / union**2
    return {"value": 1.0 - num / union, "grad": dp * p * (1.0 - p)}


def mask_losses(student_logits: Sequence, pseudo_labels: Sequence) -> dict:
    """Instance-averaged focal, dice and soft-IoU terms with their gradients."""
    if len(student_logits) != len(pseudo_labels):
        raise ValueError(f"{len(student_logits)} predictions for {len(pseudo_labels)} pseudo-labels")
    if len(student_logits) == 0:
        raise ValueError("no instances to supervise")
    n = len(student_logits)
    out = {"focal": 0.0, "dice": 0.0, "iou": 0.0}
    grads = {"focal": [], "dice": [], "iou": []}
    for logits, label in zip(student_logits, pseudo_labels):
        for name, fn in (("focal", focal_loss), ("dice", dice_loss), ("iou", soft_iou_loss)):
            r = fn(logits, label)
            out[name] += r["value"] / n
            grads[name].append(r["grad"] / n)
    out["grads"] = grads
    return out


def total_loss(
    student_logits: Sequence,
    pseudo_labels: Sequence,
    match_value: float,
    lambda_focal: float = 20.0,
    lambda_match: float = 0.1,
    use_match: bool = True,
) -> dict:
    """Weighted sum ``lf*focal + dice + lm*match + iou``.

    Returns the scalar ``value``, each component, and ``logit_grads`` (one
    per instance) for the mask terms.
    """
    parts = mask_losses(student_logits, pseudo_labels)
    match = float(match_value) if use_match else 0.0
    value = lambda_focal * parts["focal"] + parts["dice"] + lambda_match * match + parts["iou"]
    g = parts["grads"]
    logit_grads = [
        lambda_focal * f + d + i for f, d, i in zip(g["focal"], g["dice"], g["iou"])
    ]
    return {
        "value": float(value),
        "focal": parts["focal"],
        "dice": parts["dice"],
        "iou": parts["iou"],
        "match": match,
        "logit_grads": logit_grads,
    }


def combine(focal: float, dice: float, match: float, iou: float, lambda_focal: float = 20.0, lambda_match: float = 0.1) -> float:
    return lambda_focal * focal + dice + lambda_match * match + iou
