"""Class-weighted soft-F1 loss for imbalanced binary segmentation."""

from __future__ import annotations

import numpy as np

from psselect.autodiff.tensor import Tensor, _result, as_tensor

F1_EPS = 1e-9


def _check_labels(labels, shape):
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != shape:
        raise ValueError(f"labels shape {y.shape} != probabilities shape {shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return y


def soft_counts(probs, labels, class_weights=(200.0, 1.0)) -> dict:
    """Probabilistic confusion counts; weights are (PS, non-PS).

    A non-PS pixel predicted with probability p contributes ``p`` false
    positive and ``1 - p`` true negative mass (times the non-PS weight).
    """
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    y = _check_labels(labels, p.shape)
    w_ps, w_non = class_weights
    return {
        "tp": float((w_ps * p * y).sum()),
        "fp": float((w_non * p * (1 - y)).sum()),
        "fn": float((w_ps * (1 - p) * y).sum()),
        "tn": float((w_non * (1 - p) * (1 - y)).sum()),
    }


def soft_f1_loss(probs: Tensor, labels, class_weights=(200.0, 1.0), eps: float = F1_EPS) -> Tensor:
    """``1 - 2TP / (2TP + FP + FN + eps)`` over soft, class-weighted counts."""
    probs = as_tensor(probs)
    p = probs.data
    y = _check_labels(labels, p.shape)
    w_ps, w_non = float(class_weights[0]), float(class_weights[1])
    wy = w_ps * y
    wn = w_non * (1 - y)
    tp = (wy * p).sum()
    fp = (wn * p).sum()
    fn = (wy * (1 - p)).sum()
    den = 2 * tp + fp + fn + eps
    loss = 1.0 - 2 * tp / den

    def backward(g):
        # d(den)/dp = wy + wn
        grad = -(2 * wy * den - 2 * tp * (wy + wn)) / den ** 2
        probs._accumulate(g * grad)

    return _result(np.float64(loss), (probs,), backward)
