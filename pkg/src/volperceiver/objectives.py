"""Joint Dice + soft cross-entropy loss over per-pixel class probabilities.

Every pixel is one sample: ``probs`` and ``onehot`` are ``[N, K]`` with
``N`` the number of pixels in the batch.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, clamp, div, log, mul, softmax, sum_

CE_EPS = 1e-8


def _check_batch(probs: Tensor, onehot: Tensor) -> None:
    if probs.ndim != 2 or probs.shape != onehot.shape:
        raise ValueError(f"probs {probs.shape} and onehot {onehot.shape} must both be [N, K]")
    if probs.shape[0] == 0:
        raise ValueError("empty prediction batch")


def one_hot(labels: np.ndarray, num_classes: int, dtype=None) -> Tensor:
    labels = np.asarray(labels).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    out = np.zeros((labels.size, num_classes), dtype=dtype or np.float32)
    out[np.arange(labels.size), labels] = 1.0
    return Tensor(out)


def dice_loss(probs: Tensor, onehot: Tensor) -> Tensor:
    """``1 - (2/N) sum_n sum_k p*y / (p + y)``, with 0/0 terms taken as 0."""
    probs, onehot = as_tensor(probs), as_tensor(onehot)
    _check_batch(probs, onehot)
    n = probs.shape[0]
    denom_data = probs.data + onehot.data
    # where p + y == 0 the numerator is 0 too; dividing by 1 there yields the 0 term exactly
    guard = Tensor((denom_data == 0).astype(probs.dtype))
    terms = div(mul(probs, onehot), probs + onehot + guard)
    return 1.0 - mul(sum_(terms), 2.0 / n)


def soft_ce_loss(probs: Tensor, onehot: Tensor) -> Tensor:
    """``-(1/N) sum_n sum_k y log p`` with ``p`` clamped to ``[1e-8, 1]``."""
    probs, onehot = as_tensor(probs), as_tensor(onehot)
    _check_batch(probs, onehot)
    n = probs.shape[0]
    return mul(sum_(mul(onehot, log(clamp(probs, CE_EPS, 1.0)))), -1.0 / n)


def joint_loss(probs: Tensor, onehot: Tensor) -> Tensor:
    """Unweighted sum of :func:`dice_loss` and :func:`soft_ce_loss`."""
    return dice_loss(probs, onehot) + soft_ce_loss(probs, onehot)


def joint_loss_from_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Training entry point: logits ``[..., K]`` and integer labels of matching leading shape."""
    k = logits.shape[-1]
    flat = logits.reshape(-1, k)
    probs = softmax(flat, axis=-1)
    return joint_loss(probs, one_hot(labels, k, dtype=logits.dtype))
