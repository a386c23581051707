"""Combined cross-entropy + soft Dice training loss and the Dice similarity metric."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, ParameterError
from .tensor import Tensor, add, clamp_min, div, log, mul, permute, reshape, softmax_lastdim, tsum

PROB_FLOOR = 1e-7
DICE_EPS = 1e-5


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """``[D, H, W]`` integer labels to a ``[K, D, H, W]`` float indicator."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ParameterError(f"labels must lie in [0, {num_classes})")
    return (np.arange(num_classes).reshape(-1, *([1] * labels.ndim)) == labels).astype(np.float64)


def class_softmax(logits: Tensor) -> Tensor:
    """Softmax over the class axis of ``[K, D, H, W]`` logits."""
    k = logits.shape[0]
    flat = permute(reshape(logits, (k, logits.size // k)), (1, 0))
    return reshape(permute(softmax_lastdim(flat), (1, 0)), logits.shape)


def _pair_terms(pred: Tensor, truth: np.ndarray, floor: float, eps: float) -> Tensor:
    k = pred.shape[0]
    if k < 2:
        raise ConfigurationError(f"need at least 2 classes, got {k}")
    if tuple(pred.shape[1:]) != tuple(np.shape(truth)):
        raise DimensionError(f"prediction {pred.shape} does not match labels {np.shape(truth)}")
    y = one_hot(truth, k)
    ce = mul(tsum(mul(log(clamp_min(pred, floor)), y)), 1.0 / pred.size)
    fg = pred.shape[0] - 1
    flat = reshape(pred, (k, pred.size // k))
    inter = tsum(mul(flat, y.reshape(k, -1)), axis=1)
    denom = add(tsum(flat, axis=1), y.reshape(k, -1).sum(axis=1) + eps)
    ratio = div(mul(inter, 2.0), denom)
    fg_mask = np.r_[0.0, np.ones(fg)] / fg
    dice = tsum(mul(ratio, fg_mask))
    return add(mul(ce, 0.5), dice)


def combined_loss(preds: Sequence[Tensor], truths: Sequence[np.ndarray],
                  floor: float = PROB_FLOOR, eps: float = DICE_EPS) -> Tensor:
    """``-(1/N) * sum_n (0.5 * CE_n + Dice_n)`` over a batch of probability volumes.

    ``CE_n`` averages ``onehot * log(max(p, floor))`` over voxels and classes;
    ``Dice_n`` is the soft Dice averaged over foreground classes (class 0 is
    background).  A perfect prediction scores -1.
    """
    if isinstance(preds, Tensor):
        preds, truths = [preds], [truths]
    if len(preds) == 0 or len(preds) != len(truths):
        raise DimensionError(f"{len(preds)} predictions for {len(truths)} label volumes")
    total = None
    for pred, truth in zip(preds, truths):
        term = _pair_terms(pred, truth, floor, eps)
        total = term if total is None else add(total, term)
    return mul(total, -1.0 / len(preds))


def dice_score(pred_labels: np.ndarray, truth: np.ndarray, class_id: int,
               num_classes: int | None = None) -> float:
    """``2|P & T| / (|P| + |T|)`` for one class; 1.0 when both are empty."""
    pred_labels, truth = np.asarray(pred_labels), np.asarray(truth)
    if pred_labels.shape != truth.shape:
        raise DimensionError(f"shape mismatch {pred_labels.shape} vs {truth.shape}")
    if class_id < 0 or (num_classes is not None and class_id >= num_classes):
        raise ParameterError(f"class {class_id} outside [0, {num_classes})")
    p, t = pred_labels == class_id, truth == class_id
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / total
