"""Training objective: IoU regression loss, two BCE terms, weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateInputError, ShapeError, UsageError
from .tensor import Tensor

IOU_CLAMP = 1e-6
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.2

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be nonnegative")


def _mask_array(mask, shape, name: str) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != shape:
        raise ShapeError(f"{name} shape {m.shape} does not match {shape}")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise UsageError(f"{name} must be binary")
    return m


def iou_loss(reg_pred: Tensor, targets, mask, reduction: str = "mean") -> Tensor:
    """-ln IoU between predicted and target boxes, over masked cells.

    Both inputs are (4, H, W) boundary distances; the boxes at one cell share
    that cell's anchor point, so the intersection width is min(l, l*) +
    min(r, r*) and likewise for height.  IoU is clamped to [1e-6, 1] before
    the log.  `reduction` is "mean" (default, batch-size invariant) or "sum".
    """
    if reduction not in ("mean", "sum"):
        raise UsageError(f"unknown reduction {reduction!r}")
    if reg_pred.data.ndim != 3 or reg_pred.data.shape[0] != 4:
        raise ShapeError(f"reg_pred must be (4,H,W), got {reg_pred.data.shape}")
    hw = reg_pred.data.shape[1:]
    m = _mask_array(mask, hw, "mask")
    n = float(m.sum())
    if n == 0.0:
        raise DegenerateInputError("iou_loss: mask selects no cells")
    if np.any(reg_pred.data < 0.0):
        raise UsageError("iou_loss: negative predicted distances")

    t = targets if isinstance(targets, Tensor) else T.constant(np.asarray(targets, dtype=np.float64))
    if t.data.shape != reg_pred.data.shape:
        raise ShapeError(f"targets shape {t.data.shape} != {reg_pred.data.shape}")

    # Unmasked cells are replaced by a fixed unit box on both sides before
    # any division, so they contribute an exact -ln(1) = 0 and can never
    # produce 0/0; the substitution also zeroes their gradients.
    mc = T.constant(m)
    fill = T.constant(1.0 - m)

    def masked(src: Tensor, idx: int) -> Tensor:
        return T.add(T.mul(T.channel(src, idx), mc), fill)

    pl, pt, pr, pb = (masked(reg_pred, i) for i in range(4))
    tl, tt, tr, tb = (masked(t, i) for i in range(4))

    iw = T.add(T.minimum(pl, tl), T.minimum(pr, tr))
    ih = T.add(T.minimum(pt, tt), T.minimum(pb, tb))
    inter = T.mul(iw, ih)
    area_p = T.mul(T.add(pl, pr), T.add(pt, pb))
    area_t = T.mul(T.add(tl, tr), T.add(tt, tb))
    union = T.sub(T.add(area_p, area_t), inter)
    iou = T.div(inter, union)

    per_cell = T.neg(T.log(T.clamp(iou, IOU_CLAMP, 1.0)))
    total = T.reduce_sum(T.mul(per_cell, mc))
    return T.scale(total, 1.0 / n) if reduction == "mean" else total


def bce_loss(pred: Tensor, labels, pos_mask, neg_mask) -> Tensor:
    """Binary cross entropy with the two classes balanced 1/2-1/2.

    Soft labels in [0, 1] are allowed.  Positives and negatives each get
    total weight 1/2 (or full weight if the other class is absent, so a
    single-class map still yields a plain mean).  Probabilities are clamped
    to [1e-7, 1 - 1e-7].
    """
    if pred.data.ndim != 2:
        raise ShapeError(f"pred must be (H,W), got {pred.data.shape}")
    hw = pred.data.shape
    pm = _mask_array(pos_mask, hw, "pos_mask")
    nm = _mask_array(neg_mask, hw, "neg_mask")
    if np.any(pm * nm != 0.0):
        raise UsageError("bce_loss: pos_mask and neg_mask overlap")
    n_pos, n_neg = float(pm.sum()), float(nm.sum())
    if n_pos == 0.0 and n_neg == 0.0:
        raise DegenerateInputError("bce_loss: no positives and no negatives")

    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64)
    if y.shape != hw:
        raise ShapeError(f"labels shape {y.shape} != {hw}")
    if np.any((y < 0.0) | (y > 1.0)):
        raise UsageError("bce_loss: labels outside [0, 1]")

    if n_pos == 0.0:
        w = nm / n_neg
    elif n_neg == 0.0:
        w = pm / n_pos
    else:
        w = 0.5 * pm / n_pos + 0.5 * nm / n_neg

    p = T.clamp(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    q = T.shift(T.neg(p), 1.0)  # 1 - p
    term = T.neg(T.add(
        T.mul(T.constant(y), T.log(p)),
        T.mul(T.constant(1.0 - y), T.log(q)),
    ))
    return T.reduce_sum(T.mul(term, T.constant(w)))


def _as_scalar(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return T.tensor(float(x))


def total_loss(l_reg, l_o, l_r, weights: LossWeights | None = None) -> Tensor:
    """L = L_reg + lambda1 * L_o + lambda2 * L_r."""
    w = weights if weights is not None else LossWeights()
    out = T.add(
        _as_scalar(l_reg),
        T.add(
            T.scale(_as_scalar(l_o), w.lambda1),
            T.scale(_as_scalar(l_r), w.lambda2),
        ),
    )
    return out
