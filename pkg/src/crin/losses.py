"""Composite training objective: per-task (Dice + BCE)/2, deep-supervision
auxiliary loss over the task-specific/shared feature blocks, and the weighted
total.  Dice and BCE are fused primitives with numerically stable backward
rules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .autograd import active_tape, record
from .tensor import ShapeError, Tensor

AUX_WEIGHT = 0.1
DICE_EPS = 1.0


def _check_target(pred: Tensor, target: Tensor, op: str) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"{op}: prediction shape {pred.shape} does not match "
                         f"target shape {target.shape}")


def bce_loss(logit: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy from raw logits, in the fused logit-stable
    form ``max(z,0) - z*y + log(1+exp(-|z|))``."""
    _check_target(logit, target, "bce_loss")
    z, y = logit.data, target.data
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out_val = np.asarray(per.mean(), dtype=z.dtype)
    out = Tensor(out_val, requires_grad=logit.requires_grad)
    if out.requires_grad and active_tape() is not None:
        def bwd(g):
            p = np.empty_like(z)
            pos = z >= 0
            p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
            ez = np.exp(z[~pos])
            p[~pos] = ez / (1.0 + ez)
            return (g * (p - y) / z.size, None)

        record("bce_loss", (logit, target), out, bwd)
    return out


def dice_loss(prob: Tensor, target: Tensor, eps: float = DICE_EPS) -> Tensor:
    """Soft Dice loss ``1 - (2*sum(p*y)+eps) / (sum(p)+sum(y)+eps)``, reduced
    over the whole batch (micro)."""
    _check_target(prob, target, "dice_loss")
    p, y = prob.data, target.data
    inter = float((p * y).sum())
    denom = float(p.sum() + y.sum()) + eps
    loss = 1.0 - (2.0 * inter + eps) / denom
    out = Tensor(np.asarray(loss, dtype=p.dtype), requires_grad=prob.requires_grad)
    if out.requires_grad and active_tape() is not None:
        def bwd(g):
            num = 2.0 * inter + eps
            gp = -(2.0 * y * denom - num) / (denom * denom)
            return (g * gp.astype(p.dtype), None)

        record("dice_loss", (prob, target), out, bwd)
    return out


def task_loss(logit: Tensor, target: Tensor) -> Tensor:
    """(Dice(sigmoid(logit), y) + BCE(logit, y)) / 2."""
    return T.mul(T.add(dice_loss(T.sigmoid(logit), target),
                       bce_loss(logit, target)), 0.5)


def aux_loss(aux_features, aux_heads, y_b: Tensor, y_r: Tensor) -> Tensor:
    """Deep supervision: per stage, 1x1 heads over [f_task | f_s] upsampled to
    full resolution, scored with BCE against each task's ground truth."""
    if len(aux_features) != len(aux_heads):
        raise ShapeError(
            f"aux stage count {len(aux_features)} does not match head count "
            f"{len(aux_heads)}")
    from .nn import _upsample_to  # local import avoids a cycle
    hw = (y_b.shape[2], y_b.shape[3])
    total = None
    for sf, (head_b, head_r) in zip(aux_features, aux_heads):
        lb = _upsample_to(head_b(T.channel_concat(sf.f_b, sf.f_s)), hw)
        lr = _upsample_to(head_r(T.channel_concat(sf.f_r, sf.f_s)), hw)
        term = T.add(bce_loss(lb, y_b), bce_loss(lr, y_r))
        total = term if total is None else T.add(total, term)
    if total is None:
        return T.tensor(0.0, dtype=y_b.dtype)
    return total


@dataclass
class LossBreakdown:
    l_building: float
    l_road: float
    l_aux: float
    l_total: float


def total_loss(b_logits: Tensor, r_logits: Tensor, aux_features, aux_heads,
               y_b: Tensor, y_r: Tensor,
               aux_weight: float = AUX_WEIGHT) -> tuple[Tensor, LossBreakdown]:
    """L = L_building + L_road + 0.1 * L_aux."""
    lb = task_loss(b_logits, y_b)
    lr = task_loss(r_logits, y_r)
    la = aux_loss(aux_features, aux_heads, y_b, y_r)
    total = T.add(T.add(lb, lr), T.mul(la, aux_weight))
    return total, LossBreakdown(lb.item(), lr.item(), la.item(), total.item())
