"""Segmentation losses and the dice metric.

BCE-with-logits is a dedicated graph op with an analytic backward rule; the
forward uses the overflow-free form ``max(z, 0) - z*y + log1p(exp(-|z|))`` so
huge logits stay finite.  Targets may be soft (average-pooled masks), so any
value in ``[0, 1]`` is a valid target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Array, Tensor, add, downsample_avg, scale, sigmoid_array


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross-entropy of ``logits`` against targets in ``[0, 1]``."""
    z = logits.data
    y = targets.data
    if z.shape != y.shape:
        raise ValueError(f"logits {z.shape} and targets {y.shape} differ in shape")
    if np.any(y < 0.0) or np.any(y > 1.0):
        raise ValueError("targets must lie in [0, 1]")
    per_element = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out_data = per_element.mean()
    n = z.size

    def backward(g: Array) -> None:
        gs = float(g.reshape(())) / n
        if logits.requires_grad:
            logits._accumulate(gs * (sigmoid_array(z) - y))
        if targets.requires_grad:
            targets._accumulate(gs * (-z))

    return Tensor._from_op(out_data, (logits, targets), backward, "bce_with_logits")


def dice_score(pred, truth) -> float:
    """Dice overlap ``2|X & Y| / (|X| + |Y|)`` of two binary masks.

    Accepts arrays or tensors with values in {0, 1}. Returns 1.0 when both
    masks are empty (perfect agreement on absence).
    """
    a = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    b = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    av = a != 0
    bv = b != 0
    if not (np.all((a == 0) | (a == 1)) and np.all((b == 0) | (b == 1))):
        raise ValueError("dice_score expects binary masks with values in {0, 1}")
    total = int(av.sum()) + int(bv.sum())
    if total == 0:
        return 1.0
    inter = int(np.logical_and(av, bv).sum())
    return 2.0 * inter / total


@dataclass
class LossBreakdown:
    """Scalar loss nodes for one forward pass; ``total`` is the backward root.

    ``total = main + aux_weight * aux`` when an auxiliary tap is active,
    otherwise ``total`` is the main term alone and ``aux_loss`` is ``None``.
    """

    main_loss: Tensor
    aux_loss: Tensor | None
    aux_stage: int | None
    total: Tensor

    @property
    def main_value(self) -> float:
        return self.main_loss.item()

    @property
    def aux_value(self) -> float | None:
        return None if self.aux_loss is None else self.aux_loss.item()

    @property
    def total_value(self) -> float:
        return self.total.item()


def composite_loss(
    main_logits: Tensor,
    aux_logits: dict[int, Tensor],
    mask: Tensor,
    aux_stage: int | None,
    aux_weight: float = 1.0,
    zero_main: bool = False,
) -> LossBreakdown:
    """Main BCE plus one optional stage-matched auxiliary BCE.

    The auxiliary target is the ground-truth mask average-pooled down to the
    tapped stage's resolution (soft values are intended).  ``zero_main`` is a
    diagnostic switch that drops the main term from the optimized total while
    still reporting it as zero.
    """
    if aux_stage is not None and aux_stage not in aux_logits:
        raise KeyError(f"no auxiliary logits for stage {aux_stage}")
    main = Tensor(0.0) if zero_main else bce_with_logits(main_logits, mask)
    aux = None
    if aux_stage is not None:
        aux_map = aux_logits[aux_stage]
        mh, mw = mask.shape[-2], mask.shape[-1]
        ah, aw = aux_map.shape[-2], aux_map.shape[-1]
        if mh % ah or mw % aw or mh // ah != mw // aw:
            raise ValueError(
                f"mask {mh}x{mw} is not an integer multiple of aux map {ah}x{aw}"
            )
        target = downsample_avg(mask, mh // ah)
        aux = bce_with_logits(aux_map, target)
        total = add(main, scale(aux, aux_weight))
    else:
        total = main
    return LossBreakdown(main_loss=main, aux_loss=aux, aux_stage=aux_stage, total=total)
