"""Loss terms: detection, pose reconstruction and loop supervision.

The composite training objective is the plain sum of the three terms.
Detection and loop losses share one implementation: classification over all
queries, box L1 + generalized IoU and labeled-keypoint L1 over matched
pairs, summed over every per-layer coordinate snapshot.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .core import PersonInstance, Visibility
from .matching import Assignment, CostWeights
from .model import HumanQuerySet, Predictions

__all__ = [
    "LossTerms",
    "LossBundle",
    "loss_detection",
    "loss_reconstruction",
    "loss_loop",
    "giou_pairs",
]


@dataclass
class LossTerms:
    """One loss term as a differentiable scalar plus logged components."""

    value: Tensor
    parts: dict[str, float]

    def item(self) -> float:
        return float(self.value.detach())


@dataclass(frozen=True)
class LossBundle:
    """Per-step loss record; total must equal the sum of the three terms."""

    l_g: float
    l_r: float
    l_l: float
    total: float

    def __post_init__(self) -> None:
        expected = self.l_g + self.l_r + self.l_l
        scale = max(1.0, abs(expected))
        if abs(self.total - expected) > 1e-6 * scale:
            raise ValueError(
                f"loss bundle violates additivity: total={self.total} "
                f"vs l_g+l_r+l_l={expected}"
            )


def giou_pairs(boxes_a: Tensor, boxes_b: Tensor) -> Tensor:
    """Elementwise generalized IoU of aligned cxcywh boxes, (..., 4) -> (...)."""
    ax1 = boxes_a[..., 0] - boxes_a[..., 2] / 2
    ay1 = boxes_a[..., 1] - boxes_a[..., 3] / 2
    ax2 = boxes_a[..., 0] + boxes_a[..., 2] / 2
    ay2 = boxes_a[..., 1] + boxes_a[..., 3] / 2
    bx1 = boxes_b[..., 0] - boxes_b[..., 2] / 2
    by1 = boxes_b[..., 1] - boxes_b[..., 3] / 2
    bx2 = boxes_b[..., 0] + boxes_b[..., 2] / 2
    by2 = boxes_b[..., 1] + boxes_b[..., 3] / 2
    inter = (torch.minimum(ax2, bx2) - torch.maximum(ax1, bx1)).clamp(min=0) * (
        torch.minimum(ay2, by2) - torch.maximum(ay1, by1)
    ).clamp(min=0)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    iou = inter / union.clamp(min=1e-12)
    enclose = (torch.maximum(ax2, bx2) - torch.minimum(ax1, bx1)) * (
        torch.maximum(ay2, by2) - torch.minimum(ay1, by1)
    )
    return iou - (enclose - union) / enclose.clamp(min=1e-12)


def _gt_tensors(
    gts: Sequence[PersonInstance], device, dtype
) -> tuple[Tensor, Tensor, Tensor]:
    boxes = torch.from_numpy(np.stack([inst.box.as_array() for inst in gts])).to(device, dtype)
    kpts = torch.from_numpy(np.stack([inst.pose.coords for inst in gts])).to(device, dtype)
    mask = torch.from_numpy(
        np.stack([inst.pose.visibility != int(Visibility.NOT_LABELED) for inst in gts])
    ).to(device)
    return boxes, kpts, mask


def _snapshot_terms(
    boxes: Tensor,
    score_logits: Tensor,
    kpts: Optional[Tensor],
    gt_data: Sequence[tuple[Tensor, Tensor, Tensor]],
    assignments: Sequence[Assignment],
    kpt_weights: Optional[Tensor] = None,
) -> dict[str, Tensor]:
    """Loss components of one per-layer snapshot.

    Classification covers every query; box and keypoint terms cover matched
    pairs, normalized by matched-pair and labeled-keypoint counts. Optional
    kpt_weights (K,) reweights the keypoint term; the weighted mean reduces
    to the plain mean when all weights are 1.
    """
    device, dtype = boxes.device, boxes.dtype
    zero = torch.zeros((), device=device, dtype=dtype)
    cls_targets = torch.zeros_like(score_logits)

    pred_boxes, gt_boxes = [], []
    pred_kpts, gt_kpts, kpt_masks = [], [], []
    for b, asg in enumerate(assignments):
        g_boxes, g_kpts, g_mask = gt_data[b]
        for p, g in asg.pairs:
            cls_targets[b, p] = 1.0
            pred_boxes.append(boxes[b, p])
            gt_boxes.append(g_boxes[g])
            if kpts is not None:
                pred_kpts.append(kpts[b, p])
                gt_kpts.append(g_kpts[g])
                kpt_masks.append(g_mask[g])

    terms = {"cls": F.binary_cross_entropy_with_logits(score_logits, cls_targets)}
    if pred_boxes:
        pb = torch.stack(pred_boxes)
        gb = torch.stack(gt_boxes)
        n_matched = float(pb.shape[0])
        terms["box_l1"] = (pb - gb).abs().sum() / n_matched
        terms["giou"] = (1.0 - giou_pairs(pb, gb)).sum() / n_matched
    else:
        terms["box_l1"] = zero
        terms["giou"] = zero
    if kpts is not None:
        if pred_kpts:
            pk = torch.stack(pred_kpts)
            gk = torch.stack(gt_kpts)
            km = torch.stack(kpt_masks).to(dtype)
            if kpt_weights is not None:
                km = km * kpt_weights.view(1, -1)
            n_labeled = km.sum().clamp(min=1)
            terms["kpt_l1"] = ((pk - gk).abs().sum(-1) * km).sum() / n_labeled
        else:
            terms["kpt_l1"] = zero
    return terms


def _kpt_confidence_term(
    preds: Predictions,
    gt_data: Sequence[tuple[Tensor, Tensor, Tensor]],
    assignments: Sequence[Assignment],
    sigmas: Tensor,
) -> Tensor:
    """Per-keypoint confidence supervision: BCE toward each keypoint's
    similarity score exp(-d^2 / (2 s^2 sigma^2)), target detached."""
    logits, targets = [], []
    final_kpts = preds.keypoints.detach()
    for b, asg in enumerate(assignments):
        gt_boxes, gt_kpts, gt_mask = gt_data[b]
        for p, g in asg.pairs:
            mask = gt_mask[g]
            if not bool(mask.any()):
                continue
            d2 = ((final_kpts[b, p] - gt_kpts[g]) ** 2).sum(-1)
            s2 = (gt_boxes[g, 2] * gt_boxes[g, 3]).clamp(min=1e-12)
            target = torch.exp(-d2 / (2.0 * s2 * sigmas**2))
            logits.append(preds.kpt_score_logits[b, p][mask])
            targets.append(target[mask])
    if not logits:
        return torch.zeros((), device=final_kpts.device, dtype=final_kpts.dtype)
    return F.binary_cross_entropy_with_logits(torch.cat(logits), torch.cat(targets))


def loss_detection(
    preds: Predictions,
    gt_batch: Sequence[Sequence[PersonInstance]],
    assignments: Sequence[Assignment],
    weights: CostWeights,
    sigmas: Optional[Tensor] = None,
    human_aux: Optional[HumanQuerySet] = None,
    w_kconf: float = 1.0,
    kpt_weights: Optional[Tensor] = None,
) -> LossTerms:
    """Detection loss over all per-layer snapshots.

    Matched pairs contribute box L1, (1 - gIoU) and labeled-keypoint L1;
    every query contributes binary classification against its matched/
    background target. When sigmas is given, a per-keypoint confidence term
    supervises the keypoint score head on the final layer. human_aux adds
    the human decoder's own per-layer box/classification snapshots.
    kpt_weights optionally reweights the keypoint term per keypoint.
    """
    if len(gt_batch) != preds.boxes.shape[0] or len(assignments) != len(gt_batch):
        raise ValueError("gt_batch / assignments length must equal the batch size")
    device, dtype = preds.boxes.device, preds.boxes.dtype
    gt_data = [_gt_tensors(gts, device, dtype) for gts in gt_batch]
    if kpt_weights is not None:
        kpt_weights = kpt_weights.to(device, dtype)

    snapshots: list[dict[str, Tensor]] = []
    for i in range(len(preds.layer_boxes)):
        snapshots.append(
            _snapshot_terms(
                preds.layer_boxes[i],
                preds.layer_score_logits[i],
                preds.layer_keypoints[i],
                gt_data,
                assignments,
                kpt_weights=kpt_weights,
            )
        )
    if human_aux is not None:
        for i in range(len(human_aux.layer_boxes)):
            snapshots.append(
                _snapshot_terms(
                    human_aux.layer_boxes[i],
                    human_aux.layer_score_logits[i],
                    None,
                    gt_data,
                    assignments,
                )
            )

    zero = torch.zeros((), device=device, dtype=dtype)
    agg = {"cls": zero, "box_l1": zero, "giou": zero, "kpt_l1": zero}
    for snap in snapshots:
        for key, value in snap.items():
            agg[key] = agg[key] + value

    total = (
        weights.w_cls * agg["cls"]
        + weights.w_box_l1 * agg["box_l1"]
        + weights.w_box_giou * agg["giou"]
        + weights.w_kpt_l1 * agg["kpt_l1"]
    )
    parts = {key: float(value.detach()) for key, value in agg.items()}
    if sigmas is not None:
        kconf = _kpt_confidence_term(preds, gt_data, assignments, sigmas.to(device, dtype))
        total = total + w_kconf * kconf
        parts["kconf"] = float(kconf.detach())
    return LossTerms(value=total, parts=parts)


def loss_reconstruction(
    preds: Predictions,
    gt_batch: Sequence[Sequence[PersonInstance]],
    kpt_weights: Optional[Tensor] = None,
) -> LossTerms:
    """Reconstruction loss of the error-query path.

    The correspondence is positional: group i of image b reconstructs
    gt_batch[b][i] (no matching involved). Mean per-keypoint L1 over labeled
    keypoints, all instances and all layer snapshots; kpt_weights optionally
    reweights keypoints as in loss_detection.
    """
    b_size = preds.keypoints.shape[0]
    if len(gt_batch) != b_size:
        raise ValueError(f"gt_batch has {len(gt_batch)} images, predictions have {b_size}")
    device, dtype = preds.keypoints.device, preds.keypoints.dtype
    if kpt_weights is not None:
        kpt_weights = kpt_weights.to(device, dtype)

    numer = torch.zeros((), device=device, dtype=dtype)
    weight_sum = 0.0
    for b, gts in enumerate(gt_batch):
        if len(gts) > preds.keypoints.shape[1]:
            raise ValueError(
                f"image {b}: {len(gts)} instances exceed {preds.keypoints.shape[1]} query groups"
            )
        if not gts:
            continue
        _, gt_kpts, gt_mask = _gt_tensors(gts, device, dtype)
        mask = gt_mask.to(dtype)
        if kpt_weights is not None:
            mask = mask * kpt_weights.view(1, -1)
        g = len(gts)
        for snap in preds.layer_keypoints:
            diff = (snap[b, :g] - gt_kpts).abs().sum(-1)  # (G, K) per-keypoint L1
            numer = numer + (diff * mask).sum()
        weight_sum += float(mask.sum())

    denom = max(1.0, weight_sum * len(preds.layer_keypoints))
    value = numer / denom
    return LossTerms(value=value, parts={"kpt_l1": float(value.detach())})


def loss_loop(
    preds: Predictions,
    gt_batch: Sequence[Sequence[PersonInstance]],
    assignments: Sequence[Assignment],
    weights: CostWeights,
    sigmas: Optional[Tensor] = None,
    w_kconf: float = 1.0,
    kpt_weights: Optional[Tensor] = None,
) -> LossTerms:
    """Loop-pass loss: identical functional form to loss_detection, evaluated
    on the outputs of the click-conditioned decoder pass with the first-pass
    assignment reused."""
    return loss_detection(
        preds,
        gt_batch,
        assignments,
        weights,
        sigmas=sigmas,
        w_kconf=w_kconf,
        kpt_weights=kpt_weights,
    )
