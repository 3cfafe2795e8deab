"""Bipartite set matching between predictions and ground-truth instances.

hungarian_match wraps scipy's linear-sum assignment and canonicalizes ties:
among all minimum-cost assignments it returns the one whose pair list,
sorted by prediction index, is lexicographically smallest. Canonicalization
uses a fix-and-check sweep, re-solving the reduced problem after tentatively
fixing each candidate pair.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import BoundingBox, PersonInstance

__all__ = [
    "Assignment",
    "CostWeights",
    "InfeasibleMatchError",
    "hungarian_match",
    "build_cost_matrix",
    "giou_xyxy",
]


class InfeasibleMatchError(ValueError):
    """Fewer predictions than ground truths: no total assignment exists."""


@dataclass(frozen=True)
class CostWeights:
    """Weights of the matching cost and the detection loss terms."""

    w_cls: float = 2.0
    w_box_l1: float = 5.0
    w_box_giou: float = 2.0
    w_kpt_l1: float = 5.0

    def __post_init__(self) -> None:
        for name in ("w_cls", "w_box_l1", "w_box_giou", "w_kpt_l1"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class Assignment:
    """Result of a match: (prediction, gt) pairs plus unmatched predictions."""

    pairs: tuple[tuple[int, int], ...]
    unmatched_predictions: tuple[int, ...]

    def __post_init__(self) -> None:
        preds = [p for p, _ in self.pairs]
        gts = [g for _, g in self.pairs]
        if len(set(preds)) != len(preds):
            raise ValueError("a prediction index appears twice")
        if len(set(gts)) != len(gts):
            raise ValueError("a gt index appears twice")
        if set(preds) & set(self.unmatched_predictions):
            raise ValueError("prediction listed as both matched and unmatched")

    @property
    def pred_to_gt(self) -> dict[int, int]:
        return dict(self.pairs)

    @property
    def gt_to_pred(self) -> dict[int, int]:
        return {g: p for p, g in self.pairs}


def _solve_total(cost: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian_match(cost: np.ndarray) -> Assignment:
    """Minimum-cost assignment of every gt (column) to a unique prediction (row).

    Requires M >= G and finite entries. Ties are broken deterministically:
    the returned pair list, sorted by prediction index, is the
    lexicographically smallest among all optimal assignments.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a 2-D matrix, got shape {cost.shape}")
    m, g = cost.shape
    if m < g:
        raise InfeasibleMatchError(f"{m} predictions cannot cover {g} ground truths")
    if g and not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    if g == 0:
        return Assignment(pairs=(), unmatched_predictions=tuple(range(m)))

    rows, cols = linear_sum_assignment(cost)
    best_total = float(cost[rows, cols].sum())
    tol = 1e-9 * (1.0 + abs(best_total))

    # Fix-and-check canonicalization: commit the smallest (pred, gt) pair
    # that still admits an optimal completion, then recurse on the rest.
    # Completions may only use predictions larger than the committed one,
    # because the final pair list is sorted by prediction index.
    fixed: list[tuple[int, int]] = []
    fixed_cost = 0.0
    free_gts = list(range(g))
    min_pred = 0
    while free_gts:
        committed = False
        for p in range(min_pred, m):
            remaining_preds = [q for q in range(p + 1, m)]
            for gt in free_gts:
                rest_gts = [c for c in free_gts if c != gt]
                if len(remaining_preds) < len(rest_gts):
                    continue
                if rest_gts:
                    sub = cost[np.ix_(remaining_preds, rest_gts)]
                    completion = _solve_total(sub)
                else:
                    completion = 0.0
                total = fixed_cost + cost[p, gt] + completion
                if total <= best_total + tol:
                    fixed.append((p, gt))
                    fixed_cost += float(cost[p, gt])
                    free_gts = rest_gts
                    min_pred = p + 1
                    committed = True
                    break
            if committed:
                break
        if not committed:  # pragma: no cover - guarded by feasibility above
            raise RuntimeError("canonicalization failed to complete an optimal assignment")

    matched_preds = {p for p, _ in fixed}
    return Assignment(
        pairs=tuple(fixed),
        unmatched_predictions=tuple(p for p in range(m) if p not in matched_preds),
    )


# ---------------------------------------------------------------------------
# Cost matrix
# ---------------------------------------------------------------------------

def giou_xyxy(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise generalized IoU for corner-format boxes, shapes (M,4),(G,4) -> (M,G)."""
    a = boxes_a[:, None, :]
    b = boxes_b[None, :, :]
    ix1 = np.maximum(a[..., 0], b[..., 0])
    iy1 = np.maximum(a[..., 1], b[..., 1])
    ix2 = np.minimum(a[..., 2], b[..., 2])
    iy2 = np.minimum(a[..., 3], b[..., 3])
    inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    iou = inter / np.maximum(union, 1e-12)
    ex1 = np.minimum(a[..., 0], b[..., 0])
    ey1 = np.minimum(a[..., 1], b[..., 1])
    ex2 = np.maximum(a[..., 2], b[..., 2])
    ey2 = np.maximum(a[..., 3], b[..., 3])
    enclose = np.clip(ex2 - ex1, 0.0, None) * np.clip(ey2 - ey1, 0.0, None)
    return iou - (enclose - union) / np.maximum(enclose, 1e-12)


def _cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    out = np.empty_like(boxes)
    out[..., 0] = boxes[..., 0] - boxes[..., 2] / 2.0
    out[..., 1] = boxes[..., 1] - boxes[..., 3] / 2.0
    out[..., 2] = boxes[..., 0] + boxes[..., 2] / 2.0
    out[..., 3] = boxes[..., 1] + boxes[..., 3] / 2.0
    return out


def build_cost_matrix(
    pred_scores: np.ndarray,
    pred_boxes: np.ndarray,
    pred_keypoints: np.ndarray,
    gts: Sequence[PersonInstance],
    weights: CostWeights,
) -> np.ndarray:
    """Matching cost between M predictions and G ground-truth instances.

    Entry (i, j) combines the classification gap (1 - score_i), box L1,
    (1 - gIoU) and the mean per-keypoint L1 over the gt's labeled keypoints.

    Args:
        pred_scores: (M,) scores in [0, 1].
        pred_boxes: (M, 4) normalized cxcywh.
        pred_keypoints: (M, K, 2) normalized coordinates.
        gts: ground-truth instances.
        weights: term weights.
    """
    m = pred_scores.shape[0]
    g = len(gts)
    if g == 0:
        return np.zeros((m, 0), dtype=np.float64)

    gt_boxes = np.stack([inst.box.as_array() for inst in gts])
    cls_term = (1.0 - np.asarray(pred_scores, dtype=np.float64))[:, None]
    box_l1 = np.abs(pred_boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=2)
    giou = giou_xyxy(_cxcywh_to_xyxy(pred_boxes), _cxcywh_to_xyxy(gt_boxes))

    kpt_term = np.zeros((m, g), dtype=np.float64)
    for j, inst in enumerate(gts):
        mask = inst.pose.labeled_mask
        if not mask.any():
            continue
        diff = np.abs(pred_keypoints[:, mask, :] - inst.pose.coords[mask][None, :, :])
        kpt_term[:, j] = diff.sum(axis=(1, 2)) / mask.sum()

    return (
        weights.w_cls * cls_term
        + weights.w_box_l1 * box_l1
        + weights.w_box_giou * (1.0 - giou)
        + weights.w_kpt_l1 * kpt_term
    )
