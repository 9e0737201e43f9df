"""Bipartite assignment and the cost matrices shared by training,
alignment, and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import BoundingBox, giou, iou_matrix

# DETR-lineage matching weights (classification, L1, GIoU) and focal constants.
MATCH_WEIGHTS = (2.0, 5.0, 2.0)
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class Assignment:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    unmatched_rows: list[int] = field(default_factory=list)
    unmatched_cols: list[int] = field(default_factory=list)

    def total_cost(self, costs: np.ndarray) -> float:
        return float(sum(costs[r, c] for r, c in self.pairs))


def hungarian(costs: np.ndarray) -> Assignment:
    """Minimum-cost maximum-cardinality assignment over finite-cost pairs.

    +inf entries forbid a pair; NaN entries are rejected. Rows/cols left
    over (rectangular input or all-forbidden) come back unmatched.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {costs.shape}")
    rows, cols = costs.shape
    if rows == 0 or cols == 0:
        return Assignment([], list(range(rows)), list(range(cols)))
    if np.isnan(costs).any():
        raise ValueError("cost matrix contains NaN")

    finite = np.isfinite(costs)
    if not finite.any():
        return Assignment([], list(range(rows)), list(range(cols)))

    # Replace forbidden pairs with a penalty big enough that the solver first
    # maximizes the number of finite pairs, then minimizes their total cost.
    lo = costs[finite].min()
    hi = costs[finite].max()
    penalty = (hi - lo + 1.0) * (min(rows, cols) + 1)
    work = np.where(finite, costs - lo, penalty)
    r_idx, c_idx = linear_sum_assignment(work)

    pairs = [(int(r), int(c)) for r, c in zip(r_idx, c_idx) if finite[r, c]]
    matched_r = {r for r, _ in pairs}
    matched_c = {c for _, c in pairs}
    return Assignment(
        pairs,
        [r for r in range(rows) if r not in matched_r],
        [c for c in range(cols) if c not in matched_c],
    )


def iou_cost(preds: list[BoundingBox], refs: list[BoundingBox]) -> np.ndarray:
    """Negated IoU, the alignment/evaluation matching cost."""
    return -iou_matrix(preds, refs)


def focal_cost(score: float, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> float:
    """Focal matching cost of assigning a positive label to this score."""
    s = min(max(score, 1e-8), 1.0 - 1e-8)
    pos = alpha * (1.0 - s) ** gamma * (-math.log(s))
    neg = (1.0 - alpha) * s ** gamma * (-math.log(1.0 - s))
    return pos - neg


def detr_cost(pred_scores: np.ndarray, pred_boxes: list[BoundingBox],
              gt_boxes: list[BoundingBox],
              weights: tuple[float, float, float] = MATCH_WEIGHTS) -> np.ndarray:
    """Detection-matching cost: w_cls*focal + w_l1*L1 + w_giou*(1 - GIoU)."""
    pred_scores = np.asarray(pred_scores, dtype=np.float64)
    if pred_scores.size and (pred_scores.min() < 0.0 or pred_scores.max() > 1.0):
        raise ValueError("scores must lie in [0, 1]")
    if pred_scores.size != len(pred_boxes):
        raise ValueError("pred_scores and pred_boxes length mismatch")
    w_cls, w_l1, w_giou = weights
    n, m = len(pred_boxes), len(gt_boxes)
    costs = np.zeros((n, m))
    for i in range(n):
        cls_term = w_cls * focal_cost(float(pred_scores[i]))
        pa = pred_boxes[i].as_array()
        for j in range(m):
            l1 = float(np.abs(pa - gt_boxes[j].as_array()).sum())
            costs[i, j] = cls_term + w_l1 * l1 + w_giou * (1.0 - giou(pred_boxes[i], gt_boxes[j]))
    return costs
