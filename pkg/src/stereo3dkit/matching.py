"""Set-based prediction-to-ground-truth assignment.

The pairwise cost combines a focal classification term with L1 and
generalized-IoU box terms; the optimal one-to-one assignment is found with a
potentials-based Hungarian solver.  The solver is written out here rather
than delegated so tie-breaking is pinned down: among equal-cost assignments
it returns the lexicographically smallest pairing, which keeps downstream
artifacts byte-stable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box2D, giou_2d

PROB_EPS = 1e-8


@dataclass(frozen=True)
class FocalParams:
    """alpha-balanced focal weighting; alpha in (0, 1), gamma >= 0."""

    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(eq=False)
class MatchProblem:
    """N predictions vs M ground-truth objects for one frame.

    class_probs is (N, K) per-class sigmoid probabilities; gt_classes holds
    indices into the same K classes.  Boxes are in absolute pixels and get
    normalized by the image size inside the cost.
    """

    class_probs: np.ndarray
    pred_boxes: Sequence[Box2D]
    gt_boxes: Sequence[Box2D]
    gt_classes: np.ndarray
    image_hw: tuple[int, int]

    def __post_init__(self) -> None:
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        self.gt_classes = np.asarray(self.gt_classes, dtype=np.int64)
        if self.class_probs.ndim != 2 or self.class_probs.shape[0] != len(self.pred_boxes):
            raise ValueError(
                f"class_probs {self.class_probs.shape} does not match "
                f"{len(self.pred_boxes)} predictions"
            )
        if len(self.gt_boxes) != len(self.gt_classes):
            raise ValueError("one class index per ground-truth box required")
        if len(self.gt_classes) and not (
            (self.gt_classes >= 0) & (self.gt_classes < self.class_probs.shape[1])
        ).all():
            raise ValueError("gt class index outside the class-probability columns")


def focal_class_cost(
    class_probs: np.ndarray,
    gt_class: int,
    fp: FocalParams = FocalParams(),
    literal_signs: bool = False,
) -> float:
    """Focal-style classification cost of assigning one prediction to a class.

    Sum of the positive focal term for the target class and the negative
    focal terms for every other class; lower is better, and the cost is
    nonnegative.  literal_signs=True instead adds the negative terms with a
    positive log (their sign-flipped printed form), which can go negative;
    both orderings prefer confident correct classifications.
    """
    p = np.clip(np.asarray(class_probs, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    pos = -fp.alpha * (1.0 - p[gt_class]) ** fp.gamma * np.log(p[gt_class])
    neg_all = (1.0 - fp.alpha) * p**fp.gamma * np.log(1.0 - p)
    if not literal_signs:
        neg_all = -neg_all
    neg = neg_all.sum() - neg_all[gt_class]
    return float(pos + neg)


def match_cost_matrix(
    problem: MatchProblem,
    fp: FocalParams = FocalParams(),
    lambda_l1: float = 5.0,
    lambda_giou: float = 2.0,
    literal_signs: bool = False,
) -> np.ndarray:
    """(N, M) assignment costs: focal class + lambda_l1 * L1 + lambda_giou * (1 - GIoU).

    Box L1 distance uses corner coordinates normalized by image width/height.
    With literal_signs=True the GIoU term enters as lambda_giou * giou
    (again the sign-flipped printed form); the default keeps every term a
    penalty so costs order the same way as detection quality.
    """
    n, m = len(problem.pred_boxes), len(problem.gt_boxes)
    ih, iw = problem.image_hw
    norm = np.array([iw, ih, iw, ih], dtype=np.float64)
    cost = np.zeros((n, m), dtype=np.float64)
    pred_arr = [b.as_array() / norm for b in problem.pred_boxes]
    gt_arr = [b.as_array() / norm for b in problem.gt_boxes]
    for j in range(m):
        k = int(problem.gt_classes[j])
        for i in range(n):
            c_cls = focal_class_cost(problem.class_probs[i], k, fp, literal_signs)
            c_l1 = np.abs(pred_arr[i] - gt_arr[j]).sum()
            g = giou_2d(problem.pred_boxes[i], problem.gt_boxes[j])
            c_giou = g if literal_signs else 1.0 - g
            cost[i, j] = c_cls + lambda_l1 * c_l1 + lambda_giou * c_giou
    return cost


@dataclass(frozen=True)
class Assignment:
    """Matched (prediction, ground truth) index pairs, sorted by prediction."""

    pairs: tuple[tuple[int, int], ...]
    total_cost: float


def _min_assignment_total(a: np.ndarray) -> float:
    """Minimum total cost assigning every row of a (M x N, M <= N) to a
    distinct column; shortest-augmenting-path with row/column potentials."""
    m, n = a.shape
    inf = float("inf")
    u = [0.0] * (m + 1)
    v = [0.0] * (n + 1)
    match = [0] * (n + 1)  # match[j] = 1-based row assigned to column j
    way = [0] * (n + 1)
    for i in range(1, m + 1):
        match[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = 0
            row = a[i0 - 1]
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    return float(sum(a[match[j] - 1, j - 1] for j in range(1, n + 1) if match[j]))


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost one-to-one assignment of all M columns to distinct rows.

    cost is (N, M) with M <= N and finite entries.  Among all minimum-cost
    assignments (equal within a 1e-9 relative tolerance) the returned pairing
    is the lexicographically smallest sequence of (row, column) pairs sorted
    by row, found by forcing candidate pairs in order and re-solving the
    remainder; an all-equal matrix therefore yields the identity pairing.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2D, got shape {cost.shape}")
    n_pred, n_gt = cost.shape
    if n_gt == 0:
        return Assignment(pairs=(), total_cost=0.0)
    if n_gt > n_pred:
        raise ValueError(f"need at least as many rows as columns, got {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")

    best_total = _min_assignment_total(cost.T)
    tol = 1e-9 * max(1.0, abs(best_total))

    # Fix pairs greedily in lexicographic order.  Pair (i, j) is kept when
    # some completion over the rows after i still reaches the optimal total;
    # a row with no workable column stays unassigned.
    remaining = list(range(n_gt))
    pairs: list[tuple[int, int]] = []
    prefix = 0.0
    i = 0
    while remaining:
        if n_pred - i < len(remaining):
            raise AssertionError("ran out of rows during tie canonicalization")
        chosen = -1
        enough_rows_after = n_pred - i - 1 >= len(remaining) - 1
        for j in remaining:
            if len(remaining) > 1 and not enough_rows_after:
                break
            rest = [c for c in remaining if c != j]
            if rest:
                sub = cost[i + 1 :, rest]
                completion = _min_assignment_total(sub.T)
            else:
                completion = 0.0
            if prefix + cost[i, j] + completion <= best_total + tol:
                chosen = j
                break
        if chosen >= 0:
            pairs.append((i, chosen))
            prefix += cost[i, chosen]
            remaining.remove(chosen)
        i += 1

    total = float(sum(cost[r, c] for r, c in pairs))
    return Assignment(pairs=tuple(pairs), total_cost=total)


def match_predictions(
    problem: MatchProblem,
    fp: FocalParams = FocalParams(),
    lambda_l1: float = 5.0,
    lambda_giou: float = 2.0,
) -> Assignment:
    """Build the cost matrix and solve it in one step."""
    if len(problem.gt_boxes) > len(problem.pred_boxes):
        raise ValueError(
            f"{len(problem.gt_boxes)} ground-truth objects but only "
            f"{len(problem.pred_boxes)} predictions"
        )
    cost = match_cost_matrix(problem, fp, lambda_l1, lambda_giou)
    return hungarian(cost)
