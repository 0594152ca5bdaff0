"""One-to-one label assignment between ground-truth cells and proposals, and the training loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import Tensor


@dataclass
class LossConfig:
    point_cost_weight: float = 0.05  # tau: cost per pixel of distance
    loc_weight: float = 2e-4  # lambda_loc
    bg_weight: float = 0.5  # CE weight of the background class

    def __post_init__(self):
        if self.point_cost_weight < 0 or self.loc_weight < 0 or self.bg_weight < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class CostMatrix:
    """``values[j, i]`` is the cost of assigning ground truth ``j`` to proposal ``i``."""

    values: np.ndarray
    location: np.ndarray
    classification: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("cost matrix contains non-finite entries")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class Assignment:
    matched: list[tuple[int, int]]
    num_proposals: int
    unmatched_proposals: set[int] = field(default_factory=set)

    def __post_init__(self):
        used = {p for _, p in self.matched}
        if len(used) != len(self.matched):
            raise ValueError("a proposal is assigned to more than one ground truth")
        self.unmatched_proposals = set(range(self.num_proposals)) - used

    @property
    def gt_indices(self) -> list[int]:
        return [g for g, _ in self.matched]

    @property
    def proposal_indices(self) -> list[int]:
        return [p for _, p in self.matched]


@dataclass
class LossBreakdown:
    cls_loss: Tensor
    loc_loss: Tensor
    total: Tensor

    def item(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("cls_loss", "loc_loss", "total")}


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def build_cost_matrix(final_points, class_probs, gt_points, gt_classes,
                      point_cost_weight: float = 0.05) -> CostMatrix:
    """Distance-plus-classification cost between ``N`` ground truths and ``M`` proposals.

    ``cost[j, i] = tau * ||final_points[i] - gt_points[j]|| - class_probs[i, gt_classes[j]]``
    """
    pts = _as_numpy(final_points).reshape(-1, 2)
    probs = _as_numpy(class_probs)
    gts = _as_numpy(gt_points).reshape(-1, 2)
    cls = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    n, m = len(gts), len(pts)
    if n > m:
        raise ValueError(
            f"{n} ground truths but only {m} proposals; use a smaller proposal interval"
        )
    loc = np.sqrt(((gts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    cls_term = probs[:, cls].T if n else np.zeros((0, m))
    return CostMatrix(point_cost_weight * loc - cls_term, loc, cls_term)


def hungarian_match(cost: CostMatrix | np.ndarray) -> Assignment:
    """Minimum-cost assignment of every ground truth (row) to a distinct proposal (column)."""
    values = cost.values if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("cost must be a 2-D array")
    if not np.all(np.isfinite(values)):
        raise ValueError("cost matrix contains non-finite entries")
    n, m = values.shape
    if n > m:
        raise ValueError(f"cannot assign {n} ground truths to {m} proposals one-to-one")
    rows, cols = linear_sum_assignment(values)
    return Assignment([(int(r), int(c)) for r, c in zip(rows, cols)], m)


def assignment_cost(cost: CostMatrix | np.ndarray, assignment: Assignment) -> float:
    values = cost.values if isinstance(cost, CostMatrix) else np.asarray(cost)
    return float(sum(values[g, p] for g, p in assignment.matched))


def match_image(points: Tensor, logits: Tensor, gt_points, gt_classes, cfg: LossConfig) -> Assignment:
    probs = logits.detach().softmax(-1)
    return hungarian_match(build_cost_matrix(points, probs, gt_points, gt_classes, cfg.point_cost_weight))


def compute_loss(points: Tensor, logits: Tensor, gt_points: Tensor, gt_classes: Tensor,
                 assignment: Assignment, cfg: LossConfig | None = None) -> LossBreakdown:
    """Loss for one image.

    ``points`` ``(M, 2)`` and ``logits`` ``(M, C + 1)`` are the matcher-side
    candidates; the last logit column is background.
    """
    cfg = cfg or LossConfig()
    m, c1 = logits.shape
    target = torch.full((m,), c1 - 1, dtype=torch.long, device=logits.device)
    gi = torch.as_tensor(assignment.gt_indices, dtype=torch.long, device=logits.device)
    pi = torch.as_tensor(assignment.proposal_indices, dtype=torch.long, device=logits.device)
    gt_classes = torch.as_tensor(gt_classes, dtype=torch.long, device=logits.device)
    if len(pi):
        target[pi] = gt_classes[gi]
    weight = torch.ones(c1, dtype=logits.dtype, device=logits.device)
    weight[-1] = cfg.bg_weight
    cls_loss = F.cross_entropy(logits, target, weight=weight)
    if len(pi):
        gt_points = torch.as_tensor(gt_points, dtype=points.dtype, device=points.device)
        loc_loss = ((points[pi] - gt_points[gi]) ** 2).sum(-1).mean()
    else:
        loc_loss = points.sum() * 0.0
    return LossBreakdown(cls_loss, loc_loss, cls_loss + cfg.loc_weight * loc_loss)


def batch_loss(output, targets, cfg: LossConfig | None = None) -> tuple[LossBreakdown, list[Assignment]]:
    """Match and score every image of a batch; losses are averaged over images.

    ``targets`` is a list of ``(gt_points (N, 2), gt_classes (N,))`` pairs.
    """
    cfg = cfg or LossConfig()
    pts, lgs = output.matcher_points, output.matcher_logits
    parts, assignments = [], []
    for b, (gp, gc) in enumerate(targets):
        a = match_image(pts[b], lgs[b], gp, gc, cfg)
        assignments.append(a)
        parts.append(compute_loss(pts[b], lgs[b], gp, gc, a, cfg))
    mean = lambda name: torch.stack([getattr(p, name) for p in parts]).mean()  # noqa: E731
    return LossBreakdown(mean("cls_loss"), mean("loc_loss"), mean("total")), assignments
