"""Match and registration quality metrics.

The inlier test at sigma = 0 degenerates (a strict distance inequality is
unsatisfiable), so it is defined as exact ground-truth index agreement.
An inlier ratio over zero predictions is undefined and reported as None,
never as 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CorrespondenceSet, PointCloud


@dataclass(frozen=True)
class MetricConfig:
    sigma_mm: tuple[float, ...] = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)

    def __post_init__(self):
        if any(s < 0 for s in self.sigma_mm):
            raise ValueError("sigma values must be >= 0")


def is_inlier(pred_j: int, gt_j: int, target: PointCloud, sigma: float) -> bool:
    """Predicted target within radius sigma of the true target point."""
    if sigma == 0.0:
        return pred_j == gt_j
    return bool(
        np.linalg.norm(target.points[gt_j] - target.points[pred_j]) < sigma
    )


def _count_inliers(
    matches: CorrespondenceSet,
    gt: CorrespondenceSet,
    target: PointCloud,
    sigma: float,
) -> int:
    gt_of_source = dict(zip(gt.source_indices.tolist(), gt.target_indices.tolist()))
    count = 0
    for i, j in matches.pairs:
        gt_j = gt_of_source.get(int(i))
        if gt_j is None:
            continue
        if is_inlier(int(j), gt_j, target, sigma):
            count += 1
    return count


def inlier_ratio(
    matches: CorrespondenceSet,
    gt: CorrespondenceSet,
    target: PointCloud,
    sigma: float,
) -> float | None:
    """Inliers over predictions; None (undefined) when nothing was predicted."""
    n_pred = len(matches)
    if n_pred == 0:
        return None
    return _count_inliers(matches, gt, target, sigma) / n_pred


def match_score(
    matches: CorrespondenceSet,
    gt: CorrespondenceSet,
    target: PointCloud,
    sigma: float,
) -> float:
    """Inliers over the target point count; zero predictions score 0."""
    m = target.count
    if m == 0:
        raise ValueError("target cloud is empty")
    return _count_inliers(matches, gt, target, sigma) / m


def registration_error(v_gt: np.ndarray, v_pred: np.ndarray) -> float:
    """Root mean square norm of per-point displacement differences."""
    a = np.asarray(v_gt, dtype=np.float64)
    b = np.asarray(v_pred, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"displacement shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))
