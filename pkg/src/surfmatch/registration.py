"""Rigid registration: Kabsch least-squares fit, RANSAC over putative
correspondences, and point-to-point ICP refinement.

RANSAC evaluates hypotheses in fixed order with a seeded sampler, so results
are deterministic; an optional confidence-based early stop trims iterations
without changing the decision rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    CorrespondenceSet,
    DegenerateGeometryError,
    NeighborIndex,
    PointCloud,
    RigidTransform,
)

_HYPOTHESIS_BATCH = 1024


class RegistrationFailure(RuntimeError):
    """Registration preconditions not met."""


@dataclass(frozen=True)
class RansacConfig:
    n_iterations: int = 50000
    sample_size: int = 3
    inlier_threshold_mm: float = 5.0
    rng_seed: int = 0
    early_stop_confidence: float | None = 0.999

    def __post_init__(self):
        if self.sample_size < 3:
            raise ValueError("sample_size must be >= 3")
        if self.inlier_threshold_mm <= 0:
            raise ValueError("inlier_threshold_mm must be positive")


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    convergence_mm: float = 1e-4
    max_corr_dist_mm: float = 10.0

    def __post_init__(self):
        if min(self.max_iterations, self.convergence_mm, self.max_corr_dist_mm) <= 0:
            raise ValueError("all ICP settings must be positive")


@dataclass
class RansacResult:
    transform: RigidTransform
    inliers: np.ndarray          # bool per input match
    success: bool
    n_hypotheses: int
    inlier_rms: float


@dataclass
class IcpResult:
    transform: RigidTransform
    rms_trace: list[float]
    converged: bool
    failed: bool                 # no correspondences within the gate


def kabsch(src_pts: np.ndarray, dst_pts: np.ndarray) -> RigidTransform:
    """Least-squares rigid fit src -> dst via SVD with reflection correction."""
    src = np.asarray(src_pts, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst_pts, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("source and destination must pair up")
    if src.shape[0] < 3:
        raise DegenerateGeometryError("rigid fit needs at least 3 point pairs")
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    h = (src - c_src).T @ (dst - c_dst)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-12 * max(s[0], 1e-30):
        raise DegenerateGeometryError("point pairs are collinear or coincident")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    translation = c_dst - rotation @ c_src
    return RigidTransform(rotation, translation)


def _batched_fit(src: np.ndarray, dst: np.ndarray):
    """Kabsch for a batch of minimal samples: (B, k, 3) x 2 -> R, t, valid."""
    c_src = src.mean(axis=1, keepdims=True)
    c_dst = dst.mean(axis=1, keepdims=True)
    h = np.einsum("bki,bkj->bij", src - c_src, dst - c_dst)
    u, s, vt = np.linalg.svd(h)
    valid = s[:, 1] > 1e-12 * np.maximum(s[:, 0], 1e-30)
    det = np.linalg.det(np.einsum("bij,bkj->bik", vt.transpose(0, 2, 1), u))
    signs = np.ones_like(s)
    signs[:, 2] = np.sign(det)
    r = np.einsum("bji,bj,bkj->bik", vt, signs, u)
    t = c_dst[:, 0, :] - np.einsum("bij,bj->bi", r, c_src[:, 0, :])
    return r, t, valid


def ransac_rigid(
    matches: CorrespondenceSet,
    source: PointCloud,
    target: PointCloud,
    cfg: RansacConfig,
) -> RansacResult:
    """Best rigid hypothesis by inlier count (ties: lower RMS), refit on its
    inliers.  An inlier is a match whose post-transform residual is below the
    threshold."""
    k = len(matches)
    if k < 3:
        raise RegistrationFailure(f"RANSAC needs at least 3 matches, got {k}")
    src = source.points[matches.source_indices]
    dst = target.points[matches.target_indices]

    rng = np.random.default_rng(cfg.rng_seed)
    best_count = -1
    best_rms = np.inf
    best_mask: np.ndarray | None = None
    best_r = np.eye(3)
    best_t = np.zeros(3)
    processed = 0
    required = cfg.n_iterations

    while processed < min(cfg.n_iterations, required):
        batch = min(_HYPOTHESIS_BATCH, cfg.n_iterations - processed)
        picks = rng.integers(0, k, size=(batch, cfg.sample_size))
        processed += batch
        distinct = np.all(
            np.sort(picks, axis=1)[:, 1:] != np.sort(picks, axis=1)[:, :-1], axis=1
        )
        r, t, valid = _batched_fit(src[picks], dst[picks])
        valid &= distinct
        if not valid.any():
            continue
        moved = np.einsum("bij,kj->bki", r, src) + t[:, None, :]
        residuals = np.linalg.norm(moved - dst[None, :, :], axis=2)
        inlier_masks = residuals < cfg.inlier_threshold_mm
        counts = np.where(valid, inlier_masks.sum(axis=1), -1)
        cand = np.nonzero(counts >= max(best_count, 1))[0]
        if cand.size:
            sq = np.where(inlier_masks[cand], residuals[cand] ** 2, 0.0)
            rms_cand = np.sqrt(sq.sum(axis=1) / counts[cand])
            for pos, b in enumerate(cand):
                c, rms = int(counts[b]), float(rms_cand[pos])
                if c > best_count or (c == best_count and rms < best_rms):
                    best_count, best_rms = c, rms
                    best_mask = inlier_masks[b].copy()
                    best_r, best_t = r[b], t[b]
        if cfg.early_stop_confidence is not None and best_count > 0:
            w = best_count / k
            p_bad = 1.0 - w**cfg.sample_size
            if p_bad <= 1e-12:
                required = processed
            else:
                required = int(
                    np.ceil(np.log(1.0 - cfg.early_stop_confidence) / np.log(p_bad))
                )

    if best_mask is None or best_count < 3:
        return RansacResult(
            transform=RigidTransform.identity(),
            inliers=np.zeros(k, dtype=bool),
            success=False,
            n_hypotheses=processed,
            inlier_rms=np.inf,
        )
    try:
        refit = kabsch(src[best_mask], dst[best_mask])
    except DegenerateGeometryError:
        refit = RigidTransform(best_r, best_t)
    residual = np.linalg.norm(refit.apply(src) - dst, axis=1)
    inliers = residual < cfg.inlier_threshold_mm
    rms = float(np.sqrt(np.mean(residual[inliers] ** 2))) if inliers.any() else np.inf
    return RansacResult(
        transform=refit,
        inliers=inliers,
        success=True,
        n_hypotheses=processed,
        inlier_rms=rms,
    )


def icp_refine(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform,
    cfg: IcpConfig,
) -> IcpResult:
    """Point-to-point ICP with a correspondence distance gate.

    Alternates gated nearest-neighbor correspondence with a Kabsch refit
    until the maximum point motion drops below ``convergence_mm``.  The RMS
    trace is kept non-increasing: a step that would raise it is discarded.
    """
    index = NeighborIndex(target)
    current = init
    trace: list[float] = []
    converged = False
    for _ in range(cfg.max_iterations):
        moved = current.apply(source.points)
        nn_idx, nn_dist = index.nearest_batch(moved)
        gate = nn_dist <= cfg.max_corr_dist_mm
        if not gate.any():
            return IcpResult(
                transform=current, rms_trace=trace, converged=False, failed=not trace
            )
        src_sel = source.points[gate]
        dst_sel = target.points[nn_idx[gate]]
        try:
            updated = kabsch(src_sel, dst_sel)
        except DegenerateGeometryError:
            break
        rms = float(
            np.sqrt(np.mean(np.linalg.norm(updated.apply(src_sel) - dst_sel, axis=1) ** 2))
        )
        if trace and rms > trace[-1]:
            break
        trace.append(rms)
        motion = float(
            np.linalg.norm(updated.apply(source.points) - moved, axis=1).max()
        )
        current = updated
        if motion < cfg.convergence_mm:
            converged = True
            break
    return IcpResult(transform=current, rms_trace=trace, converged=converged, failed=False)


def predicted_displacements(source: PointCloud, transform: RigidTransform) -> np.ndarray:
    """Per-point displacement implied by a rigid transform."""
    return transform.apply(source.points) - source.points


def transform_to_json(transform: RigidTransform) -> dict:
    return {
        "rotation": [float(v) for v in transform.rotation.reshape(-1)],
        "translation": [float(v) for v in transform.translation],
    }


def transform_from_json(obj: dict) -> RigidTransform:
    return RigidTransform(
        np.asarray(obj["rotation"], dtype=np.float64).reshape(3, 3),
        np.asarray(obj["translation"], dtype=np.float64),
    )
