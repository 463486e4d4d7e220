"""Fast Point Feature Histograms over voxel-downsampled clouds.

33-bin descriptor: three Darboux-frame angle features, 11 bins each,
percentage-normalized per block.  Configuration follows the de facto
standard: normals from a 2.5x voxel radius, features from a 5x voxel radius.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from math import atan2
from pathlib import Path

import numpy as np

from .geometry import DegenerateGeometryError, NeighborIndex, PointCloud

N_BINS = 11
DESCRIPTOR_WIDTH = 3 * N_BINS


@dataclass(frozen=True)
class FpfhConfig:
    voxel_mm: float = 5.0
    normal_radius_factor: float = 2.5
    feature_radius_factor: float = 5.0

    @property
    def normal_radius_mm(self) -> float:
        return self.normal_radius_factor * self.voxel_mm

    @property
    def feature_radius_mm(self) -> float:
        return self.feature_radius_factor * self.voxel_mm


@dataclass
class FpfhResult:
    descriptors: np.ndarray   # (n, 33) float64
    flagged: np.ndarray       # (n,) bool: no neighbors / degenerate normal


def voxel_downsample(cloud: PointCloud, voxel_mm: float) -> PointCloud:
    """One centroid per occupied voxel, ordered by voxel key."""
    if voxel_mm <= 0:
        raise ValueError("voxel_mm must be positive")
    keys = np.floor(cloud.points / voxel_mm).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    sorted_keys = keys[order]
    sorted_pts = cloud.points[order]
    boundaries = np.any(np.diff(sorted_keys, axis=0) != 0, axis=1)
    group_starts = np.concatenate([[0], np.nonzero(boundaries)[0] + 1])
    group_ends = np.concatenate([group_starts[1:], [cloud.count]])
    centroids = np.array(
        [sorted_pts[a:b].mean(axis=0) for a, b in zip(group_starts, group_ends)]
    )
    return PointCloud(centroids)


def pair_features(p1, n1, p2, n2):
    """Darboux angle features (alpha, phi, theta) and pair distance.

    The frame is anchored at the point whose normal makes the smaller angle
    with the connecting line, so swapping the arguments returns identical
    features.  Returns None when the frame is undefined (anchor normal
    parallel to the connecting line).
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    n1 = np.asarray(n1, dtype=np.float64)
    n2 = np.asarray(n2, dtype=np.float64)
    delta = p2 - p1
    d = float(np.linalg.norm(delta))
    if d < 1e-12:
        raise DegenerateGeometryError("coincident points have no pair features")
    line = delta / d
    a1 = float(n1 @ line)
    a2 = float(n2 @ line)
    if abs(a1) < abs(a2):  # anchor at p2: flip the line and swap roles
        n1, n2 = n2, n1
        line = -line
        a1 = -a2
    u = n1
    v = np.cross(line, u)
    v_norm = float(np.linalg.norm(v))
    if v_norm < 1e-12:
        return None
    v /= v_norm
    w = np.cross(u, v)
    alpha = float(v @ n2)
    phi = a1
    theta = atan2(float(w @ n2), float(u @ n2))
    return alpha, float(phi), theta, d


def _bin_index(value: float, lo: float, hi: float) -> int:
    idx = int(np.floor(N_BINS * (value - lo) / (hi - lo)))
    return min(max(idx, 0), N_BINS - 1)


def _pair_features_batch(p, n_p, q, n_q):
    """Vectorized Darboux features of point p against neighbor rows q."""
    delta = q - p
    d = np.linalg.norm(delta, axis=1)
    line = delta / d[:, None]
    a1 = line @ n_p
    a2 = np.einsum("kj,kj->k", line, n_q)
    swap = np.abs(a1) < np.abs(a2)
    u = np.where(swap[:, None], n_q, np.broadcast_to(n_p, q.shape))
    other = np.where(swap[:, None], np.broadcast_to(n_p, q.shape), n_q)
    line = np.where(swap[:, None], -line, line)
    phi = np.where(swap, -a2, a1)
    v = np.cross(line, u)
    v_norm = np.linalg.norm(v, axis=1)
    defined = v_norm > 1e-12
    v = v / np.maximum(v_norm, 1e-300)[:, None]
    w = np.cross(u, v)
    alpha = np.einsum("kj,kj->k", v, other)
    theta = np.arctan2(
        np.einsum("kj,kj->k", w, other), np.einsum("kj,kj->k", u, other)
    )
    return alpha, phi, theta, defined


def _spfh(points, normals, valid, index, radius_mm):
    n = points.shape[0]
    hists = np.zeros((n, DESCRIPTOR_WIDTH))
    neighbor_lists: list[np.ndarray] = []
    neighbor_dists: list[np.ndarray] = []
    for i in range(n):
        idx, dist = index.radius(points[i], radius_mm)
        keep = (idx != i) & valid[idx]
        idx, dist = idx[keep], dist[keep]
        neighbor_lists.append(idx)
        neighbor_dists.append(dist)
        if not valid[i] or idx.size == 0:
            continue
        alpha, phi, theta, defined = _pair_features_batch(
            points[i], normals[i], points[idx], normals[idx]
        )
        if not defined.any():
            continue
        alpha, phi, theta = alpha[defined], phi[defined], theta[defined]
        for values, lo, hi, block in (
            (alpha, -1.0, 1.0, 0),
            (phi, -1.0, 1.0, 1),
            (theta, -np.pi, np.pi, 2),
        ):
            bins = np.clip(
                np.floor(N_BINS * (values - lo) / (hi - lo)).astype(int), 0, N_BINS - 1
            )
            np.add.at(hists[i], block * N_BINS + bins, 1.0)
        hists[i] *= 100.0 / defined.sum()
    return hists, neighbor_lists, neighbor_dists


def compute_fpfh(
    cloud: PointCloud,
    normals: np.ndarray,
    radius_mm: float,
    degenerate: np.ndarray | None = None,
) -> FpfhResult:
    """FPFH(p) = SPFH(p) + mean over neighbors of SPFH(k) / distance(k).

    Points flagged degenerate (or without radius neighbors) receive an
    all-zero descriptor and are excluded as neighbors of other points.
    """
    pts = cloud.points
    n = cloud.count
    normals = np.asarray(normals, dtype=np.float64)
    valid = np.ones(n, dtype=bool) if degenerate is None else ~np.asarray(degenerate, dtype=bool)
    index = NeighborIndex(cloud)
    spfh, nbr_idx, nbr_dist = _spfh(pts, normals, valid, index, radius_mm)

    out = np.zeros((n, DESCRIPTOR_WIDTH))
    flagged = np.zeros(n, dtype=bool)
    for i in range(n):
        idx, dist = nbr_idx[i], nbr_dist[i]
        if not valid[i] or idx.size == 0:
            flagged[i] = True
            continue
        weights = 1.0 / np.maximum(dist, 1e-12)
        combined = spfh[i] + (weights[:, None] * spfh[idx]).sum(axis=0) / idx.size
        for block in range(3):
            lo, hi = block * N_BINS, (block + 1) * N_BINS
            s = combined[lo:hi].sum()
            if s > 0:
                out[i, lo:hi] = combined[lo:hi] * (100.0 / s)
    return FpfhResult(descriptors=out, flagged=flagged)


def estimate_normals_radius(
    cloud: PointCloud,
    radius_mm: float,
    viewpoint=None,
    outward: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Radius-neighborhood covariance normals (for FPFH preprocessing)."""
    pts = cloud.points
    vp = cloud.centroid() if viewpoint is None else np.asarray(viewpoint, dtype=np.float64)
    index = NeighborIndex(cloud)
    normals = np.zeros((cloud.count, 3))
    degenerate = np.zeros(cloud.count, dtype=bool)
    for i in range(cloud.count):
        idx, _ = index.radius(pts[i], radius_mm)
        if idx.size < 3:
            degenerate[i] = True
            continue
        nbrs = pts[idx]
        centered = nbrs - nbrs.mean(axis=0)
        cov = centered.T @ centered / idx.size
        w, vecs = np.linalg.eigh(cov)
        if w[1] <= 1e-12 * max(w[2], 1e-12):
            degenerate[i] = True
            continue
        normal = vecs[:, 0]
        dot = normal @ (vp - pts[i])
        if dot < 0:
            normal = -normal
        elif abs(dot) < 1e-12:
            j = int(np.argmax(np.abs(normal)))
            if normal[j] < 0:
                normal = -normal
        if outward:
            normal = -normal
        normals[i] = normal / np.linalg.norm(normal)
    return normals, degenerate


def export_csv(path, result: FpfhResult) -> None:
    """One row per point, 33 descriptor columns."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"bin_{i}" for i in range(DESCRIPTOR_WIDTH)])
        for row in result.descriptors:
            writer.writerow([repr(float(v)) for v in row])
