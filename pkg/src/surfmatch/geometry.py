"""Core geometry: point clouds, rigid transforms, exact neighbor queries.

All coordinates are in millimeters.  Every operation here is a pure function
over immutable inputs; a :class:`NeighborIndex` is read-only after
construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class InsufficientPointsError(ValueError):
    """A query or algorithm needs more points than the cloud provides."""


class DegenerateGeometryError(ValueError):
    """Point configuration does not determine the requested quantity."""


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 3:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (n, 3) point array, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class PointCloud:
    """Ordered set of 3-D points (millimeters)."""

    points: np.ndarray

    def __post_init__(self):
        pts = _as_points(self.points)
        if pts.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    @property
    def count(self) -> int:
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion: rotation (3x3, det +1) plus translation (mm)."""

    rotation: np.ndarray
    translation: np.ndarray

    _ORTHO_TOL = 1e-9

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(r.T @ r - np.eye(3)).max() > self._ORTHO_TOL:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > self._ORTHO_TOL:
            raise ValueError("rotation determinant is not +1 within 1e-9")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = _as_points(points)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def invert(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def as_flat12(self) -> list[float]:
        """Row-major [R | t] as 12 numbers."""
        m = np.hstack([self.rotation, self.translation.reshape(3, 1)])
        return [float(v) for v in m.reshape(-1)]

    @classmethod
    def from_flat12(cls, values) -> "RigidTransform":
        m = np.asarray(values, dtype=np.float64).reshape(3, 4)
        return cls(m[:, :3], m[:, 3])


@dataclass(frozen=True)
class CorrespondenceSet:
    """One-to-one (source index, target index) pairs."""

    pairs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if p.shape[0] > 0:
            if len(np.unique(p[:, 0])) != p.shape[0]:
                raise ValueError("duplicate source index in correspondence set")
            if len(np.unique(p[:, 1])) != p.shape[0]:
                raise ValueError("duplicate target index in correspondence set")
            if p.min() < 0:
                raise ValueError("negative correspondence index")
        object.__setattr__(self, "pairs", p)

    def __len__(self) -> int:
        return self.pairs.shape[0]

    @property
    def source_indices(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def target_indices(self) -> np.ndarray:
        return self.pairs[:, 1]

    def as_list(self) -> list[list[int]]:
        return [[int(i), int(j)] for i, j in self.pairs]


class NeighborIndex:
    """Exact spatial index over a point cloud (kd-tree backed).

    Queries return exactly what a brute-force scan would, including the
    tie-break rule: equidistant neighbors are ordered by lower point index.
    """

    def __init__(self, cloud: PointCloud):
        self._points = cloud.points
        self._tree = cKDTree(self._points)

    @property
    def count(self) -> int:
        return self._points.shape[0]

    def _exact_sorted(self, query: np.ndarray, candidates: np.ndarray):
        d = np.linalg.norm(self._points[candidates] - query, axis=1)
        order = np.lexsort((candidates, d))
        return candidates[order], d[order]

    def knn(self, query, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Indices and distances of the k nearest points, ascending."""
        query = np.asarray(query, dtype=np.float64).reshape(3)
        if k < 1:
            raise ValueError("k must be >= 1")
        if k > self.count:
            raise InsufficientPointsError(
                f"k={k} exceeds cloud size {self.count}"
            )
        d, _ = self._tree.query(query, k=k)
        dmax = float(np.atleast_1d(d)[-1])
        cand = np.asarray(self._tree.query_ball_point(query, dmax), dtype=np.intp)
        if cand.size < k:  # guard against boundary rounding in the tree
            cand = np.arange(self.count, dtype=np.intp)
        idx, dist = self._exact_sorted(query, cand)
        return idx[:k].astype(np.int64), dist[:k]

    def knn_batch(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized k-NN for many queries with the same exactness contract."""
        q = _as_points(queries)
        if k > self.count:
            raise InsufficientPointsError(
                f"k={k} exceeds cloud size {self.count}"
            )
        if k == self.count:
            idx = np.empty((q.shape[0], k), dtype=np.int64)
            dist = np.empty((q.shape[0], k))
            for row, query in enumerate(q):
                i, d = self._exact_sorted(query, np.arange(self.count, dtype=np.intp))
                idx[row], dist[row] = i, d
            return idx, dist
        d, i = self._tree.query(q, k=k + 1)
        idx = np.asarray(i[:, :k], dtype=np.int64)
        dist = np.asarray(d[:, :k], dtype=np.float64)
        # Re-resolve rows whose k-th neighbor is tied with the (k+1)-th, or
        # that contain internal ties, so the lower-index rule always holds.
        gaps = d[:, k] - d[:, k - 1]
        internal = np.min(np.diff(d[:, :k], axis=1), axis=1) if k > 1 else np.full(q.shape[0], np.inf)
        suspect = (gaps <= 1e-9 * (1.0 + d[:, k])) | (internal <= 1e-12 * (1.0 + d[:, k - 1]))
        for row in np.nonzero(suspect)[0]:
            ri, rd = self.knn(q[row], k)
            idx[row], dist[row] = ri, rd
        if not np.any(suspect):
            # recompute distances with the same formula as the exact path
            diff = self._points[idx] - q[:, None, :]
            dist = np.linalg.norm(diff, axis=2)
        return idx, dist

    def radius(self, query, radius_mm: float) -> tuple[np.ndarray, np.ndarray]:
        """All points with distance <= radius, sorted by (distance, index)."""
        query = np.asarray(query, dtype=np.float64).reshape(3)
        cand = np.asarray(
            self._tree.query_ball_point(query, float(radius_mm)), dtype=np.intp
        )
        if cand.size == 0:
            return np.empty(0, dtype=np.int64), np.empty(0)
        idx, dist = self._exact_sorted(query, cand)
        keep = dist <= radius_mm
        return idx[keep].astype(np.int64), dist[keep]

    def nearest_batch(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Single nearest neighbor per query (fast path for ICP)."""
        d, i = self._tree.query(_as_points(queries), k=1)
        return np.asarray(i, dtype=np.int64), np.asarray(d, dtype=np.float64)


def apply_rigid(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    """Apply a rigid transform to every point."""
    return PointCloud(t.apply(cloud.points))


def random_rigid(rng_seed: int, max_translation_mm: float) -> RigidTransform:
    """Seeded random rigid motion: uniform SO(3) rotation, translation
    uniform in the ball of radius ``max_translation_mm``.

    The rotation comes from a normalized 4-normal quaternion draw, which is
    uniform over SO(3).
    """
    if max_translation_mm < 0:
        raise ValueError("max_translation_mm must be >= 0")
    rng = np.random.default_rng(rng_seed)
    q = rng.normal(size=4)
    while np.linalg.norm(q) < 1e-12:
        q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    rotation = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    direction = rng.normal(size=3)
    while np.linalg.norm(direction) < 1e-12:
        direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    radius = max_translation_mm * rng.uniform() ** (1.0 / 3.0)
    return RigidTransform(rotation, direction * radius)


def knn(index: NeighborIndex, query, k: int) -> list[tuple[int, float]]:
    """k nearest neighbors as (index, distance), sorted ascending."""
    idx, dist = index.knn(query, k)
    return [(int(i), float(d)) for i, d in zip(idx, dist)]


def estimate_normals(
    cloud: PointCloud,
    k: int,
    viewpoint=None,
    outward: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point unit normals from k-NN covariance eigenvectors.

    The normal is the eigenvector of the smallest eigenvalue, flipped so it
    points toward ``viewpoint`` (cloud centroid by default) or away from it
    when ``outward`` is set.  Returns (normals, degenerate_mask): neighborhoods
    with covariance rank < 2 get a flagged, zeroed normal.
    """
    if k < 3:
        raise ValueError("normal estimation requires k >= 3")
    if k > cloud.count:
        raise InsufficientPointsError(f"k={k} exceeds cloud size {cloud.count}")
    vp = cloud.centroid() if viewpoint is None else np.asarray(viewpoint, dtype=np.float64)
    index = NeighborIndex(cloud)
    nbr_idx, _ = index.knn_batch(cloud.points, k)
    nbrs = cloud.points[nbr_idx]                      # (n, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals, eigvecs = np.linalg.eigh(cov)            # ascending eigenvalues
    normals = eigvecs[:, :, 0]
    degenerate = eigvals[:, 1] <= 1e-12 * np.maximum(eigvals[:, 2], 1e-12)

    to_vp = vp - cloud.points
    dots = np.einsum("ni,ni->n", normals, to_vp)
    flip = dots < 0
    normals[flip] = -normals[flip]
    # ambiguous orientation (normal perpendicular to viewpoint direction):
    # canonicalize by making the largest-magnitude component positive
    ambiguous = np.abs(dots) < 1e-12
    for i in np.nonzero(ambiguous)[0]:
        j = int(np.argmax(np.abs(normals[i])))
        if normals[i, j] < 0:
            normals[i] = -normals[i]
    if outward:
        normals = -normals
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    normals[degenerate] = 0.0
    return normals, degenerate
