"""Synthetic pre-/intra-operative surface pair generation.

Pipeline per sample: deform a liver-like closed surface with a smooth
procedural displacement field, crop the camera-facing region, subsample it
to a visibility ratio in [0.20, 0.24], perturb with bounded noise, and apply
a random rigid motion.  Ground-truth correspondences are tracked by
provenance (which source vertex produced each target point), so noise never
corrupts labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from .geometry import (
    CorrespondenceSet,
    InsufficientPointsError,
    PointCloud,
    RigidTransform,
    apply_rigid,
    random_rigid,
)

# Lipschitz bound on the displacement field: mm of displacement difference
# per mm of edge length, enforced by construction.
SMOOTHNESS_LIMIT = 0.5

# Fixed number of zero-displacement regions per simulated field.
N_BOUNDARY_SITES = 2
BOUNDARY_RAMP_MM = 30.0

VISIBILITY_RATIO_RANGE = (0.20, 0.24)


class EmptyCropError(ValueError):
    """A crop operation produced no points."""


class DeformationPlacementError(ValueError):
    """Force sites cannot be placed outside the boundary regions."""


@dataclass(frozen=True)
class SurfaceMesh:
    """Closed triangle mesh (vertices in mm)."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("vertices must be (n, 3)")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError("faces must be (m, 3)")
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def edges(self) -> np.ndarray:
        """Unique undirected edges as (e, 2) with first index smaller."""
        f = self.faces
        raw = np.vstack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        raw.sort(axis=1)
        return np.unique(raw, axis=0)

    def vertex_normals(self, positions: np.ndarray | None = None) -> np.ndarray:
        """Area-weighted outward vertex normals (faces must be oriented)."""
        pos = self.vertices if positions is None else positions
        tri = pos[self.faces]
        fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        normals = np.zeros_like(pos)
        for c in range(3):
            np.add.at(normals, self.faces[:, c], fn)
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        norms[norms < 1e-30] = 1.0
        return normals / norms

    def bbox_diagonal(self) -> float:
        ext = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.linalg.norm(ext))


@dataclass(frozen=True)
class DeformationParams:
    """Controls for the procedural deformation substitute.

    ``young_modulus_kpa`` and ``poisson_ratio`` are carried as metadata only;
    they do not parameterize the procedural field.
    """

    n_force_sites: int = 2
    force_region_radius_mm: float = 70.0
    boundary_radius_mm: float = 17.5
    max_displacement_target_mm: float = 11.0
    young_modulus_kpa: float = 3.5
    poisson_ratio: float = 0.35

    def __post_init__(self):
        if not 1 <= self.n_force_sites <= 3:
            raise ValueError("n_force_sites must be in 1..3")
        if not 15.0 <= self.boundary_radius_mm <= 20.0:
            raise ValueError("boundary_radius_mm must lie in [15, 20]")
        if self.force_region_radius_mm <= 0:
            raise ValueError("force_region_radius_mm must be positive")
        if self.max_displacement_target_mm < 0:
            raise ValueError("max_displacement_target_mm must be >= 0")


@dataclass(frozen=True)
class DeformationField:
    """Per-vertex displacement vectors (mm)."""

    displacement: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.displacement, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != 3:
            raise ValueError("displacement must be (n, 3)")
        object.__setattr__(self, "displacement", d)

    def max_magnitude(self) -> float:
        return float(np.linalg.norm(self.displacement, axis=1).max())


@dataclass(frozen=True)
class SamplePair:
    """One training/evaluation instance."""

    source: PointCloud
    target: PointCloud
    gt_matches: CorrespondenceSet
    gt_displacement: np.ndarray     # (n, 3): deformation plus rigid motion
    visibility_labels: np.ndarray   # (n,) uint8
    rigid: RigidTransform
    visibility_ratio: float

    def __post_init__(self):
        n, m = self.source.count, self.target.count
        labels = np.asarray(self.visibility_labels, dtype=np.uint8).reshape(n)
        disp = np.asarray(self.gt_displacement, dtype=np.float64).reshape(n, 3)
        if len(self.gt_matches) != m:
            raise ValueError("every target point needs exactly one gt source partner")
        if not np.array_equal(np.sort(self.gt_matches.target_indices), np.arange(m)):
            raise ValueError("gt matches must cover every target index once")
        expected = np.zeros(n, dtype=np.uint8)
        expected[self.gt_matches.source_indices] = 1
        if not np.array_equal(labels, expected):
            raise ValueError("visibility labels must mark exactly the matched sources")
        lo, hi = VISIBILITY_RATIO_RANGE
        if not lo - 1e-12 <= self.visibility_ratio <= hi + 1e-12:
            raise ValueError("visibility ratio outside [0.20, 0.24]")
        object.__setattr__(self, "visibility_labels", labels)
        object.__setattr__(self, "gt_displacement", disp)


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def generate_liver_mesh(
    rng_seed: int,
    n_vertices: int,
    perturbation_amplitude: float = 0.12,
) -> SurfaceMesh:
    """Closed, smooth, asymmetric blob at liver scale.

    An ellipsoid sampled with a Fibonacci spiral, radially perturbed by a few
    low-frequency bumps and rescaled so the bounding-box diagonal lands in
    [170, 230] mm.  Triangulation comes from the convex hull of the unit
    sphere samples, so the topology is a closed 2-manifold regardless of the
    perturbation.
    """
    if n_vertices < 500:
        raise ValueError("n_vertices must be >= 500")
    rng = np.random.default_rng(rng_seed)
    unit = _fibonacci_sphere(n_vertices)
    spin = random_rigid(int(rng.integers(0, 2**31 - 1)), 0.0)
    unit = unit @ spin.rotation.T

    hull = ConvexHull(unit)
    faces = hull.simplices.copy()
    tri = unit[faces]
    outward = np.einsum(
        "ij,ij->i", np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), tri.mean(axis=1)
    )
    flip = outward < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]

    factor = np.ones(n_vertices)
    for _ in range(4):
        center = rng.normal(size=3)
        center /= np.linalg.norm(center)
        amp = rng.uniform(-perturbation_amplitude, perturbation_amplitude)
        conc = rng.uniform(1.5, 3.5)
        factor += amp * np.exp(conc * (unit @ center - 1.0))
    semi_axes = np.array([1.0, 0.72, 0.5]) * rng.uniform(0.92, 1.08, size=3)
    verts = unit * factor[:, None] * semi_axes

    ext = verts.max(axis=0) - verts.min(axis=0)
    target_diag = rng.uniform(170.0, 230.0)
    verts *= target_diag / np.linalg.norm(ext)
    return SurfaceMesh(verts, faces)


def _wendland(r: np.ndarray) -> np.ndarray:
    """C2 compactly supported bump on [0, 1]."""
    r = np.clip(r, 0.0, 1.0)
    return (1.0 - r) ** 4 * (4.0 * r + 1.0)


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _edge_lipschitz(disp: np.ndarray, verts: np.ndarray, edges: np.ndarray) -> float:
    du = np.linalg.norm(disp[edges[:, 0]] - disp[edges[:, 1]], axis=1)
    dl = np.linalg.norm(verts[edges[:, 0]] - verts[edges[:, 1]], axis=1)
    return float((du / np.maximum(dl, 1e-12)).max())


def simulate_deformation(
    mesh: SurfaceMesh,
    params: DeformationParams,
    rng_seed: int,
) -> DeformationField:
    """Smooth displacement field from 1-3 compactly supported bumps.

    Displacements vanish exactly inside the zero-displacement boundary
    regions, the edge-wise Lipschitz constant is kept below
    ``SMOOTHNESS_LIMIT`` by graph smoothing, and the field is rescaled so the
    maximum magnitude equals ``max_displacement_target_mm`` exactly.
    """
    rng = np.random.default_rng(rng_seed)
    verts = mesh.vertices
    n = mesh.n_vertices

    b_idx = rng.choice(n, size=min(N_BOUNDARY_SITES, n), replace=False)
    b_centers = verts[b_idx]
    b_dist = np.linalg.norm(verts[:, None, :] - b_centers[None, :, :], axis=2)
    inside_boundary = (b_dist <= params.boundary_radius_mm).any(axis=1)
    eligible = np.nonzero(~inside_boundary)[0]
    if eligible.size == 0:
        raise DeformationPlacementError(
            "boundary regions cover all vertices; cannot place force sites"
        )

    sites = verts[rng.choice(eligible, size=params.n_force_sites, replace=True)]
    disp = np.zeros((n, 3))
    for site in sites:
        direction = rng.normal(size=3)
        direction /= max(np.linalg.norm(direction), 1e-12)
        magnitude = rng.uniform(0.5, 1.0)
        r = np.linalg.norm(verts - site, axis=1) / params.force_region_radius_mm
        disp += magnitude * _wendland(r)[:, None] * direction

    atten = np.ones(n)
    for b in range(b_centers.shape[0]):
        atten *= _smoothstep((b_dist[:, b] - params.boundary_radius_mm) / BOUNDARY_RAMP_MM)
    disp *= atten[:, None]
    disp[inside_boundary] = 0.0

    target = params.max_displacement_target_mm
    max_mag = float(np.linalg.norm(disp, axis=1).max())
    if target == 0.0 or max_mag < 1e-15:
        return DeformationField(np.zeros((n, 3)))

    edges = mesh.edges()
    neighbors_of = [[] for _ in range(n)]
    for a, b in edges:
        neighbors_of[a].append(b)
        neighbors_of[b].append(a)
    for _ in range(200):
        lip = _edge_lipschitz(disp, verts, edges)
        if lip * target / max_mag <= SMOOTHNESS_LIMIT * 0.98:
            break
        smoothed = disp.copy()
        for v in range(n):
            if inside_boundary[v] or not neighbors_of[v]:
                continue
            smoothed[v] = 0.5 * disp[v] + 0.5 * disp[neighbors_of[v]].mean(axis=0)
        disp = smoothed
        max_mag = float(np.linalg.norm(disp, axis=1).max())
        if max_mag < 1e-15:
            return DeformationField(np.zeros((n, 3)))
    disp *= target / max_mag
    return DeformationField(disp)


def crop_front_surface(
    mesh: SurfaceMesh,
    fld: DeformationField,
    view_dir: np.ndarray,
) -> tuple[PointCloud, np.ndarray]:
    """Deformed vertices facing the camera (normal against the view ray).

    Returns the front-facing deformed vertices and the map back to source
    vertex indices.
    """
    view = np.asarray(view_dir, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(view) - 1.0) > 1e-6:
        raise ValueError("view_dir must be a unit vector")
    deformed = mesh.vertices + fld.displacement
    normals = mesh.vertex_normals(deformed)
    front = normals @ (-view) > 0.0
    if not front.any():
        raise EmptyCropError("no vertices face the view direction")
    index_map = np.nonzero(front)[0].astype(np.int64)
    return PointCloud(deformed[front]), index_map


def visibility_crop(
    raw: PointCloud,
    index_map: np.ndarray,
    rng_seed: int,
    ratio_range: tuple[float, float] = VISIBILITY_RATIO_RANGE,
    n_source: int | None = None,
) -> tuple[PointCloud, np.ndarray]:
    """Keep the top points along a random direction to hit a visibility ratio.

    Projects every raw point onto a random unit vector, ranks by projection
    distance (ties by lower index) and keeps the top m points so that
    m / n_source lies inside ``ratio_range``.
    """
    if n_source is None:
        raise ValueError("n_source is required")
    lo, hi = ratio_range
    rng = np.random.default_rng(rng_seed)
    direction = rng.normal(size=3)
    direction /= max(np.linalg.norm(direction), 1e-12)

    m_lo = int(np.ceil(lo * n_source - 1e-9))
    m_hi = int(np.floor(hi * n_source + 1e-9))
    if m_lo > m_hi or m_lo < 1:
        raise ValueError(f"no integer target count satisfies ratio range for n={n_source}")
    if raw.count < m_lo:
        raise InsufficientPointsError(
            f"front surface has {raw.count} points; need at least {m_lo}"
        )
    ratio = rng.uniform(lo, hi)
    m = int(np.clip(round(ratio * n_source), m_lo, m_hi))
    m = min(m, raw.count)

    proj = raw.points @ direction
    order = np.lexsort((np.arange(raw.count), -proj))
    kept = np.sort(order[:m])
    return PointCloud(raw.points[kept]), np.asarray(index_map, dtype=np.int64)[kept]


def add_noise(cloud: PointCloud, max_mm: float, rng_seed: int) -> PointCloud:
    """Perturb each point by an independent vector uniform in the max_mm ball."""
    if max_mm < 0:
        raise ValueError("max_mm must be >= 0")
    rng = np.random.default_rng(rng_seed)
    dirs = rng.normal(size=(cloud.count, 3))
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    norms[norms < 1e-30] = 1.0
    # shrink by 1 ulp-scale margin so rounding can never exceed the bound
    radii = max_mm * (1.0 - 1e-9) * rng.uniform(size=(cloud.count, 1)) ** (1.0 / 3.0)
    return PointCloud(cloud.points + dirs / norms * radii)


def make_sample_pair(
    mesh: SurfaceMesh,
    params: DeformationParams,
    rng_seed: int,
    *,
    ratio_range: tuple[float, float] = VISIBILITY_RATIO_RANGE,
    noise_max_mm: float = 2.0,
    rigid_max_translation_mm: float = 20.0,
    rigid_override: RigidTransform | None = None,
) -> SamplePair:
    """Full generation pipeline for one source/target pair.

    Correspondences, visibility labels and the ground-truth displacement
    field (deformation plus rigid motion per source vertex) are tracked
    through every stage.
    """
    sub = np.random.SeedSequence(rng_seed).generate_state(5)
    fld = simulate_deformation(mesh, params, int(sub[0]))

    view_rng = np.random.default_rng(int(sub[1]))
    view = view_rng.normal(size=3)
    view /= max(np.linalg.norm(view), 1e-12)

    raw, idx_map = crop_front_surface(mesh, fld, view)
    cropped, src_idx = visibility_crop(
        raw, idx_map, int(sub[2]), ratio_range, n_source=mesh.n_vertices
    )
    noised = add_noise(cropped, noise_max_mm, int(sub[3]))
    rigid = (
        rigid_override
        if rigid_override is not None
        else random_rigid(int(sub[4]), rigid_max_translation_mm)
    )
    target = apply_rigid(noised, rigid)

    n = mesh.n_vertices
    m = target.count
    labels = np.zeros(n, dtype=np.uint8)
    labels[src_idx] = 1
    matches = CorrespondenceSet(np.column_stack([src_idx, np.arange(m)]))
    v_gt = rigid.apply(mesh.vertices + fld.displacement) - mesh.vertices
    return SamplePair(
        source=PointCloud(mesh.vertices),
        target=target,
        gt_matches=matches,
        gt_displacement=v_gt,
        visibility_labels=labels,
        rigid=rigid,
        visibility_ratio=m / n,
    )
