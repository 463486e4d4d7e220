"""Dataset directory layout, manifest handling and train/test split.

One subdirectory per sample holding source.ply, target.ply, meta.json,
matches.json and displacement.json; a manifest.json at the root lists all
samples with their split assignment.  Splits are by mesh identity so that
test meshes are never seen in training.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .geometry import CorrespondenceSet, PointCloud, RigidTransform
from .ply import PlyContents, read_ply, write_ply
from .synth import (
    DeformationParams,
    SamplePair,
    generate_liver_mesh,
    make_sample_pair,
)

MANIFEST_VERSION = 1


class DatasetError(ValueError):
    """Problem with an on-disk dataset."""


class SplitLeakageError(DatasetError):
    """Train and test splits share a mesh identity."""


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    mesh_id: str
    split: str
    directory: str


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    samples: list[SampleRecord]
    meta: dict

    def records(self, split: str | None = None) -> list[SampleRecord]:
        if split is None:
            return list(self.samples)
        return [s for s in self.samples if s.split == split]

    def mesh_ids(self, split: str) -> set[str]:
        return {s.mesh_id for s in self.samples if s.split == split}

    def check_split_disjoint(self) -> None:
        overlap = self.mesh_ids("train") & self.mesh_ids("test")
        if overlap:
            raise SplitLeakageError(
                f"meshes appear in both splits: {sorted(overlap)}"
            )


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def write_sample(directory, pair: SamplePair, meta: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_ply(directory / "source.ply", PlyContents(points=pair.source.points), binary=True)
    write_ply(directory / "target.ply", PlyContents(points=pair.target.points), binary=True)
    _dump_json(directory / "matches.json", pair.gt_matches.as_list())
    _dump_json(directory / "displacement.json", pair.gt_displacement.tolist())
    record = dict(meta)
    record["rigid"] = pair.rigid.as_flat12()
    record["visibility_ratio"] = pair.visibility_ratio
    _dump_json(directory / "meta.json", record)


def read_sample(directory) -> tuple[SamplePair, dict]:
    directory = Path(directory)
    source = PointCloud(read_ply(directory / "source.ply").points)
    target = PointCloud(read_ply(directory / "target.ply").points)
    matches = CorrespondenceSet(
        np.asarray(json.loads((directory / "matches.json").read_text()), dtype=np.int64)
    )
    displacement = np.asarray(
        json.loads((directory / "displacement.json").read_text()), dtype=np.float64
    )
    meta = json.loads((directory / "meta.json").read_text())
    rigid = RigidTransform.from_flat12(meta["rigid"])
    labels = np.zeros(source.count, dtype=np.uint8)
    labels[matches.source_indices] = 1
    pair = SamplePair(
        source=source,
        target=target,
        gt_matches=matches,
        gt_displacement=displacement,
        visibility_labels=labels,
        rigid=rigid,
        visibility_ratio=float(meta["visibility_ratio"]),
    )
    return pair, meta


def _sample_seed(master_seed: int, mesh_index: int, sample_index: int) -> int:
    return int(
        np.random.SeedSequence([master_seed, mesh_index, sample_index]).generate_state(1)[0]
    )


def draw_sample_params(rng: np.random.Generator) -> DeformationParams:
    """Per-sample deformation parameters within the study's ranges."""
    return DeformationParams(
        n_force_sites=int(rng.integers(1, 4)),
        force_region_radius_mm=float(rng.uniform(60.0, 80.0)),
        boundary_radius_mm=float(rng.uniform(15.0, 20.0)),
        max_displacement_target_mm=float(rng.uniform(7.0, 15.0)),
        young_modulus_kpa=float(rng.uniform(2.0, 5.0)),
        poisson_ratio=0.35,
    )


def generate_dataset(
    out_dir,
    n_meshes: int,
    samples_per_mesh: int,
    seed: int,
    *,
    n_vertices: int = 1500,
    test_meshes: int | None = None,
    noise_max_mm: float = 2.0,
    force: bool = False,
    config_echo: dict | None = None,
) -> DatasetManifest:
    """Generate meshes x samples with a manifest and mesh-identity split.

    Deterministic for a fixed seed; refuses to touch a directory holding a
    previous manifest unless ``force`` is set.
    """
    if n_meshes < 1:
        raise ValueError("n_meshes must be >= 1")
    if samples_per_mesh < 1:
        raise ValueError("samples_per_mesh must be >= 1")
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists() and not force:
        raise DatasetError(
            f"{manifest_path} already exists; pass force to overwrite"
        )
    out_dir.mkdir(parents=True, exist_ok=True)

    if test_meshes is None:
        test_meshes = max(1, n_meshes // 8) if n_meshes > 1 else 0
    if test_meshes >= n_meshes and n_meshes > 1:
        raise ValueError("test_meshes must leave at least one training mesh")

    records: list[SampleRecord] = []
    for mesh_i in range(n_meshes):
        mesh_id = f"mesh{mesh_i:03d}"
        split = "test" if mesh_i >= n_meshes - test_meshes else "train"
        mesh_seed = _sample_seed(seed, mesh_i, -1 & 0xFFFFFFFF)
        mesh = generate_liver_mesh(mesh_seed, n_vertices)
        for sample_j in range(samples_per_mesh):
            sample_seed = _sample_seed(seed, mesh_i, sample_j)
            rng = np.random.default_rng(sample_seed)
            params = draw_sample_params(rng)
            pair = make_sample_pair(
                mesh, params, sample_seed, noise_max_mm=noise_max_mm
            )
            sample_id = f"{mesh_id}_sample{sample_j:04d}"
            meta = {
                "sample_id": sample_id,
                "mesh_id": mesh_id,
                "seed": sample_seed,
                "noise_max_mm": noise_max_mm,
                "params": asdict(params),
            }
            write_sample(out_dir / sample_id, pair, meta)
            records.append(SampleRecord(sample_id, mesh_id, split, sample_id))

    manifest = DatasetManifest(
        root=out_dir,
        seed=seed,
        samples=records,
        meta=dict(config_echo or {}),
    )
    _dump_json(
        manifest_path,
        {
            "format_version": MANIFEST_VERSION,
            "seed": seed,
            "n_meshes": n_meshes,
            "samples_per_mesh": samples_per_mesh,
            "n_vertices": n_vertices,
            "samples": [asdict(r) for r in records],
            "meta": manifest.meta,
        },
    )
    return manifest


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found at {manifest_path}")
    raw = json.loads(manifest_path.read_text())
    if raw.get("format_version") != MANIFEST_VERSION:
        raise DatasetError(
            f"unsupported manifest version {raw.get('format_version')}"
        )
    records = [SampleRecord(**r) for r in raw["samples"]]
    return DatasetManifest(
        root=manifest_path.parent,
        seed=int(raw["seed"]),
        samples=records,
        meta=raw.get("meta", {}),
    )


def load_split(manifest: DatasetManifest, split: str) -> list[tuple[SampleRecord, SamplePair]]:
    out = []
    for rec in manifest.records(split):
        pair, _ = read_sample(manifest.root / rec.directory)
        out.append((rec, pair))
    return out
