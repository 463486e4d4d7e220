"""Command-line entry point.

Subcommands: gen-data, train, match, register, eval, export-vis.
Global flags: --seed, --config, --out, --force.  Option precedence is
CLI flag > config file > built-in default, and the effective configuration
is echoed into every output's meta block.  Failures exit nonzero with a
machine-readable error JSON on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .benchmark import (
    BenchmarkConfig,
    FpfhMethod,
    GroundTruthMethod,
    LearnedMethod,
    format_report_table,
    report_to_json,
    run_benchmark,
    write_per_sample_csv,
)
from .dataset import (
    DatasetError,
    generate_dataset,
    load_manifest,
    load_split,
    read_sample,
)
from .geometry import CorrespondenceSet, PointCloud
from .matcher import init_params, load_checkpoint, match, save_checkpoint
from .metrics import MetricConfig
from .ply import PlyContents, write_ply
from .registration import (
    IcpConfig,
    RansacConfig,
    icp_refine,
    ransac_rigid,
    transform_to_json,
)
from .training import TrainConfig, train, write_loss_csv

# per-command option tables: name -> (type, default)
_OPTIONS: dict[str, dict[str, tuple]] = {
    "gen-data": {
        "meshes": (int, 4),
        "samples": (int, 25),
        "n_vertices": (int, 1500),
        "test_meshes": (int, None),
        "noise_max_mm": (float, 2.0),
    },
    "train": {
        "data": (str, None),
        "epochs": (int, 35),
        "batch_size": (int, 1),
        "lr": (float, 0.05),
        "lr_decay": (float, 0.95),
        "d": (int, 64),
        "k": (int, 16),
        "superpoints": (int, 256),
    },
    "match": {
        "data": (str, None),
        "checkpoint": (str, None),
        "sample": (str, None),
    },
    "register": {
        "data": (str, None),
        "sample": (str, None),
        "matches": (str, None),
        "ransac_iterations": (int, 50000),
        "inlier_threshold_mm": (float, 5.0),
        "icp_iterations": (int, 50),
        "max_corr_dist_mm": (float, 10.0),
    },
    "eval": {
        "data": (str, None),
        "split": (str, "test"),
        "methods": (str, "ground_truth,fpfh,learned"),
        "checkpoint": (str, None),
        "ransac_iterations": (int, 50000),
        "inlier_threshold_mm": (float, 5.0),
    },
    "export-vis": {
        "data": (str, None),
        "sample": (str, None),
        "matches": (str, None),
    },
}

GRAY = (128, 128, 128)
SOURCE_COLOR = (31, 119, 180)
TARGET_COLOR = (214, 39, 40)


class CliError(ValueError):
    """User-facing command-line failure."""


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surfmatch",
        description="Surface matching and rigid registration toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, options in _OPTIONS.items():
        p = sub.add_parser(command)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--force", action="store_true", default=None)
        for name, (typ, _default) in options.items():
            p.add_argument(f"--{name.replace('_', '-')}", type=typ, default=None)
    return parser


def _merge_config(command: str, args: argparse.Namespace) -> dict:
    """flag > config file > default; unknown config keys are rejected."""
    spec = _OPTIONS[command]
    effective = {name: default for name, (_t, default) in spec.items()}
    effective.update({"seed": 0, "out": None, "force": False})

    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        raw = json.loads(path.read_text())
        if not isinstance(raw, dict):
            raise CliError("config file must hold a JSON object")
        for section in raw:
            if section not in ("global", command) and section not in _OPTIONS:
                raise CliError(f"unknown config section: {section}")
        for section in ("global", command):
            for key, value in raw.get(section, {}).items():
                if key in ("seed", "out", "force"):
                    effective[key] = value
                elif key in spec:
                    effective[key] = value
                else:
                    raise CliError(f"unknown config key '{key}' in section '{section}'")

    for key in spec:
        flag = getattr(args, key, None)
        if flag is not None:
            effective[key] = flag
    for key in ("seed", "out", "force"):
        flag = getattr(args, key, None)
        if flag is not None:
            effective[key] = flag
    return effective


def _require(cfg: dict, *keys: str) -> None:
    for key in keys:
        if cfg.get(key) in (None, ""):
            raise CliError(f"--{key.replace('_', '-')} is required")


def _meta_block(command: str, cfg: dict) -> dict:
    echo = {k: v for k, v in cfg.items() if k != "force"}
    return {"command": command, "config": echo}


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def cmd_gen_data(cfg: dict) -> int:
    _require(cfg, "out")
    if cfg["samples"] < 1:
        raise CliError("--samples must be >= 1")
    if cfg["meshes"] < 1:
        raise CliError("--meshes must be >= 1")
    generate_dataset(
        cfg["out"],
        n_meshes=cfg["meshes"],
        samples_per_mesh=cfg["samples"],
        seed=cfg["seed"],
        n_vertices=cfg["n_vertices"],
        test_meshes=cfg["test_meshes"],
        noise_max_mm=cfg["noise_max_mm"],
        force=cfg["force"],
        config_echo=_meta_block("gen-data", cfg),
    )
    print(f"dataset written to {cfg['out']}")
    return 0


def cmd_train(cfg: dict) -> int:
    _require(cfg, "data", "out")
    manifest = load_manifest(cfg["data"])
    params = init_params(
        rng_seed=cfg["seed"],
        d=cfg["d"],
        k_neighbors=cfg["k"],
        n_superpoints=cfg["superpoints"],
    )
    config = TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["lr"],
        lr_decay=cfg["lr_decay"],
        rng_seed=cfg["seed"],
    )
    params, log = train(manifest, params, config)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.ckpt", params)
    write_loss_csv(out / "loss.csv", log)
    _dump_json(out / "train_meta.json", _meta_block("train", cfg))
    print(f"checkpoint and loss log written to {out}")
    return 0


def _load_matches_file(path: Path) -> CorrespondenceSet:
    raw = json.loads(path.read_text())
    pairs = raw["pairs"] if isinstance(raw, dict) else raw
    return CorrespondenceSet(np.asarray(pairs, dtype=np.int64).reshape(-1, 2))


def cmd_match(cfg: dict) -> int:
    _require(cfg, "data", "checkpoint", "sample", "out")
    manifest = load_manifest(cfg["data"])
    params = load_checkpoint(cfg["checkpoint"])
    sample, _meta = read_sample(manifest.root / cfg["sample"])
    result = match(sample.source, sample.target, params)
    pairs = result.matches.as_list()
    confidence = [
        float(result.confidence[i, j]) for i, j in result.matches.pairs
    ]
    out = Path(cfg["out"])
    _dump_json(
        out / "matches.json",
        {
            "format_version": 1,
            "pairs": pairs,
            "confidence": confidence,
            "meta": _meta_block("match", cfg),
        },
    )
    print(f"{len(pairs)} matches written to {out / 'matches.json'}")
    return 0


def cmd_register(cfg: dict) -> int:
    _require(cfg, "data", "sample", "out")
    manifest = load_manifest(cfg["data"])
    sample_dir = manifest.root / cfg["sample"]
    sample, _meta = read_sample(sample_dir)
    matches_path = (
        Path(cfg["matches"]) if cfg["matches"] else sample_dir / "matches.json"
    )
    matches = _load_matches_file(matches_path)
    ransac_cfg = RansacConfig(
        n_iterations=cfg["ransac_iterations"],
        inlier_threshold_mm=cfg["inlier_threshold_mm"],
        rng_seed=cfg["seed"],
    )
    icp_cfg = IcpConfig(
        max_iterations=cfg["icp_iterations"],
        max_corr_dist_mm=cfg["max_corr_dist_mm"],
    )
    ransac = ransac_rigid(matches, sample.source, sample.target, ransac_cfg)
    report = {
        "ransac_success": ransac.success,
        "inlier_count": int(ransac.inliers.sum()),
        "n_matches": len(matches),
        "rms_trace": [],
        "icp_converged": False,
        "icp_failed": False,
        "meta": _meta_block("register", cfg),
    }
    out = Path(cfg["out"])
    if ransac.success:
        icp = icp_refine(sample.source, sample.target, ransac.transform, icp_cfg)
        report["rms_trace"] = icp.rms_trace
        report["icp_converged"] = icp.converged
        report["icp_failed"] = icp.failed
        final = icp.transform
        _dump_json(
            out / "transform.json",
            {**transform_to_json(final), "meta": _meta_block("register", cfg)},
        )
    _dump_json(out / "report.json", report)
    print(f"registration report written to {out / 'report.json'}")
    return 0


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "data", "out")
    manifest = load_manifest(cfg["data"])
    names = [m.strip() for m in cfg["methods"].split(",") if m.strip()]
    methods = []
    for name in names:
        if name == "ground_truth":
            methods.append(GroundTruthMethod())
        elif name == "fpfh":
            methods.append(FpfhMethod())
        elif name == "learned":
            _require(cfg, "checkpoint")
            methods.append(LearnedMethod(load_checkpoint(cfg["checkpoint"])))
        else:
            raise CliError(f"unknown method '{name}'")
    records = load_split(manifest, cfg["split"])
    if not records:
        raise CliError(f"no samples in split '{cfg['split']}'")
    bench_cfg = BenchmarkConfig(
        metrics=MetricConfig(),
        ransac=RansacConfig(
            n_iterations=cfg["ransac_iterations"],
            inlier_threshold_mm=cfg["inlier_threshold_mm"],
            rng_seed=cfg["seed"],
        ),
        icp=IcpConfig(),
    )
    report = run_benchmark(
        [(rec.sample_id, pair) for rec, pair in records], methods, bench_cfg
    )
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(
        out / "report.json",
        {**report_to_json(report), "meta": _meta_block("eval", cfg)},
    )
    (out / "report.txt").write_text(format_report_table(report) + "\n")
    write_per_sample_csv(out / "per_sample.csv", report)
    print(format_report_table(report))
    return 0


def cmd_export_vis(cfg: dict) -> int:
    _require(cfg, "data", "sample", "out")
    manifest = load_manifest(cfg["data"])
    sample_dir = manifest.root / cfg["sample"]
    sample, _meta = read_sample(sample_dir)
    matches_path = (
        Path(cfg["matches"]) if cfg["matches"] else sample_dir / "matches.json"
    )
    matches = _load_matches_file(matches_path)

    src_colors = np.tile(np.array(GRAY, dtype=np.uint8), (sample.source.count, 1))
    tgt_colors = np.tile(np.array(GRAY, dtype=np.uint8), (sample.target.count, 1))
    if len(matches):
        src_colors[matches.source_indices] = SOURCE_COLOR
        tgt_colors[matches.target_indices] = TARGET_COLOR

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_ply(
        out / "source_vis.ply",
        PlyContents(points=sample.source.points, colors=src_colors),
    )
    write_ply(
        out / "target_vis.ply",
        PlyContents(points=sample.target.points, colors=tgt_colors),
    )
    n_match = len(matches)
    seg_points = np.vstack(
        [
            sample.source.points[matches.source_indices],
            sample.target.points[matches.target_indices],
        ]
    ) if n_match else np.zeros((1, 3))
    seg_colors = (
        np.vstack(
            [
                np.tile(np.array(SOURCE_COLOR, dtype=np.uint8), (n_match, 1)),
                np.tile(np.array(TARGET_COLOR, dtype=np.uint8), (n_match, 1)),
            ]
        )
        if n_match
        else np.tile(np.array(GRAY, dtype=np.uint8), (1, 1 * 3)).reshape(1, 3)
    )
    edges = (
        np.column_stack([np.arange(n_match), np.arange(n_match) + n_match])
        if n_match
        else np.empty((0, 2), dtype=np.int32)
    )
    write_ply(
        out / "segments.ply",
        PlyContents(points=seg_points, colors=seg_colors, edges=edges),
    )
    print(f"visualization written to {out} ({n_match} segments)")
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "match": cmd_match,
    "register": cmd_register,
    "eval": cmd_eval,
    "export-vis": cmd_export_vis,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _merge_config(args.command, args)
        return _HANDLERS[args.command](cfg)
    except Exception as exc:  # surfaced as machine-readable JSON
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
