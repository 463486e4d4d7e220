"""Benchmark runner: per-sample matching, registration and metric
aggregation across methods (ground-truth matches, FPFH baseline, learned
matcher), reported as mean +/- std per sigma plus registration error and
feature-extraction timing.

The FPFH baseline runs on voxel-downsampled clouds, which severs the
ground-truth correspondence labels, so its inlier ratio and match score are
recorded as undefined and only its registration error is aggregated.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fpfh import FpfhConfig, compute_fpfh, estimate_normals_radius, voxel_downsample
from .geometry import CorrespondenceSet, PointCloud
from .matcher import NetworkParams, match
from .metrics import MetricConfig, inlier_ratio, match_score, registration_error
from .registration import (
    IcpConfig,
    RansacConfig,
    RegistrationFailure,
    icp_refine,
    predicted_displacements,
    ransac_rigid,
)
from .synth import SamplePair


@dataclass
class MethodOutput:
    matches: CorrespondenceSet
    match_source: PointCloud          # cloud the source indices refer to
    match_target: PointCloud
    feature_time_s: float | None
    supports_match_metrics: bool


class GroundTruthMethod:
    name = "ground_truth"

    def run(self, sample: SamplePair) -> MethodOutput:
        return MethodOutput(
            matches=sample.gt_matches,
            match_source=sample.source,
            match_target=sample.target,
            feature_time_s=None,
            supports_match_metrics=True,
        )


class FpfhMethod:
    name = "fpfh"

    def __init__(self, config: FpfhConfig | None = None):
        self.config = config or FpfhConfig()

    def _describe(self, cloud: PointCloud):
        down = voxel_downsample(cloud, self.config.voxel_mm)
        start = time.perf_counter()
        normals, degenerate = estimate_normals_radius(
            down, self.config.normal_radius_mm
        )
        result = compute_fpfh(
            down, normals, self.config.feature_radius_mm, degenerate
        )
        elapsed = time.perf_counter() - start
        return down, result, elapsed

    def run(self, sample: SamplePair) -> MethodOutput:
        down_s, desc_s, t_s = self._describe(sample.source)
        down_t, desc_t, t_t = self._describe(sample.target)
        matches = _mutual_nn_descriptors(
            desc_s.descriptors, desc_t.descriptors,
            valid_s=~desc_s.flagged, valid_t=~desc_t.flagged,
        )
        return MethodOutput(
            matches=matches,
            match_source=down_s,
            match_target=down_t,
            feature_time_s=t_s + t_t,
            supports_match_metrics=False,
        )


class LearnedMethod:
    name = "learned"

    def __init__(self, params: NetworkParams):
        self.params = params

    def run(self, sample: SamplePair) -> MethodOutput:
        start = time.perf_counter()
        result = match(sample.source, sample.target, self.params)
        elapsed = time.perf_counter() - start
        return MethodOutput(
            matches=result.matches,
            match_source=sample.source,
            match_target=sample.target,
            feature_time_s=elapsed,
            supports_match_metrics=True,
        )


def _mutual_nn_descriptors(
    desc_s: np.ndarray,
    desc_t: np.ndarray,
    valid_s: np.ndarray,
    valid_t: np.ndarray,
) -> CorrespondenceSet:
    """Mutual nearest neighbors in descriptor space (L2 distance)."""
    if not valid_s.any() or not valid_t.any():
        return CorrespondenceSet(np.empty((0, 2), dtype=np.int64))
    s_idx = np.nonzero(valid_s)[0]
    t_idx = np.nonzero(valid_t)[0]
    a = desc_s[s_idx]
    b = desc_t[t_idx]
    d2 = (
        np.sum(a * a, axis=1)[:, None]
        - 2.0 * a @ b.T
        + np.sum(b * b, axis=1)[None, :]
    )
    fwd = d2.argmin(axis=1)
    bwd = d2.argmin(axis=0)
    keep = bwd[fwd] == np.arange(len(s_idx))
    pairs = np.column_stack([s_idx[keep], t_idx[fwd[keep]]])
    return CorrespondenceSet(pairs)


@dataclass
class SampleEvaluation:
    sample_id: str
    method: str
    n_predicted: int
    ir: dict[float, float | None]
    ms: dict[float, float]
    re: float | None
    feature_time_s: float | None
    registration_failed: bool


@dataclass
class BenchmarkConfig:
    metrics: MetricConfig = field(default_factory=MetricConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)


@dataclass
class BenchmarkReport:
    methods: list[str]
    sigma_mm: tuple[float, ...]
    summary: dict
    per_sample: list[SampleEvaluation]


def evaluate_sample(
    sample: SamplePair, sample_id: str, method, cfg: BenchmarkConfig
) -> SampleEvaluation:
    out: MethodOutput = method.run(sample)
    ir: dict[float, float | None] = {}
    ms: dict[float, float] = {}
    if out.supports_match_metrics:
        for sigma in cfg.metrics.sigma_mm:
            ir[sigma] = inlier_ratio(out.matches, sample.gt_matches, out.match_target, sigma)
            ms[sigma] = match_score(out.matches, sample.gt_matches, out.match_target, sigma)
    else:
        for sigma in cfg.metrics.sigma_mm:
            ir[sigma] = None
            ms[sigma] = float("nan")

    re_value: float | None = None
    failed = False
    try:
        ransac = ransac_rigid(out.matches, out.match_source, out.match_target, cfg.ransac)
        if not ransac.success:
            failed = True
        else:
            icp = icp_refine(sample.source, sample.target, ransac.transform, cfg.icp)
            v_pred = predicted_displacements(sample.source, icp.transform)
            re_value = registration_error(sample.gt_displacement, v_pred)
    except RegistrationFailure:
        failed = True
    return SampleEvaluation(
        sample_id=sample_id,
        method=method.name,
        n_predicted=len(out.matches),
        ir=ir,
        ms=ms,
        re=re_value,
        feature_time_s=out.feature_time_s,
        registration_failed=failed,
    )


def _mean_std(values: list[float]) -> dict:
    if not values:
        return {"mean": None, "std": None, "count": 0}
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "count": len(values)}


def run_benchmark(
    samples: list[tuple[str, SamplePair]],
    methods: list,
    cfg: BenchmarkConfig | None = None,
) -> BenchmarkReport:
    """Evaluate every method on every sample and aggregate mean +/- std."""
    cfg = cfg or BenchmarkConfig()
    per_sample: list[SampleEvaluation] = []
    for method in methods:
        for sample_id, sample in samples:
            per_sample.append(evaluate_sample(sample, sample_id, method, cfg))

    summary: dict = {}
    for method in methods:
        rows = [e for e in per_sample if e.method == method.name]
        ir_stats = {}
        ms_stats = {}
        for sigma in cfg.metrics.sigma_mm:
            defined = [e.ir[sigma] for e in rows if e.ir[sigma] is not None]
            ir_stats[str(sigma)] = {
                **_mean_std(defined),
                "undefined_count": sum(1 for e in rows if e.ir[sigma] is None),
            }
            ms_vals = [e.ms[sigma] for e in rows if not np.isnan(e.ms[sigma])]
            ms_stats[str(sigma)] = _mean_std(ms_vals)
        res = [e.re for e in rows if e.re is not None]
        times = [e.feature_time_s for e in rows if e.feature_time_s is not None]
        summary[method.name] = {
            "ir": ir_stats,
            "ms": ms_stats,
            "re": {
                **_mean_std(res),
                "failed_count": sum(1 for e in rows if e.registration_failed),
            },
            "feature_time_s": _mean_std(times),
            "n_samples": len(rows),
        }
    return BenchmarkReport(
        methods=[m.name for m in methods],
        sigma_mm=cfg.metrics.sigma_mm,
        summary=summary,
        per_sample=per_sample,
    )


def report_to_json(report: BenchmarkReport) -> dict:
    return {
        "methods": report.methods,
        "sigma_mm": list(report.sigma_mm),
        "summary": report.summary,
    }


def format_report_table(report: BenchmarkReport) -> str:
    """Plain-text tables: IR/MS per sigma, then RE and timing per method."""
    lines = []
    header = "sigma(mm)".ljust(14) + "".join(f"{s:>10.1f}" for s in report.sigma_mm)
    for metric in ("ir", "ms"):
        lines.append(f"[{metric.upper()}]")
        lines.append(header)
        for name in report.methods:
            stats = report.summary[name][metric]
            cells = []
            for s in report.sigma_mm:
                cell = stats[str(s)]
                if cell["mean"] is None:
                    cells.append("      -   ")
                else:
                    cells.append(f"{100 * cell['mean']:>10.2f}")
            lines.append(name.ljust(14) + "".join(cells))
        lines.append("")
    lines.append("[RE mm / feature time s]")
    for name in report.methods:
        re_stats = report.summary[name]["re"]
        t_stats = report.summary[name]["feature_time_s"]
        re_txt = (
            f"{re_stats['mean']:.3f} +/- {re_stats['std']:.3f}"
            if re_stats["mean"] is not None
            else "-"
        )
        t_txt = f"{t_stats['mean']:.4f}" if t_stats["mean"] is not None else "-"
        lines.append(
            f"{name.ljust(14)} RE {re_txt}   time {t_txt}   "
            f"failures {re_stats['failed_count']}/{report.summary[name]['n_samples']}"
        )
    return "\n".join(lines)


def write_per_sample_csv(path, report: BenchmarkReport) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        sigma_cols = [f"ir_{s}" for s in report.sigma_mm] + [
            f"ms_{s}" for s in report.sigma_mm
        ]
        writer.writerow(
            ["sample_id", "method", "n_predicted", "re", "feature_time_s", "failed"]
            + sigma_cols
        )
        for e in report.per_sample:
            row = [
                e.sample_id,
                e.method,
                e.n_predicted,
                "" if e.re is None else repr(e.re),
                "" if e.feature_time_s is None else repr(e.feature_time_s),
                int(e.registration_failed),
            ]
            row += ["" if e.ir[s] is None else repr(e.ir[s]) for s in report.sigma_mm]
            row += ["" if np.isnan(e.ms[s]) else repr(e.ms[s]) for s in report.sigma_mm]
            writer.writerow(row)
