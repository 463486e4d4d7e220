"""Loss functions, reverse-mode gradients through the matcher, and SGD.

The losses read the confidence matrix and visibility scores directly;
mutual-nearest-neighbor selection and mask thresholding never sit on the
gradient path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dataset import DatasetManifest, load_split
from .geometry import CorrespondenceSet
from .matcher import (
    NetworkParams,
    PairPrep,
    _confidence_t,
    _forward_descriptors_t,
    lift_params,
    prepare_pair,
)
from .synth import SamplePair

LOG_EPS = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 35
    batch_size: int = 1
    learning_rate: float = 0.05
    lr_decay: float = 0.95
    rng_seed: int = 0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class EpochStats:
    epoch: int
    mean_match_loss: float
    mean_visibility_loss: float
    mean_total_loss: float


def _focal_terms_t(
    confidence: ad.Tensor, gt: CorrespondenceSet, alpha: float, gamma: float
) -> ad.Tensor:
    m = len(gt)
    picked = confidence.gather(gt.source_indices, gt.target_indices)
    floored = picked.clip(LOG_EPS, None)
    terms = (1.0 - picked) ** gamma * floored.log() * (-alpha)
    return terms.sum() * (1.0 / m)


def focal_loss(
    confidence: np.ndarray,
    gt: CorrespondenceSet,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> float:
    """Focal loss over ground-truth entries of the confidence matrix."""
    if len(gt) == 0:
        raise ValueError("focal loss needs a non-empty ground-truth match set")
    value = _focal_terms_t(ad.Tensor(confidence), gt, alpha, gamma)
    return float(value.data)


def _bce_t(scores: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    n = labels.shape[0]
    o = scores.clip(LOG_EPS, 1.0 - LOG_EPS)
    y = ad.Tensor(labels.astype(np.float64))
    terms = y * o.log() + (1.0 - y) * (1.0 - o).log()
    return terms.sum() * (-1.0 / n)


def visibility_loss(scores: np.ndarray, labels: np.ndarray) -> float:
    """Binary cross entropy with clipped predictions."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    return float(_bce_t(ad.Tensor(scores), labels).data)


def total_loss(match_loss: float, vis_loss: float) -> float:
    return match_loss + vis_loss


@dataclass
class LossBreakdown:
    match_loss: float
    visibility_loss: float
    total: float


def _loss_t(
    prep: PairPrep,
    gt: CorrespondenceSet,
    labels: np.ndarray,
    pt: dict[str, ad.Tensor],
    d: int,
    alpha: float,
    gamma: float,
) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    desc_s, desc_t, o_v = _forward_descriptors_t(prep, pt, d)
    confidence = _confidence_t(desc_s, desc_t)
    lm = _focal_terms_t(confidence, gt, alpha, gamma)
    lv = _bce_t(o_v, labels)
    return lm, lv, lm + lv


def backward(
    params: NetworkParams,
    sample: SamplePair,
    config: TrainConfig | None = None,
    prep: PairPrep | None = None,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Total loss and its exact gradient for every parameter array."""
    config = config or TrainConfig()
    if prep is None:
        prep = prepare_pair(sample.source, sample.target, params)
    pt = lift_params(params, requires_grad=True)
    lm, lv, loss = _loss_t(
        prep, sample.gt_matches, sample.visibility_labels, pt,
        params.d, config.focal_alpha, config.focal_gamma,
    )
    loss.backward()
    grads = {
        name: (pt[name].grad if pt[name].grad is not None else np.zeros_like(pt[name].data))
        for name, _ in params.array_items()
    }
    breakdown = LossBreakdown(
        match_loss=float(lm.data), visibility_loss=float(lv.data), total=float(loss.data)
    )
    return breakdown, grads


def sgd_step(
    params: NetworkParams, grads: dict[str, np.ndarray], lr: float
) -> NetworkParams:
    """p <- p - lr * g for every parameter array."""
    updated = {}
    for name, arr in params.array_items():
        g = grads[name]
        if g.shape != arr.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        updated[name] = arr - lr * g
    return params.with_arrays(updated)


def train(
    manifest: DatasetManifest,
    params: NetworkParams,
    config: TrainConfig,
    samples: list[SamplePair] | None = None,
) -> tuple[NetworkParams, list[EpochStats]]:
    """SGD over the train split with per-epoch shuffling.

    Pair preparation (neighborhood features, super-point choices) is cached
    per sample since it does not depend on the parameters.
    """
    manifest.check_split_disjoint()
    if samples is None:
        samples = [pair for _, pair in load_split(manifest, "train")]
    if not samples:
        raise ValueError("train split is empty")
    preps = [prepare_pair(s.source, s.target, params) for s in samples]

    log: list[EpochStats] = []
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng(
            np.random.SeedSequence([config.rng_seed & 0xFFFFFFFF, epoch])
        )
        order = rng.permutation(len(samples))
        lr = config.learning_rate * config.lr_decay ** (epoch - 1)
        lm_sum = lv_sum = 0.0
        pending: list[dict[str, np.ndarray]] = []
        for pos, s_i in enumerate(order):
            breakdown, grads = backward(
                params, samples[s_i], config, prep=preps[s_i]
            )
            lm_sum += breakdown.match_loss
            lv_sum += breakdown.visibility_loss
            pending.append(grads)
            if len(pending) == config.batch_size or pos == len(order) - 1:
                mean_grads = {
                    name: sum(g[name] for g in pending) / len(pending)
                    for name, _ in params.array_items()
                }
                params = sgd_step(params, mean_grads, lr)
                pending = []
        n = len(samples)
        log.append(
            EpochStats(
                epoch=epoch,
                mean_match_loss=lm_sum / n,
                mean_visibility_loss=lv_sum / n,
                mean_total_loss=(lm_sum + lv_sum) / n,
            )
        )
    return params, log


def write_loss_csv(path, log: list[EpochStats]) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "mean_match_loss", "mean_visibility_loss", "mean_total_loss"]
        )
        for row in log:
            writer.writerow(
                [
                    row.epoch,
                    repr(row.mean_match_loss),
                    repr(row.mean_visibility_loss),
                    repr(row.mean_total_loss),
                ]
            )
