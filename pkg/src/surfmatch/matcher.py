"""Learnable point matcher: local geometry encoder, single-head self/cross
attention over super-points, descriptor and visibility heads, dual-softmax
confidence and mutual-nearest-neighbor selection.

The attention stack runs on a subsampled super-point set per cloud
(content-seeded, so the full pipeline stays a pure function of its inputs);
updated features are propagated back to all points by nearest-super-point
attachment followed by a point-wise refinement layer.
"""

from __future__ import annotations

import io
import json
import zipfile
import zlib
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .geometry import (
    CorrespondenceSet,
    InsufficientPointsError,
    NeighborIndex,
    PointCloud,
)

CHECKPOINT_VERSION = 1
VISIBILITY_THRESHOLD = 0.9

# fixed length scale (mm) that keeps raw geometric features near unit order
FEATURE_SCALE_MM = 10.0


class CheckpointError(ValueError):
    """Unreadable or version-incompatible checkpoint."""


@dataclass(frozen=True)
class AttentionParams:
    """Projection matrices and the fully connected output layer.

    Weights are stored in math orientation (out_dim, in_dim): a feature row
    x is projected as W @ x, i.e. X @ W.T for a stacked feature matrix.
    """

    w_q: np.ndarray   # (d, d)
    w_k: np.ndarray   # (d, d)
    w_v: np.ndarray   # (d, d)
    fc_w: np.ndarray  # (d, 2d)
    fc_b: np.ndarray  # (d,)


@dataclass(frozen=True)
class NetworkParams:
    d: int
    k_neighbors: int
    n_superpoints: int
    seed: int
    enc_w1: np.ndarray   # (d, g_dim)
    enc_b1: np.ndarray
    enc_w2: np.ndarray   # (d, d)
    enc_b2: np.ndarray
    self_att: AttentionParams
    cross_att: AttentionParams
    refine_w: np.ndarray  # (d, 2d)
    refine_b: np.ndarray
    desc_w: np.ndarray    # (d, d)
    desc_b: np.ndarray
    vis_w: np.ndarray     # (d,) 1x1-conv kernel over feature channels
    vis_b: np.ndarray     # (1,)

    def array_items(self) -> list[tuple[str, np.ndarray]]:
        """All parameter arrays in a fixed, stable order."""
        return [
            ("enc_w1", self.enc_w1),
            ("enc_b1", self.enc_b1),
            ("enc_w2", self.enc_w2),
            ("enc_b2", self.enc_b2),
            ("self_att.w_q", self.self_att.w_q),
            ("self_att.w_k", self.self_att.w_k),
            ("self_att.w_v", self.self_att.w_v),
            ("self_att.fc_w", self.self_att.fc_w),
            ("self_att.fc_b", self.self_att.fc_b),
            ("cross_att.w_q", self.cross_att.w_q),
            ("cross_att.w_k", self.cross_att.w_k),
            ("cross_att.w_v", self.cross_att.w_v),
            ("cross_att.fc_w", self.cross_att.fc_w),
            ("cross_att.fc_b", self.cross_att.fc_b),
            ("refine_w", self.refine_w),
            ("refine_b", self.refine_b),
            ("desc_w", self.desc_w),
            ("desc_b", self.desc_b),
            ("vis_w", self.vis_w),
            ("vis_b", self.vis_b),
        ]

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "NetworkParams":
        def att(prefix: str) -> AttentionParams:
            return AttentionParams(
                w_q=arrays[f"{prefix}.w_q"],
                w_k=arrays[f"{prefix}.w_k"],
                w_v=arrays[f"{prefix}.w_v"],
                fc_w=arrays[f"{prefix}.fc_w"],
                fc_b=arrays[f"{prefix}.fc_b"],
            )

        return replace(
            self,
            enc_w1=arrays["enc_w1"],
            enc_b1=arrays["enc_b1"],
            enc_w2=arrays["enc_w2"],
            enc_b2=arrays["enc_b2"],
            self_att=att("self_att"),
            cross_att=att("cross_att"),
            refine_w=arrays["refine_w"],
            refine_b=arrays["refine_b"],
            desc_w=arrays["desc_w"],
            desc_b=arrays["desc_b"],
            vis_w=arrays["vis_w"],
            vis_b=arrays["vis_b"],
        )

    @property
    def g_dim(self) -> int:
        return self.k_neighbors + 10


@dataclass(frozen=True)
class VisibilityScores:
    """Clamped per-source-point scores and the strict > 0.9 mask."""

    scores: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        m = np.asarray(self.mask, dtype=bool).reshape(-1)
        if not np.array_equal(m, s > VISIBILITY_THRESHOLD):
            raise ValueError("mask must equal scores > 0.9 exactly")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "mask", m)


@dataclass(frozen=True)
class MatchResult:
    matches: CorrespondenceSet
    confidence: np.ndarray       # (n, m) dual-softmax values
    visibility: VisibilityScores


def init_params(
    rng_seed: int,
    d: int = 64,
    k_neighbors: int = 16,
    n_superpoints: int = 256,
) -> NetworkParams:
    """Seeded initialization, uniform in [-1/sqrt(d), 1/sqrt(d)] per array."""
    g_dim = k_neighbors + 10
    bound = 1.0 / np.sqrt(d)
    shapes = {
        "enc_w1": (d, g_dim), "enc_b1": (d,),
        "enc_w2": (d, d), "enc_b2": (d,),
        "self_att.w_q": (d, d), "self_att.w_k": (d, d), "self_att.w_v": (d, d),
        "self_att.fc_w": (d, 2 * d), "self_att.fc_b": (d,),
        "cross_att.w_q": (d, d), "cross_att.w_k": (d, d), "cross_att.w_v": (d, d),
        "cross_att.fc_w": (d, 2 * d), "cross_att.fc_b": (d,),
        "refine_w": (d, 2 * d), "refine_b": (d,),
        "desc_w": (d, d), "desc_b": (d,),
        "vis_w": (d,), "vis_b": (1,),
    }
    children = np.random.SeedSequence(rng_seed).spawn(len(shapes))
    arrays = {
        name: np.random.default_rng(child).uniform(-bound, bound, size=shape)
        for (name, shape), child in zip(shapes.items(), children)
    }
    template = NetworkParams(
        d=d, k_neighbors=k_neighbors, n_superpoints=n_superpoints, seed=rng_seed,
        enc_w1=arrays["enc_w1"], enc_b1=arrays["enc_b1"],
        enc_w2=arrays["enc_w2"], enc_b2=arrays["enc_b2"],
        self_att=AttentionParams(
            arrays["self_att.w_q"], arrays["self_att.w_k"], arrays["self_att.w_v"],
            arrays["self_att.fc_w"], arrays["self_att.fc_b"],
        ),
        cross_att=AttentionParams(
            arrays["cross_att.w_q"], arrays["cross_att.w_k"], arrays["cross_att.w_v"],
            arrays["cross_att.fc_w"], arrays["cross_att.fc_b"],
        ),
        refine_w=arrays["refine_w"], refine_b=arrays["refine_b"],
        desc_w=arrays["desc_w"], desc_b=arrays["desc_b"],
        vis_w=arrays["vis_w"], vis_b=arrays["vis_b"],
    )
    return template


# ---------------------------------------------------------------------------
# geometric input features (parameter-free, cacheable)
# ---------------------------------------------------------------------------


def geometric_features(cloud: PointCloud, k: int) -> np.ndarray:
    """Per-point local shape statistics, invariant to rigid motion.

    Concatenates the k sorted neighbor distances with spectral statistics of
    the neighborhood covariance (all divided by a fixed mm scale), so the
    values depend only on local geometry, not on cloud ordering or pose.
    """
    if k < 4:
        raise ValueError("k must be >= 4")
    if cloud.count <= k:
        raise InsufficientPointsError(
            f"cloud of {cloud.count} points is too small for k={k} neighborhoods"
        )
    index = NeighborIndex(cloud)
    idx, dist = index.knn_batch(cloud.points, k + 1)
    n = cloud.count
    # drop each point's own entry (distance 0); if an exact duplicate
    # displaced it, drop the farthest neighbor instead
    keep_idx = np.empty((n, k), dtype=np.int64)
    keep_dist = np.empty((n, k))
    self_hits = idx == np.arange(n)[:, None]
    for i in range(n):
        row_idx, row_dist = idx[i], dist[i]
        hits = np.nonzero(self_hits[i])[0]
        drop = hits[0] if hits.size else k
        keep_idx[i] = np.delete(row_idx, drop)
        keep_dist[i] = np.delete(row_dist, drop)

    nbrs = cloud.points[keep_idx]                       # (n, k, 3)
    offsets = nbrs - cloud.points[:, None, :]
    centroid_offset = offsets.mean(axis=1)
    centered = offsets - centroid_offset[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals = np.linalg.eigvalsh(cov)                   # ascending
    lam = np.sqrt(np.maximum(eigvals[:, ::-1], 0.0))    # descending std devs
    lam1 = np.maximum(lam[:, 0], 1e-12)
    lam_sum = np.maximum(eigvals.sum(axis=1), 1e-24)

    scale = FEATURE_SCALE_MM
    feats = np.column_stack(
        [
            keep_dist / scale,
            lam / scale,
            (lam[:, 0] - lam[:, 1]) / lam1,     # linearity
            (lam[:, 1] - lam[:, 2]) / lam1,     # planarity
            lam[:, 2] / lam1,                   # sphericity
            (lam[:, 0] - lam[:, 2]) / lam1,     # anisotropy
            eigvals[:, 0] / lam_sum,            # curvature change
            np.linalg.norm(centroid_offset, axis=1) / scale,
            keep_dist.mean(axis=1) / scale,
        ]
    )
    return feats


def superpoint_indices(cloud: PointCloud, n_superpoints: int, seed: int) -> np.ndarray:
    """Content-seeded random subset of point indices (sorted)."""
    n = cloud.count
    if n <= n_superpoints:
        return np.arange(n, dtype=np.int64)
    content = zlib.crc32(np.ascontiguousarray(cloud.points).tobytes())
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, content]))
    return np.sort(rng.choice(n, size=n_superpoints, replace=False)).astype(np.int64)


@dataclass(frozen=True)
class PairPrep:
    """Parameter-independent precomputation for one source/target pair."""

    geom_s: np.ndarray
    geom_t: np.ndarray
    sp_idx_s: np.ndarray
    sp_idx_t: np.ndarray
    attach_s: np.ndarray   # nearest super-point slot per source point
    attach_t: np.ndarray


def prepare_pair(
    source: PointCloud,
    target: PointCloud,
    params: NetworkParams,
) -> PairPrep:
    geom_s = geometric_features(source, params.k_neighbors)
    geom_t = geometric_features(target, params.k_neighbors)
    sp_s = superpoint_indices(source, params.n_superpoints, params.seed)
    sp_t = superpoint_indices(target, params.n_superpoints, params.seed)

    def attach(cloud: PointCloud, sp: np.ndarray) -> np.ndarray:
        sp_index = NeighborIndex(PointCloud(cloud.points[sp]))
        idx, _ = sp_index.knn_batch(cloud.points, 1)
        return idx[:, 0]

    return PairPrep(
        geom_s=geom_s,
        geom_t=geom_t,
        sp_idx_s=sp_s,
        sp_idx_t=sp_t,
        attach_s=attach(source, sp_s),
        attach_t=attach(target, sp_t),
    )


# ---------------------------------------------------------------------------
# tensor-mode forward (shared between inference and training)
# ---------------------------------------------------------------------------


def lift_params(params: NetworkParams, requires_grad: bool) -> dict[str, ad.Tensor]:
    return {
        name: ad.Tensor(arr, requires_grad=requires_grad)
        for name, arr in params.array_items()
    }


def _encode_t(geom: np.ndarray, pt: dict[str, ad.Tensor]) -> ad.Tensor:
    g = ad.Tensor(geom)
    h = (g @ pt["enc_w1"].T + pt["enc_b1"].reshape(1, -1)).tanh()
    return (h @ pt["enc_w2"].T + pt["enc_b2"].reshape(1, -1)).tanh()


def _attention_update_t(
    x_q: ad.Tensor, x_kv: ad.Tensor, pt: dict[str, ad.Tensor], prefix: str, d: int
) -> ad.Tensor:
    q = x_q @ pt[f"{prefix}.w_q"].T
    k = x_kv @ pt[f"{prefix}.w_k"].T
    v = x_kv @ pt[f"{prefix}.w_v"].T
    a = ad.softmax((q @ k.T) * (1.0 / np.sqrt(d)), axis=1)
    msg = a @ v
    fc_in = ad.concat([q, msg], axis=1)
    return x_q + (fc_in @ pt[f"{prefix}.fc_w"].T + pt[f"{prefix}.fc_b"].reshape(1, -1))


def _forward_descriptors_t(
    prep: PairPrep, pt: dict[str, ad.Tensor], d: int
) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """Returns (descriptors_s, descriptors_t, clamped visibility scores)."""
    feat_s = _encode_t(prep.geom_s, pt)
    feat_t = _encode_t(prep.geom_t, pt)

    xs = feat_s.take_rows(prep.sp_idx_s)
    xt = feat_t.take_rows(prep.sp_idx_t)
    xs = _attention_update_t(xs, xs, pt, "self_att", d)
    xt = _attention_update_t(xt, xt, pt, "self_att", d)
    xs_new = _attention_update_t(xs, xt, pt, "cross_att", d)
    xt_new = _attention_update_t(xt, xs, pt, "cross_att", d)

    cond_s = xs_new.take_rows(prep.attach_s)
    cond_t = xt_new.take_rows(prep.attach_t)
    h_s = (ad.concat([feat_s, cond_s], axis=1) @ pt["refine_w"].T
           + pt["refine_b"].reshape(1, -1)).tanh()
    h_t = (ad.concat([feat_t, cond_t], axis=1) @ pt["refine_w"].T
           + pt["refine_b"].reshape(1, -1)).tanh()

    desc_s = h_s @ pt["desc_w"].T + pt["desc_b"].reshape(1, -1)
    desc_t = h_t @ pt["desc_w"].T + pt["desc_b"].reshape(1, -1)

    o_raw = desc_s @ pt["vis_w"].reshape(-1, 1) + pt["vis_b"].reshape(1, 1)
    o_v = o_raw.reshape(-1).clip(0.0, 1.0)
    return desc_s, desc_t, o_v


def _confidence_t(desc_s: ad.Tensor, desc_t: ad.Tensor) -> ad.Tensor:
    scores = desc_s @ desc_t.T
    return ad.softmax(scores, axis=1) * ad.softmax(scores, axis=0)


# ---------------------------------------------------------------------------
# public operations (numpy in / numpy out)
# ---------------------------------------------------------------------------


def encode_local_features(cloud: PointCloud, k: int, params: NetworkParams) -> np.ndarray:
    """Feature rows of width d from translation-invariant local geometry."""
    pt = lift_params(params, requires_grad=False)
    return _encode_t(geometric_features(cloud, k), pt).data


def self_attention(x: np.ndarray, p: AttentionParams) -> np.ndarray:
    """Residual single-head attention of a feature matrix onto itself."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[1]
    pt = _lift_attention(p, "att")
    return _attention_update_t(ad.Tensor(x), ad.Tensor(x), pt, "att", d).data


def cross_attention(
    x_s: np.ndarray, x_t: np.ndarray, p: AttentionParams
) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric cross-cloud attention update of both feature matrices."""
    x_s = np.asarray(x_s, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_s.shape[1] != x_t.shape[1]:
        raise ValueError("feature widths must match")
    d = x_s.shape[1]
    pt = _lift_attention(p, "att")
    ts, tt = ad.Tensor(x_s), ad.Tensor(x_t)
    out_s = _attention_update_t(ts, tt, pt, "att", d)
    out_t = _attention_update_t(tt, ts, pt, "att", d)
    return out_s.data, out_t.data


def _lift_attention(p: AttentionParams, prefix: str) -> dict[str, ad.Tensor]:
    return {
        f"{prefix}.w_q": ad.Tensor(p.w_q),
        f"{prefix}.w_k": ad.Tensor(p.w_k),
        f"{prefix}.w_v": ad.Tensor(p.w_v),
        f"{prefix}.fc_w": ad.Tensor(p.fc_w),
        f"{prefix}.fc_b": ad.Tensor(p.fc_b),
    }


def decode_visibility(x_s: np.ndarray, params: NetworkParams) -> VisibilityScores:
    """Head output clamped to [0, 1]; mask is strictly greater than 0.9."""
    x_s = np.asarray(x_s, dtype=np.float64)
    raw = x_s @ params.vis_w + params.vis_b[0]
    scores = np.clip(raw, 0.0, 1.0)
    return VisibilityScores(scores=scores, mask=scores > VISIBILITY_THRESHOLD)


def score_matrix(x_s: np.ndarray, x_t: np.ndarray) -> np.ndarray:
    x_s = np.asarray(x_s, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_s.shape[1] != x_t.shape[1]:
        raise ValueError("feature widths must match")
    return x_s @ x_t.T


def dual_softmax(scores: np.ndarray) -> np.ndarray:
    """Row softmax times column softmax, entrywise."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("score matrix must be finite")
    return _np_softmax(s, axis=1) * _np_softmax(s, axis=0)


def _np_softmax(s: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def mutual_nn_select(confidence: np.ndarray) -> CorrespondenceSet:
    """(i, j) kept iff it maximizes both its row and its column.

    Argmax ties resolve to the lower index, making the result deterministic
    and one-to-one.
    """
    m = np.asarray(confidence, dtype=np.float64)
    row_arg = m.argmax(axis=1)
    col_arg = m.argmax(axis=0)
    rows = np.arange(m.shape[0])
    keep = col_arg[row_arg] == rows
    pairs = np.column_stack([rows[keep], row_arg[keep]])
    return CorrespondenceSet(pairs)


def apply_visibility_mask(
    matches: CorrespondenceSet, mask: np.ndarray
) -> CorrespondenceSet:
    """Retain only pairs whose source index has mask bit 1."""
    mask = np.asarray(mask, dtype=bool)
    if len(matches) == 0:
        return matches
    keep = mask[matches.source_indices]
    return CorrespondenceSet(matches.pairs[keep])


def match(source: PointCloud, target: PointCloud, params: NetworkParams) -> MatchResult:
    """Full forward pipeline from clouds to masked mutual-NN matches."""
    prep = prepare_pair(source, target, params)
    pt = lift_params(params, requires_grad=False)
    desc_s, desc_t, o_v = _forward_descriptors_t(prep, pt, params.d)
    confidence = _confidence_t(desc_s, desc_t).data
    visibility = VisibilityScores(
        scores=o_v.data, mask=o_v.data > VISIBILITY_THRESHOLD
    )
    selected = mutual_nn_select(confidence)
    masked = apply_visibility_mask(selected, visibility.mask)
    return MatchResult(matches=masked, confidence=confidence, visibility=visibility)


# ---------------------------------------------------------------------------
# checkpoint container: zip of named .npy arrays plus a JSON header
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: NetworkParams) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "d": params.d,
        "k_neighbors": params.k_neighbors,
        "n_superpoints": params.n_superpoints,
        "seed": params.seed,
        "arrays": {
            name: {"shape": list(arr.shape), "dtype": str(arr.dtype)}
            for name, arr in params.array_items()
        },
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("header.json", json.dumps(header, sort_keys=True, indent=1))
        for name, arr in params.array_items():
            buf = io.BytesIO()
            np.save(buf, arr, allow_pickle=False)
            zf.writestr(f"arrays/{name}.npy", buf.getvalue())


def load_checkpoint(path) -> NetworkParams:
    try:
        with zipfile.ZipFile(path, "r") as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format_version") != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"checkpoint version {header.get('format_version')} "
                    f"is not supported (expected {CHECKPOINT_VERSION})"
                )
            arrays = {}
            for name in header["arrays"]:
                buf = io.BytesIO(zf.read(f"arrays/{name}.npy"))
                arrays[name] = np.load(buf, allow_pickle=False)
    except (KeyError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"unreadable checkpoint: {exc}") from exc
    template = init_params(
        rng_seed=header["seed"],
        d=header["d"],
        k_neighbors=header["k_neighbors"],
        n_superpoints=header["n_superpoints"],
    )
    return template.with_arrays(arrays)
