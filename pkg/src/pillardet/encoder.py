"""Two-stream feature encoding over pillars.

The voxel stream runs a tiny shared PointNet inside every pillar. The point
stream runs a two-level set-abstraction / feature-propagation network over
the retained points. A correlation layer then attaches, to every pillar, a
convex combination of its top-K most similar point features.

The correlation, top-K selection, softmax, and aggregation live in one
shared routine (`correlate_topk_aggregate`) used verbatim by the trainable
memory at inference time; keeping a single code path is what makes the two
readouts interchangeable.

Module-level counters record every point-stream invocation so an inference
path can prove it never touched one.
"""

from __future__ import annotations

import numpy as np

from . import difftensor as dt
from .difftensor import nn
from .difftensor import tensor as T
from .pillars import GridSpec, scatter_to_image


class OpCounters:
    """Named invocation counters for instrumentation."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def incr(self, name: str) -> None:
        self.counts[name] = self.counts.get(name, 0) + 1

    def get(self, name: str) -> int:
        return self.counts.get(name, 0)

    def reset(self) -> None:
        self.counts.clear()


COUNTERS = OpCounters()

POINT_STREAM_FORWARD = "point_stream_forward"
POINT_FUSION = "point_fusion"


class TinyPointNet(nn.Module):
    """Shared linear + masked batch norm + ReLU + masked max over a point set.

    Accepts (N, V, D) feature buffers (numpy or Tensor) with per-row valid
    counts; returns (C, N) pooled features.
    """

    def __init__(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.linear = nn.Linear(f"{name}.linear", in_dim, out_dim, rng)
        self.bn = nn.BatchNorm(f"{name}.bn", out_dim)

    def __call__(self, feats, counts) -> T.Tensor:
        x = feats if isinstance(feats, T.Tensor) else T.Tensor(feats)
        if x.ndim != 3 or x.shape[2] != self.in_dim:
            raise ValueError(f"expected (N, V, {self.in_dim}), got {x.shape}")
        n, v, d = x.shape
        counts = np.asarray(counts, dtype=np.int64)
        flat = dt.tensor.reshape(x, (n * v, d))
        real = np.flatnonzero((np.arange(v)[None, :] < counts[:, None]).reshape(-1))
        h = dt.tensor.relu(self.bn(self.linear(flat), real_rows=real))
        pooled = dt.tensor.masked_max(dt.tensor.reshape(h, (n, v, self.out_dim)), counts)
        return dt.tensor.transpose(pooled, (1, 0))


def farthest_point_sample(xyz: np.ndarray, count: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling from the `start` index.

    Each step adds the point with the largest distance to the selected set;
    ties resolve to the lowest index. Deterministic given start.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    m = xyz.shape[0]
    if m == 0:
        raise ValueError("cannot sample from an empty point set")
    if not 1 <= count <= m:
        raise ValueError(f"cannot sample {count} from {m} points")
    if not 0 <= start < m:
        raise ValueError(f"start index {start} outside [0, {m})")
    selected = np.empty(count, dtype=np.int64)
    selected[0] = start
    min_d2 = np.sum((xyz - xyz[start]) ** 2, axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(min_d2))  # argmax takes the first maximum
        selected[i] = nxt
        d2 = np.sum((xyz - xyz[nxt]) ** 2, axis=1)
        min_d2 = np.minimum(min_d2, d2)
    return selected


def ball_query(centers: np.ndarray, xyz: np.ndarray, radius: float,
               max_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Group points within `radius` of each center, in index order.

    Returns (Q, S) index matrix and (Q,) group sizes. Groups are padded by
    repeating their first member; a center sampled from xyz always finds at
    least itself.
    """
    centers = np.asarray(centers, dtype=np.float64)
    xyz = np.asarray(xyz, dtype=np.float64)
    q = centers.shape[0]
    idx = np.zeros((q, max_samples), dtype=np.int64)
    counts = np.zeros(q, dtype=np.int64)
    r2 = radius * radius
    d2 = np.sum((centers[:, None, :] - xyz[None, :, :]) ** 2, axis=2)
    for i in range(q):
        hits = np.flatnonzero(d2[i] <= r2)[:max_samples]
        if hits.size == 0:
            hits = np.array([int(np.argmin(d2[i]))], dtype=np.int64)
        idx[i, : hits.size] = hits
        idx[i, hits.size :] = hits[0]
        counts[i] = hits.size
    return idx, counts


def three_nn_weights(query: np.ndarray, src: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices and inverse-distance weights of the three nearest sources.

    With fewer than three sources the nearest are repeated. Weights are
    normalized to sum to one per query point.
    """
    query = np.asarray(query, dtype=np.float64)
    src = np.asarray(src, dtype=np.float64)
    d2 = np.sum((query[:, None, :] - src[None, :, :]) ** 2, axis=2)
    order = np.argsort(d2, axis=1, kind="stable")
    k = min(3, src.shape[0])
    idx = order[:, :k]
    if k < 3:
        idx = np.concatenate([idx, np.tile(idx[:, :1], (1, 3 - k))], axis=1)
    d = np.sqrt(np.take_along_axis(d2, idx, axis=1))
    w = 1.0 / (d + 1e-8)
    return idx, w / w.sum(axis=1, keepdims=True)


class SetAbstraction(nn.Module):
    """FPS centers, ball-query grouping, tiny PointNet over relative coords
    plus gathered features."""

    def __init__(self, name: str, in_feat_dim: int, out_dim: int, radius: float,
                 max_samples: int, rng: np.random.Generator):
        self.radius = radius
        self.max_samples = max_samples
        self.in_feat_dim = in_feat_dim
        self.net = TinyPointNet(name, 3 + in_feat_dim, out_dim, rng)

    def __call__(self, xyz: np.ndarray, feats: T.Tensor | None, n_centers: int,
                 start: int = 0):
        center_idx = farthest_point_sample(xyz, n_centers, start=start)
        centers = xyz[center_idx]
        group_idx, group_counts = ball_query(centers, xyz, self.radius, self.max_samples)
        rel = xyz[group_idx] - centers[:, None, :]  # (Q, S, 3), constant
        if feats is None:
            grouped = T.Tensor(rel)
        else:
            gathered = dt.tensor.gather_axis1(feats, group_idx)  # (F, Q, S)
            grouped = dt.tensor.concat(
                [T.Tensor(rel), dt.tensor.transpose(gathered, (1, 2, 0))], axis=2)
        return centers, self.net(grouped, group_counts)


class FeaturePropagation(nn.Module):
    """Interpolate source features onto query points and mix with a skip."""

    def __init__(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.linear = nn.Linear(f"{name}.linear", in_dim, out_dim, rng)

    def __call__(self, query_xyz: np.ndarray, src_xyz: np.ndarray,
                 src_feats: T.Tensor, skip_feats: T.Tensor | None) -> T.Tensor:
        idx, wts = three_nn_weights(query_xyz, src_xyz)
        gathered = dt.tensor.gather_axis1(src_feats, idx)  # (C, Q, 3)
        interp = dt.tensor.sum_(dt.tensor.mul(gathered, T.Tensor(wts[None, :, :])), axis=2)
        x = interp if skip_feats is None else dt.tensor.concat([skip_feats, interp], axis=0)
        rows = dt.tensor.transpose(x, (1, 0))
        return dt.tensor.transpose(dt.tensor.relu(self.linear(rows)), (1, 0))


class PointStreamEncoder(nn.Module):
    """Simplified hierarchical point network: 2 set abstractions, 2 feature
    propagations, producing one C-dim feature per input point."""

    def __init__(self, name: str, channels: int, rng: np.random.Generator,
                 radii: tuple = (0.8, 1.6), max_samples: int = 16):
        c = channels
        self.channels = c
        self.sa1 = SetAbstraction(f"{name}.sa1", 1, c, radii[0], max_samples, rng)
        self.sa2 = SetAbstraction(f"{name}.sa2", c, c, radii[1], max_samples, rng)
        self.fp1 = FeaturePropagation(f"{name}.fp1", 2 * c, c, rng)
        self.fp2 = FeaturePropagation(f"{name}.fp2", c + 4, c, rng)

    def __call__(self, points: np.ndarray) -> T.Tensor:
        """points: (M, 4) raw x, y, z, reflectance -> (C, M) features."""
        COUNTERS.incr(POINT_STREAM_FORWARD)
        points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
        m = points.shape[0]
        if m == 0:
            raise ValueError("point stream needs at least one point")
        xyz = points[:, :3]
        feats0 = T.Tensor(points[:, 3:4].T)  # (1, M)
        n1 = max(1, m // 4)
        n2 = max(1, n1 // 4)
        # geometric start point, so reordering the cloud permutes the output
        start1 = int(np.lexsort((xyz[:, 2], xyz[:, 1], xyz[:, 0]))[0])
        xyz1, f1 = self.sa1(xyz, feats0, n1, start=start1)
        start2 = int(np.lexsort((xyz1[:, 2], xyz1[:, 1], xyz1[:, 0]))[0])
        xyz2, f2 = self.sa2(xyz1, f1, n2, start=start2)
        g1 = self.fp1(xyz1, xyz2, f2, skip_feats=f1)
        return self.fp2(xyz, xyz1, g1, skip_feats=T.Tensor(points.T))


# -- correlation, selection, aggregation --------------------------------------


def correlation(queries: T.Tensor, candidates: T.Tensor) -> T.Tensor:
    """Dot-product similarity: (C, N) x (C, X) -> (N, X)."""
    if queries.shape[0] != candidates.shape[0]:
        raise ValueError(f"channel mismatch: queries {queries.shape[0]}, "
                         f"candidates {candidates.shape[0]}")
    return dt.tensor.matmul(dt.tensor.transpose(queries, (1, 0)), candidates)


def topk_softmax(corr: T.Tensor, k: int):
    """Top-k scores per row and their softmax weights.

    Selection runs on values only (no gradient); ties take the lowest index.
    Returns ((N, k) int indices, (N, k) Tensor probabilities).
    """
    squeeze = corr.ndim == 1
    if squeeze:
        corr = dt.tensor.reshape(corr, (1, corr.shape[0]))
    if corr.ndim != 2:
        raise ValueError(f"topk_softmax expects a matrix, got {corr.shape}")
    n, x = corr.shape
    if not 1 <= k <= x:
        raise ValueError(f"k={k} outside [1, {x}]")
    idx = np.argsort(-corr.data, axis=1, kind="stable")[:, :k]
    scores = dt.tensor.take_along_axis1(corr, idx)
    probs = dt.tensor.softmax(scores, axis=1)
    if squeeze:
        idx = idx[0]
        probs = dt.tensor.reshape(probs, (k,))
    return idx, probs


def aggregate(selected: T.Tensor, probs: T.Tensor) -> T.Tensor:
    """Convex combination of selected features.

    (C, N, K) with (N, K) weights -> (C, N); or (C, K) with (K,) -> (C,).
    """
    if selected.ndim == 3:
        if probs.ndim != 2 or probs.shape != selected.shape[1:]:
            raise ValueError(f"weights {probs.shape} do not match {selected.shape}")
        w = dt.tensor.reshape(probs, (1,) + probs.shape)
        return dt.tensor.sum_(dt.tensor.mul(selected, w), axis=2)
    if selected.ndim == 2:
        if probs.ndim != 1 or probs.shape[0] != selected.shape[1]:
            raise ValueError(f"weights {probs.shape} do not match {selected.shape}")
        w = dt.tensor.reshape(probs, (1, probs.shape[0]))
        return dt.tensor.sum_(dt.tensor.mul(selected, w), axis=1)
    raise ValueError(f"aggregate expects (C, K) or (C, N, K), got {selected.shape}")


def correlate_topk_aggregate(queries: T.Tensor, candidates: T.Tensor, k: int):
    """The full read pipeline: correlate, select top-k, softmax, aggregate.

    Used identically for pillar-to-point fusion and for pillar-to-memory
    reads. Returns (aggregated (C, N), indices (N, k), probs (N, k)).
    """
    corr = correlation(queries, candidates)
    idx, probs = topk_softmax(corr, k)
    selected = dt.tensor.gather_axis1(candidates, idx)
    return aggregate(selected, probs), idx, probs


def fuse_point_features(f_vox: T.Tensor, f_pts: T.Tensor, k: int):
    """Pillar-to-point read; counted so inference can prove it never ran."""
    COUNTERS.incr(POINT_FUSION)
    return correlate_topk_aggregate(f_vox, f_pts, k)


def fused_columns(f_vox: T.Tensor, g: T.Tensor) -> T.Tensor:
    """Stack the voxel features on their aggregated partner: (2C, N)."""
    if f_vox.shape != g.shape:
        raise ValueError(f"column shapes differ: {f_vox.shape} vs {g.shape}")
    return dt.tensor.concat([f_vox, g], axis=0)


def build_fused_image(f_vox: T.Tensor, g: T.Tensor, coords: np.ndarray, grid: GridSpec) -> T.Tensor:
    """Scatter the stacked (2C, N) columns into a (2C, H, W) pseudo image.

    Both readouts (point fusion during training, memory at inference) feed
    the backbone through this one op.
    """
    return scatter_to_image(fused_columns(f_vox, g), coords, grid)
