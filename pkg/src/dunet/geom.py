"""Point-cloud geometry: neighbor search, farthest point sampling, grid
subsampling and inverse-distance interpolation stencils.

Everything here is a pure function of its (immutable) inputs.  Neighbor
queries are exact: ties in distance are broken by ascending point index, so
results agree element-for-element with an exhaustive all-pairs scan.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

BRUTE_FORCE_BELOW = 64
INTERP_EPS = 1e-8


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    """Positions plus optional per-point features and integer labels."""

    positions: np.ndarray
    features: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise GeometryError(f"positions must be (n, 3), got {pos.shape}")
        if not np.isfinite(pos).all():
            raise GeometryError("positions contain non-finite values")
        object.__setattr__(self, "positions", pos)
        n = pos.shape[0]
        if self.features is not None:
            feat = np.asarray(self.features, dtype=np.float64)
            if feat.ndim == 1:
                feat = feat[:, None]
            if feat.ndim != 2 or feat.shape[0] != n or feat.shape[1] < 1:
                raise GeometryError(f"features must be (n, d>=1) with n={n}, got {feat.shape}")
            if not np.isfinite(feat).all():
                raise GeometryError("features contain non-finite values")
            object.__setattr__(self, "features", feat)
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (n,):
                raise GeometryError(f"labels must have shape ({n},), got {lab.shape}")
            if lab.size and (not np.issubdtype(lab.dtype, np.integer) and not np.all(lab == np.round(lab))):
                raise GeometryError("labels must be integers")
            lab = lab.astype(np.int64)
            if lab.size and lab.min() < 0:
                raise GeometryError("labels must be nonnegative")
            object.__setattr__(self, "labels", lab)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        return PointCloud(
            self.positions[idx],
            None if self.features is None else self.features[idx],
            None if self.labels is None else self.labels[idx],
        )

    def check_labels(self, num_classes: int) -> None:
        if self.labels is not None and self.labels.size and self.labels.max() >= num_classes:
            raise GeometryError(f"label {int(self.labels.max())} out of range for {num_classes} classes")


@dataclass(frozen=True)
class NeighborIndex:
    indices: np.ndarray  # (n, k) int64
    distances: np.ndarray  # (n, k) float64, nondecreasing per row

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    def validate(self, n_points: int) -> None:
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= n_points):
            raise GeometryError(f"neighbor index out of range for {n_points} points")


def _positions(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.positions
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


def _sq_dist(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    # q: (m, 3) against p: (m, c, 3)
    diff = p - q[:, None, :]
    return (diff * diff).sum(-1)


def _rank(q, p, cand, kk, self_idx, include_self):
    """Exact (distance, index) ordering of candidate sets, keeping kk per row."""
    d2 = _sq_dist(q, p[cand])
    if self_idx is not None:
        is_self = cand == self_idx[:, None]
        if include_self:
            d2 = np.where(is_self, -1.0, d2)
        else:
            d2 = np.where(is_self, np.inf, d2)
    order = np.lexsort((cand, d2), axis=-1)[:, :kk]
    idx = np.take_along_axis(cand, order, axis=1)
    d2 = np.take_along_axis(d2, order, axis=1)
    return idx, np.sqrt(np.maximum(d2, 0.0))


def knn(cloud, queries=None, k: int = 16, include_self: bool = False) -> NeighborIndex:
    """k nearest cloud points for each query point.

    With ``queries=None`` the cloud is queried against itself; the query
    point is then either forced into column 0 (``include_self``) or removed
    from its own neighbor list.  An explicit ``queries`` cloud is treated as
    foreign points and nothing is excluded.
    """
    p = _positions(cloud)
    n = p.shape[0]
    if n == 0:
        raise GeometryError("empty cloud")
    if k < 1:
        raise GeometryError("k must be positive")
    self_query = queries is None
    q = p if self_query else _positions(queries)
    if not (np.isfinite(p).all() and np.isfinite(q).all()):
        raise GeometryError("non-finite coordinates")
    available = n - 1 if (self_query and not include_self) else n
    if k > available:
        raise GeometryError(f"insufficient points: k={k} but only {available} candidates")
    m = q.shape[0]
    self_idx = np.arange(m) if self_query else None
    # candidates must also cover the query itself when it is to be dropped
    need = k + 1 if (self_query and not include_self) else k

    if n < BRUTE_FORCE_BELOW or need + 8 > n:
        cand = np.broadcast_to(np.arange(n), (m, n))
        idx, dist = _rank(q, p, cand, k, self_idx, include_self)
        return NeighborIndex(idx.astype(np.int64), dist)

    tree = cKDTree(p)
    extra = 8
    d_tree, cand = tree.query(q, need + extra)
    cand = cand.astype(np.int64)
    # rows where ties may straddle the returned set need a radius query
    loose = ~(d_tree[:, need - 1] * (1 + 1e-9) + 1e-300 < d_tree[:, -1])
    idx, dist = _rank(q, p, cand, k, self_idx, include_self)
    for row in np.flatnonzero(loose):
        r = d_tree[row, need - 1] * (1 + 1e-9) + 1e-12
        c = np.asarray(sorted(tree.query_ball_point(q[row], r)), dtype=np.int64)
        ri, rd = _rank(q[row : row + 1], p, c[None, :], k,
                       None if self_idx is None else self_idx[row : row + 1], include_self)
        idx[row], dist[row] = ri[0], rd[0]
    return NeighborIndex(idx, dist)


def farthest_point_sample(cloud, m: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subsampling; ties go to the lowest index."""
    p = _positions(cloud)
    n = p.shape[0]
    if not 1 <= m <= n:
        raise GeometryError(f"cannot sample m={m} of n={n} points")
    if not 0 <= start < n:
        raise GeometryError(f"start index {start} out of range")
    selected = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = start
    for i in range(m):
        selected[i] = cur
        diff = p - p[cur]
        mind = np.minimum(mind, (diff * diff).sum(1))
        mind[cur] = -1.0
        cur = int(np.argmax(mind))
    return selected


def lexicographic_start(cloud) -> int:
    """Index of the lexicographically smallest point; independent of point order."""
    p = _positions(cloud)
    return int(np.lexsort((p[:, 2], p[:, 1], p[:, 0]))[0])


def grid_subsample(cloud: PointCloud, cell: float) -> PointCloud:
    """One point per occupied cubic cell, in ascending lexicographic cell order.

    Position and features are cell means; the label is the majority vote
    (lowest class wins a tie).
    """
    if not cell > 0:
        raise GeometryError("cell size must be positive")
    keys = np.floor(cloud.positions / cell).astype(np.int64)
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    m = int(inv.max()) + 1 if inv.size else 0
    counts = np.bincount(inv, minlength=m).astype(np.float64)

    def cell_mean(a):
        out = np.zeros((m, a.shape[1]))
        np.add.at(out, inv, a)
        return out / counts[:, None]

    pos = cell_mean(cloud.positions)
    feat = None if cloud.features is None else cell_mean(cloud.features)
    lab = None
    if cloud.labels is not None:
        votes = np.zeros((m, int(cloud.labels.max()) + 1), dtype=np.int64)
        np.add.at(votes, (inv, cloud.labels), 1)
        lab = votes.argmax(1)
    return PointCloud(pos, feat, lab)


def interp_weights(coarse, fine, k: int = 3, eps: float = INTERP_EPS):
    """Inverse-distance weights from each fine point to its k nearest coarse points."""
    pc = _positions(coarse)
    if pc.shape[0] == 0:
        raise GeometryError("empty coarse cloud")
    if pc.shape[0] < k:
        raise GeometryError(f"insufficient points: coarse cloud has {pc.shape[0]} < k={k}")
    nbr = knn(pc, _positions(fine), k)
    inv = 1.0 / (nbr.distances + eps)
    return nbr, inv / inv.sum(1, keepdims=True)
