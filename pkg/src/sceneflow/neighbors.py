"""Exact nearest-neighbor search with deterministic tie-breaking.

A :class:`SpatialIndex` wraps :class:`scipy.spatial.cKDTree` for candidate
generation, then re-ranks candidates by squared distance computed in a
fixed component order, breaking ties by the smaller point id. Results are
therefore identical to a brute-force linear scan, ids and distances alike.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError
from .geometry import as_points

# Extra candidates requested beyond k so that ties straddling the k-th place
# are usually resolved without a fallback scan.
_SLACK = 4
_TIE_RTOL = 1e-9


def sqdist(a, b) -> np.ndarray:
    """Squared Euclidean distance, summed x, y, z in that order."""
    d = np.asarray(a) - np.asarray(b)
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


class SpatialIndex:
    """Immutable exact k-NN index over a point cloud.

    Parameters
    ----------
    cloud : PointCloud or array_like, shape (N, 3)
        Non-empty set of points. Point ids are row positions.
    leaf_size : int
        Leaf size of the underlying tree.
    """

    def __init__(self, cloud, leaf_size: int = 16):
        pts = np.ascontiguousarray(as_points(cloud), dtype=np.float64)
        if len(pts) == 0:
            raise InvalidInputError("cannot build a spatial index over an empty cloud")
        pts.setflags(write=False)
        self.points = pts
        self.leaf_size = leaf_size
        self._tree = cKDTree(pts, leafsize=leaf_size, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries, k: int):
        """Batched exact k-NN.

        Returns
        -------
        ids : ndarray of int, shape (M, min(k, N))
        sq_dists : ndarray of float, shape (M, min(k, N))
            Sorted ascending by squared distance, then by id.
        """
        if k < 1:
            raise InvalidInputError(f"k must be >= 1, got {k}")
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        kk = min(k, n)
        if len(q) == 0:
            return np.empty((0, kk), dtype=np.intp), np.empty((0, kk))
        extra = min(n, kk + _SLACK)
        _, cand = self._tree.query(q, k=list(range(1, extra + 1)))
        cand = cand.astype(np.intp)
        d = sqdist(q[:, None, :], self.points[cand])
        order = np.lexsort((cand, d), axis=-1)
        cand = np.take_along_axis(cand, order, axis=1)
        d = np.take_along_axis(d, order, axis=1)
        ids, dist = cand[:, :kk].copy(), d[:, :kk].copy()
        if extra < n:
            # Points the tree did not return are at least as far as the last
            # candidate; rescan rows where that bound does not separate them.
            kth = d[:, kk - 1]
            unsafe = d[:, -1] <= kth * (1 + _TIE_RTOL) + 1e-300
            for row in np.flatnonzero(unsafe):
                ids[row], dist[row] = self._scan(q[row], kk)
        return ids, dist

    def _scan(self, query, k):
        d = sqdist(self.points, query)
        order = np.lexsort((np.arange(len(d)), d))[:k]
        return order, d[order]

    def knn(self, query, k: int):
        """k nearest neighbors of one query as a list of ``(id, sq_dist)``."""
        ids, d = self.query(np.asarray(query, dtype=np.float64).reshape(1, 3), k)
        return [(int(i), float(s)) for i, s in zip(ids[0], d[0])]

    def nearest(self, query):
        """``(id, sq_dist)`` of the closest indexed point."""
        return self.knn(query, 1)[0]

    def nearest_many(self, queries):
        ids, d = self.query(queries, 1)
        return ids[:, 0], d[:, 0]

    def query_excluding_self(self, k: int):
        """k nearest neighbors of every indexed point, that point left out.

        Requires ``len(self) > k``.
        """
        n = len(self.points)
        if n <= k:
            raise InvalidInputError(f"need more than k={k} points, got {n}")
        ids, d = self.query(self.points, k + 1)
        own = np.arange(n)[:, None]
        is_self = ids == own
        # With duplicate points the query point may not rank first; drop its
        # own entry wherever it is, else the farthest candidate.
        drop = np.where(is_self.any(axis=1), is_self.argmax(axis=1), k)
        keep = np.ones_like(ids, dtype=bool)
        keep[np.arange(n), drop] = False
        return ids[keep].reshape(n, k), d[keep].reshape(n, k)


def build(cloud, leaf_size: int = 16) -> SpatialIndex:
    return SpatialIndex(cloud, leaf_size)
