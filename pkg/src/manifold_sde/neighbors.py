"""Exact spatial queries over a point cloud.

A thin layer over :class:`scipy.spatial.cKDTree` that pins down the two
contracts the rest of the package relies on: radius balls are inclusive
(``dist <= h``, with distances recomputed exactly in numpy) and k-NN results
are ordered by ``(distance, index)`` so that ties go to the smaller index.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParameterError

# cKDTree distances may differ from numpy's in the last ulp; candidate sets are
# fetched with a slightly inflated radius and then filtered exactly.
_SLACK = 1e-9


def _exact_dist(points, idx, x):
    diff = points[idx] - x
    return np.sqrt(np.einsum("...j,...j->...", diff, diff))


class SpatialIndex:
    """Immutable exact index over an ``N x n`` point matrix."""

    def __init__(self, points):
        points = np.ascontiguousarray(points, dtype=float)
        if points.ndim != 2 or len(points) < 1:
            raise ParameterError("cannot index an empty cloud")
        self.points = points
        self._tree = cKDTree(points, balanced_tree=True, compact_nodes=True)

    def __len__(self):
        return len(self.points)

    def radius_query(self, x, h: float) -> list[int]:
        """Sorted indices i with ``||x_i - x|| <= h``."""
        if not h > 0:
            raise ParameterError(f"radius must be > 0, got {h}")
        x = np.asarray(x, dtype=float)
        cand = np.asarray(self._tree.query_ball_point(x, h * (1 + _SLACK) + _SLACK), dtype=int)
        if cand.size == 0:
            return []
        keep = cand[_exact_dist(self.points, cand, x) <= h]
        return sorted(int(i) for i in keep)

    def knn_query(self, x, k: int) -> list[tuple[int, float]]:
        """The k nearest points as ``(index, distance)``, ties to the smaller index."""
        idx, dist = self.knn_batch(np.asarray(x, dtype=float)[None, :], k)
        return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]

    def knn_batch(self, X, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized :meth:`knn_query` for an ``M x n`` query matrix.

        Returns ``(indices, distances)``, each of shape ``M x k``.
        """
        N = len(self.points)
        if not 1 <= k <= N:
            raise ParameterError(f"k must lie in [1, {N}], got {k}")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        kq = min(k + 1, N)
        _, cand = self._tree.query(X, k=kq)
        cand = np.asarray(cand).reshape(len(X), kq)
        d = _exact_dist(self.points, cand, X[:, None, :])
        order = np.lexsort((cand, d), axis=-1)
        cand = np.take_along_axis(cand, order, axis=1)
        d = np.take_along_axis(d, order, axis=1)
        out_i, out_d = cand[:, :k].copy(), d[:, :k].copy()
        if kq > k:
            # The (k+1)-th candidate may tie with the k-th; other points at that
            # same distance could then be missing from the candidate set.
            tied = np.nonzero(d[:, k] <= d[:, k - 1] * (1 + _SLACK) + _SLACK)[0]
            for m in tied:
                ball = np.asarray(self._tree.query_ball_point(X[m], d[m, k] * (1 + _SLACK) + _SLACK), dtype=int)
                bd = _exact_dist(self.points, ball, X[m])
                o = np.lexsort((ball, bd))[:k]
                out_i[m], out_d[m] = ball[o], bd[o]
        return out_i, out_d

    def nearest(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Nearest point index and distance for each row of ``X``."""
        i, d = self.knn_batch(X, 1)
        return i[:, 0], d[:, 0]


def build_index(cloud) -> SpatialIndex:
    """Index a :class:`PointCloud` (or a raw point matrix)."""
    return SpatialIndex(getattr(cloud, "points", cloud))
