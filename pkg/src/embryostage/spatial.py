"""Exact nearest-neighbour and fixed-radius queries over one frame.

Tree construction and candidate pruning are delegated to
``scipy.spatial.cKDTree`` (median splits on the widest axis, leaf size 16).
Final ranking and radius membership are decided here with a single
canonical distance, ``sqrt(sum((p - q)**2))``, so that ties break by point
id and results match a brute-force scan exactly.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

LEAF_SIZE = 16


def distances(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Canonical Euclidean distance used for every ranking decision."""
    diff = points - q
    return np.sqrt(np.sum(diff * diff, axis=-1))


class SpatialIndex:
    """Immutable kd-tree over an ``(n, 3)`` point array.

    Queries come in batched form (``*_batch``, one row per query) and as
    single-point conveniences. ``exclude`` names a point id to skip, which is
    how a point is kept from finding itself.
    """

    def __init__(self, points):
        pts = np.array(points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (n, 3) points, got shape {pts.shape}")
        if len(pts) == 0:
            raise ValueError("cannot build a spatial index over zero points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        pts.setflags(write=False)
        self.points = pts
        self._tree = cKDTree(pts, leafsize=LEAF_SIZE, balanced_tree=True, compact_nodes=True)

    def __len__(self):
        return len(self.points)

    # -- k nearest -----------------------------------------------------

    def knn_batch(self, queries, k: int, exclude=None):
        """Return ``(ids, dists)`` arrays of shape ``(m, min(k, n))``.

        Rows are ascending by distance with ties broken by lower id. Slots
        left over when the excluded id leaves too few points hold id -1 and
        distance inf.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        m, n = len(q), len(self.points)
        excl = _exclude_array(exclude, m)
        kk = min(k, n)
        ids = np.empty((m, kk), dtype=np.int64)
        dists = np.empty((m, kk))
        rows = np.arange(m)
        slack = 8
        while len(rows):
            want = min(n, kk + slack)
            _, cand = self._tree.query(q[rows], k=want)
            cand = np.asarray(cand, dtype=np.int64).reshape(len(rows), want)
            done = self._rank_rows(q[rows], cand, kk, None if excl is None else excl[rows],
                                   complete=(want == n), out_ids=ids, out_d=dists, rows=rows)
            rows = rows[~done]
            slack *= 4
        return ids, dists

    def _rank_rows(self, q, cand, kk, excl, complete, out_ids, out_d, rows):
        d = distances(self.points[cand], q[:, None, :])
        if excl is not None:
            skip = cand == excl[:, None]
            d = np.where(skip, np.inf, d)
            cand = np.where(skip, -1, cand)
        order = np.lexsort((cand, d), axis=1)
        cand = np.take_along_axis(cand, order, axis=1)
        d = np.take_along_axis(d, order, axis=1)
        if complete:
            done = np.ones(len(q), dtype=bool)
        else:
            # tree and canonical distances may disagree within rounding, so a
            # row is settled only with a clear gap behind the k-th neighbour
            kth = d[:, kk - 1]
            far = np.max(np.where(np.isinf(d), -np.inf, d), axis=1)
            done = np.isfinite(kth) & (far > kth * (1 + 1e-9) + 1e-300)
        out_ids[rows[done]] = cand[done, :kk]
        out_d[rows[done]] = d[done, :kk]
        return done

    def knn(self, q, k: int, exclude=None):
        """List of ``(point id, distance)`` for the k nearest points to ``q``."""
        ids, d = self.knn_batch(np.asarray(q, dtype=np.float64)[None, :], k,
                                None if exclude is None else [exclude])
        return [(int(i), float(x)) for i, x in zip(ids[0], d[0]) if np.isfinite(x)]

    def nearest_other(self, ids=None):
        """Nearest neighbour of every indexed point, excluding itself."""
        if ids is None:
            ids = np.arange(len(self.points))
        nid, nd = self.knn_batch(self.points[ids], 1, exclude=ids)
        return nid[:, 0], nd[:, 0]

    # -- radius counts ------------------------------------------------------

    def count_in_radius_batch(self, queries, r: float, exclude=None) -> np.ndarray:
        """Exact count of points with distance ``<= r`` from each query."""
        if not r > 0:
            raise ValueError("radius must be positive")
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        excl = _exclude_array(exclude, len(q))
        # counts are certain unless some point falls in a thin band around r;
        # only those rows get the canonical membership test
        wide = self._tree.query_ball_point(q, r * (1 + 1e-9) + 1e-300, return_length=True)
        narrow = self._tree.query_ball_point(q, r * (1 - 1e-9), return_length=True)
        counts = np.asarray(narrow, dtype=np.int64)
        for i in np.flatnonzero(wide != narrow):
            cand = np.asarray(self._tree.query_ball_point(q[i], r * (1 + 1e-9) + 1e-300), dtype=np.int64)
            counts[i] = np.count_nonzero(distances(self.points[cand], q[i]) <= r)
        if excl is not None:
            has = excl >= 0
            own = self.points[np.where(has, excl, 0)]
            counts -= (has & (distances(own, q) <= r)).astype(np.int64)
        return counts

    def count_in_radius(self, q, r: float, exclude=None) -> int:
        return int(self.count_in_radius_batch(np.asarray(q, dtype=np.float64)[None, :], r,
                                              None if exclude is None else [exclude])[0])


def _exclude_array(exclude, m):
    if exclude is None:
        return None
    excl = np.asarray(exclude, dtype=np.int64).reshape(-1)
    if excl.size == 1 and m != 1:
        excl = np.full(m, excl[0])
    if len(excl) != m:
        raise ValueError("exclude must give one id per query")
    return excl

