"""Signed K-nearest-neighbour index over classifier vectors.

Two balanced KD-trees, one per label sign, rebuilt lazily after
mutations.  Rebuilds are O(M log M) and amortize to nothing against the
O(M) mutation bursts the online updates produce; queries are O(log M).
Distances are Euclidean in the raw coordinates (the kernel warp is
applied by callers afterwards).
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


class SpatialIndex:
    """Mutable (point, id, sign) store with signed KNN lookup.

    Ties in distance are broken toward the smaller id.
    """

    def __init__(self, dim: int = 2):
        self._dim = dim
        self._points: dict[int, np.ndarray] = {}
        self._signs: dict[int, int] = {}
        self._trees = {1: None, -1: None}
        self._ids = {1: [], -1: []}
        self._dirty = True

    def __len__(self) -> int:
        return len(self._points)

    def insert(self, point, id_: int, sign: int) -> None:
        if sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        if id_ in self._points:
            raise KeyError(f"id {id_} already present")
        p = np.asarray(point, dtype=float).ravel()
        if p.shape != (self._dim,):
            raise ValueError("point dimension mismatch")
        self._points[id_] = p
        self._signs[id_] = sign
        self._dirty = True

    def remove(self, id_: int) -> None:
        if id_ not in self._points:
            raise KeyError(f"id {id_} not in index")
        del self._points[id_]
        del self._signs[id_]
        self._dirty = True

    def _rebuild(self) -> None:
        for sign in (1, -1):
            ids = sorted(i for i, s in self._signs.items() if s == sign)
            self._ids[sign] = ids
            if ids:
                pts = np.asarray([self._points[i] for i in ids])
                self._trees[sign] = cKDTree(pts)
            else:
                self._trees[sign] = None
        self._dirty = False

    def _query(self, x: np.ndarray, k: int, sign: int) -> list:
        ids = self._ids[sign]
        if k <= 0 or not ids:
            return []
        k_eff = min(k, len(ids))
        dist, idx = self._trees[sign].query(x, k=k_eff)
        idx = np.atleast_1d(idx)
        dist = np.atleast_1d(dist)
        # stable order: by distance, then id
        pairs = sorted((float(d), ids[int(i)]) for d, i in zip(dist, idx))
        return [i for _, i in pairs]

    def knn_signed(self, x, k_pos: int, k_neg: int) -> tuple:
        """Ids of the k_pos nearest positive and k_neg nearest negative
        entries, each distance-sorted; shorter lists when fewer exist."""
        if k_pos < 0 or k_neg < 0:
            raise ValueError("k must be nonnegative")
        if self._dirty:
            self._rebuild()
        x = np.asarray(x, dtype=float).ravel()
        return self._query(x, k_pos, 1), self._query(x, k_neg, -1)
