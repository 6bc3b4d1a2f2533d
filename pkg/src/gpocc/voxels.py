"""Voxel-centroid point storage.

Points are bucketed into square cells of side ``resolution``; each cell
keeps the running mean of every point it ever received. A KD-tree over
the centroids answers nearest / radius queries and gives the exact
Euclidean distance field of the map.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

SNAPSHOT_SCHEMA = "gpocc.voxels/1"


@dataclass
class InsertResult:
    cells_touched: int
    cells_created: int
    rejected: list = field(default_factory=list)


class _Index:
    """Immutable view of the store, swapped in whole after every batch."""

    __slots__ = ("keys", "centroids", "counts", "tree")

    def __init__(self, keys, centroids, counts):
        self.keys = keys
        self.centroids = centroids
        self.counts = counts
        self.tree = cKDTree(centroids) if len(centroids) else None


class VoxelStore:
    def __init__(self, resolution=0.05):
        if not resolution > 0:
            raise ValueError("resolution must be > 0")
        self.resolution = float(resolution)
        self._slot = {}  # (ix, iy) -> row in the arrays below
        self._keys = np.zeros((0, 2), dtype=np.int64)
        self._centroids = np.zeros((0, 2))
        self._counts = np.zeros(0, dtype=np.int64)
        self._write_lock = threading.Lock()
        self._index = _Index(self._keys, self._centroids, self._counts)

    def __len__(self):
        return len(self._index.centroids)

    @property
    def centroids(self):
        return self._index.centroids

    @property
    def counts(self):
        return self._index.counts

    @property
    def keys(self):
        return self._index.keys

    def snapshot(self):
        """Consistent (keys, centroids, counts, tree) view for readers."""
        return self._index

    def cell_of(self, point):
        p = np.asarray(point, dtype=float)
        return (int(np.floor(p[0] / self.resolution)), int(np.floor(p[1] / self.resolution)))

    def insert_points(self, points) -> InsertResult:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        finite = np.all(np.isfinite(pts), axis=1)
        rejected = [tuple(p) for p in pts[~finite]]
        pts = pts[finite]
        if len(pts) == 0:
            return InsertResult(0, 0, rejected)

        cells = np.floor(pts / self.resolution).astype(np.int64)
        uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        n_new = np.bincount(inverse, minlength=len(uniq))
        sums = np.zeros((len(uniq), 2))
        np.add.at(sums, inverse, pts)
        batch_mean = sums / n_new[:, None]

        with self._write_lock:
            keys = self._keys.copy()
            centroids = self._centroids.copy()
            counts = self._counts.copy()
            new_keys, new_cent, new_counts = [], [], []
            created = 0
            for (ix, iy), mu, k in zip(uniq.tolist(), batch_mean, n_new.tolist()):
                row = self._slot.get((ix, iy))
                if row is None:
                    self._slot[(ix, iy)] = len(keys) + len(new_keys)
                    new_keys.append((ix, iy))
                    new_cent.append(mu)
                    new_counts.append(k)
                    created += 1
                else:
                    n = counts[row]
                    centroids[row] = centroids[row] + (mu - centroids[row]) * (k / (n + k))
                    counts[row] = n + k
            if new_keys:
                keys = np.vstack([keys, np.asarray(new_keys, dtype=np.int64)])
                centroids = np.vstack([centroids, np.asarray(new_cent)])
                counts = np.concatenate([counts, np.asarray(new_counts, dtype=np.int64)])
            self._keys, self._centroids, self._counts = keys, centroids, counts
            self._index = _Index(keys, centroids, counts)
        return InsertResult(len(uniq), created, rejected)

    def rebuild_index(self):
        with self._write_lock:
            self._index = _Index(self._keys, self._centroids, self._counts)

    # -- queries ---------------------------------------------------------

    def nearest_many(self, queries, index=None):
        """Nearest centroid row and distance for each query.

        Exact ties are broken by lexicographic cell index. Empty store gives
        row -1 and distance inf.
        """
        idx = index or self._index
        q = np.asarray(queries, dtype=float).reshape(-1, 2)
        if idx.tree is None:
            return np.full(len(q), -1, dtype=np.int64), np.full(len(q), np.inf)
        k = min(2, len(idx.centroids))
        dist, rows = idx.tree.query(q, k=k)
        if k == 1:
            return rows.astype(np.int64), dist
        best_d, best_r = dist[:, 0].copy(), rows[:, 0].astype(np.int64)
        for i in np.nonzero(dist[:, 1] == dist[:, 0])[0]:
            # pad the radius: the ball query rounds differently from the k-NN query
            ties = idx.tree.query_ball_point(q[i], best_d[i] * (1 + 1e-9) + 1e-12)
            if not ties:
                continue
            d = np.hypot(*(idx.centroids[ties] - q[i]).T)
            ties = [t for t, dt in zip(ties, d) if dt == d.min()]
            best_r[i] = min(ties, key=lambda t: tuple(idx.keys[t]))
            best_d[i] = float(np.hypot(*(idx.centroids[best_r[i]] - q[i])))
        return best_r, best_d

    def nearest_centroid(self, query):
        """(centroid, distance) of the nearest stored centroid, or None if empty."""
        rows, dist = self.nearest_many([query])
        if rows[0] < 0:
            return None
        return tuple(self._index.centroids[rows[0]]), float(dist[0])

    def radius_search(self, query, radius):
        """Centroids within ``radius`` of ``query``, closest first."""
        if not radius > 0:
            raise ValueError("radius must be > 0")
        idx = self._index
        if idx.tree is None:
            return []
        q = np.asarray(query, dtype=float)
        rows = idx.tree.query_ball_point(q, radius)
        if not rows:
            return []
        rows = np.asarray(rows)
        d = np.hypot(*(idx.centroids[rows] - q).T)
        keep = d <= radius
        rows, d = rows[keep], d[keep]
        order = np.lexsort((idx.keys[rows, 1], idx.keys[rows, 0], d))
        return [tuple(idx.centroids[r]) for r in rows[order]]

    def edf(self, query):
        return float(self.edf_many([query])[0])

    def edf_many(self, queries):
        """Distance to the closest centroid; inf for an empty store."""
        idx = self._index
        q = np.asarray(queries, dtype=float).reshape(-1, 2)
        if idx.tree is None:
            return np.full(len(q), np.inf)
        d, _ = idx.tree.query(q)
        return d

    # -- persistence -----------------------------------------------------

    def to_dict(self):
        idx = self._index
        return {
            "schema": SNAPSHOT_SCHEMA,
            "resolution": self.resolution,
            "cells": [
                [int(k[0]), int(k[1]), float(c[0]), float(c[1]), int(n)]
                for k, c, n in zip(idx.keys, idx.centroids, idx.counts)
            ],
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("schema") != SNAPSHOT_SCHEMA:
            raise ValueError(f"unsupported voxel snapshot schema {data.get('schema')!r}")
        store = cls(data["resolution"])
        cells = data["cells"]
        if cells:
            arr = np.asarray(cells, dtype=object)
            store._keys = np.asarray(arr[:, :2].tolist(), dtype=np.int64)
            store._centroids = np.asarray(arr[:, 2:4].tolist(), dtype=float)
            store._counts = np.asarray(arr[:, 4].tolist(), dtype=np.int64)
            store._slot = {(int(k[0]), int(k[1])): i for i, k in enumerate(store._keys)}
        store.rebuild_index()
        return store

    def dumps(self):
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))
