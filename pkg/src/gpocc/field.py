"""Queryable occupancy field: FoV prior mean conditioned on voxel centroids.

Every stored centroid is an observation ``f(p) = c`` of the free/unknown
boundary. A query is answered by a small GP trained on the neighbourhood
of the closest centroid; the factorization is cached per centroid so all
queries that land on the same voxel share it.
"""
from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kernel import ConditionedGP, ContractViolation, KernelParams, NumericalFailure, SPDFactor, TrainingSet
from .prior import PriorParams, bubble_prior_many, pose_prior_many

FREE = "free"
UNKNOWN = "unknown"
WALL = "wall"
FRONTIER = "frontier"
PRIOR_MODES = ("pose_only", "bubbles")
DUPLICATE_TOL = 1e-9


@dataclass(frozen=True)
class FieldConfig:
    level_set_c: float = 1.0
    lengthscale: float = 0.3
    obs_noise_sigma2: float = 1e-6
    neighborhood_radius: float = 1.0
    variance_wall_threshold: float = 0.4
    prior_mode: str = "bubbles"
    jitter: float = 1e-10
    max_training: int = 64

    def __post_init__(self):
        if self.neighborhood_radius < 3 * self.lengthscale:
            raise ContractViolation("neighborhood_radius must be >= 3 * lengthscale")
        if not 0 < self.variance_wall_threshold < 1:
            raise ContractViolation("variance_wall_threshold must lie in (0, 1)")
        if self.prior_mode not in PRIOR_MODES:
            raise ContractViolation(f"prior_mode must be one of {PRIOR_MODES}")
        if self.obs_noise_sigma2 < 0:
            raise ContractViolation("obs_noise_sigma2 must be >= 0")
        if self.max_training < 1:
            raise ContractViolation("max_training must be >= 1")

    @property
    def kernel(self):
        return KernelParams(self.lengthscale, self.jitter)


@dataclass(frozen=True)
class FieldSample:
    mean: float
    variance: float
    occupancy_class: str
    crossing_kind: str = "none"


def classify_mean(mean, c):
    return FREE if mean > c else UNKNOWN


def classify_crossing(a: FieldSample, b: FieldSample, config: FieldConfig):
    """Wall if both straddling samples are confidently pinned, frontier otherwise."""
    c = config.level_set_c
    if (a.mean > c) == (b.mean > c):
        raise ContractViolation("samples do not straddle the level set")
    return WALL if max(a.variance, b.variance) < config.variance_wall_threshold else FRONTIER


class LatentField:
    """Read-only view of a map (voxel store + prior) answering field queries.

    Build a new one after every ingestion; ``version`` keys the cache.
    """

    def __init__(self, store, coverage=None, poses=(), config: FieldConfig = FieldConfig(),
                 prior: PriorParams | None = None, version=0):
        self.config = config
        if prior is None:
            prior = PriorParams(level_set_c=config.level_set_c, lengthscale=config.lengthscale)
        if prior.level_set_c != config.level_set_c or prior.lengthscale != config.lengthscale:
            raise ContractViolation("prior and field disagree on level set or lengthscale")
        self.prior_params = prior
        self.store = store
        self.coverage = coverage
        self.poses = list(poses)
        self.version = version
        self._index = store.snapshot()
        self._kernel = config.kernel
        self._cache = {}
        self._cache_lock = threading.Lock()
        self._prior_at_centroids = None

    # -- prior -------------------------------------------------------------

    def prior_many(self, queries):
        q = np.asarray(queries, dtype=float).reshape(-1, 2)
        if self.config.prior_mode == "pose_only" or self.coverage is None:
            return pose_prior_many(q, self.poses, self.prior_params)
        return bubble_prior_many(q, self.coverage, self.prior_params)

    def _centroid_prior(self):
        if self._prior_at_centroids is None:
            self._prior_at_centroids = self.prior_many(self._index.centroids)
        return self._prior_at_centroids

    # -- local GP ------------------------------------------------------------

    def training_rows(self, row, neighbours=None):
        """Centroids within the neighbourhood radius of centroid ``row``, closest first, capped."""
        idx = self._index
        anchor = idx.centroids[row]
        if neighbours is None:
            neighbours = idx.tree.query_ball_point(anchor, self.config.neighborhood_radius)
        rows = np.asarray(neighbours, dtype=np.int64)
        d = np.hypot(*(idx.centroids[rows] - anchor).T)
        keep = d <= self.config.neighborhood_radius
        rows, d = rows[keep], d[keep]
        order = np.lexsort((idx.keys[rows, 1], idx.keys[rows, 0], d))
        return rows[order[: self.config.max_training]]

    def local_gp(self, row, neighbours=None) -> ConditionedGP:
        key = (int(row), self.version)
        gp = self._cache.get(key)
        if gp is not None:
            return gp
        out = self._build_many([int(row)], {int(row): neighbours} if neighbours is not None else {})
        if isinstance(out[int(row)], NumericalFailure):
            raise out[int(row)]
        return out[int(row)]

    def _build_many(self, anchors, neighbours):
        """Condition the GPs of several anchors at once.

        Training sets of equal size are factorized as one stacked batch; a
        batch that fails falls back to per-anchor factorization with jitter
        escalation. Returns {row: ConditionedGP or NumericalFailure}.
        """
        cfg = self.config
        idx = self._index
        prior = self._centroid_prior()
        missing = [r for r in anchors if r not in neighbours]
        if missing:
            balls = idx.tree.query_ball_point(idx.centroids[missing], cfg.neighborhood_radius)
            neighbours = {**neighbours, **dict(zip(missing, balls))}
        groups = {}
        for r in anchors:
            rows = self.training_rows(r, neighbours[r])
            groups.setdefault(len(rows), []).append((r, rows))
        out = {}
        for n, members in groups.items():
            X = idx.centroids[np.stack([m[1] for m in members])]  # (B, n, 2)
            dx = X[:, :, None, 0] - X[:, None, :, 0]
            dy = X[:, :, None, 1] - X[:, None, :, 1]
            dist = np.sqrt(dx * dx + dy * dy)
            diag = np.arange(n)
            if n > 1:
                dist[:, diag, diag] = np.inf
                dup = dist.reshape(len(members), -1).min(axis=1) <= DUPLICATE_TOL
                dist[:, diag, diag] = 0.0
            else:
                dup = np.zeros(len(members), dtype=bool)
            gram = np.exp(dist * (-1.0 / cfg.lengthscale))
            gram[:, diag, diag] += cfg.obs_noise_sigma2
            clean = np.nonzero(~dup)[0]
            lower = None
            if len(clean):
                shifted = gram[clean].copy()
                shifted[:, diag, diag] += cfg.jitter
                try:
                    lower = np.linalg.cholesky(shifted)
                except np.linalg.LinAlgError:
                    lower = None
            done = set()
            if lower is not None:
                for j, b in enumerate(clean):
                    r, rows = members[b]
                    factor = SPDFactor.from_lower(lower[j], cfg.jitter)
                    alpha = factor.solve(cfg.level_set_c - prior[rows])
                    out[r] = ConditionedGP.from_factor(X[b], factor, alpha, self._kernel)
                    done.add(b)
            for b, (r, rows) in enumerate(members):
                if b in done:
                    continue
                Xb, db = X[b], dist[b]
                if dup[b]:
                    keep = TrainingSet(Xb, np.zeros(n)).unique_indices(DUPLICATE_TOL)
                    rows, Xb, db = rows[keep], Xb[keep], db[np.ix_(keep, keep)]
                train = TrainingSet(Xb, np.full(len(rows), cfg.level_set_c), cfg.obs_noise_sigma2)
                try:
                    out[r] = ConditionedGP(train, prior[rows], self._kernel, db)
                except NumericalFailure as exc:
                    out[r] = exc
        with self._cache_lock:
            for r, gp in out.items():
                if not isinstance(gp, NumericalFailure):
                    out[r] = self._cache.setdefault((r, self.version), gp)
        return out

    # -- evaluation ----------------------------------------------------------

    def evaluate(self, queries, errors=None, prior=None):
        """Mean and variance arrays for an (N, 2) query array.

        Points whose local solve fails get NaN; the exception is stored in
        ``errors[i]`` when a dict is passed, otherwise it propagates.
        ``prior`` may carry precomputed prior means at the queries.
        """
        q = np.asarray(queries, dtype=float).reshape(-1, 2)
        prior = self.prior_many(q) if prior is None else np.asarray(prior, dtype=float)
        mean = prior.copy()
        var = np.ones(len(q))
        if len(q) == 0 or self._index.tree is None:
            return mean, var
        rows, dist = self.store.nearest_many(q, self._index)
        supported = np.nonzero(dist <= self.config.neighborhood_radius)[0]
        if len(supported) == 0:
            return mean, var
        order = supported[np.argsort(rows[supported], kind="stable")]
        srows = rows[order]
        cuts = np.nonzero(np.diff(srows))[0] + 1
        anchors = srows[np.concatenate([[0], cuts])]
        gps = {}
        missing = []
        for r in anchors.tolist():
            gp = self._cache.get((r, self.version))
            if gp is None:
                missing.append(r)
            else:
                gps[r] = gp
        if missing:
            gps.update(self._build_many(missing, {}))
        for group in np.split(order, cuts):
            gp = gps[int(rows[group[0]])]
            if isinstance(gp, NumericalFailure):
                if errors is None:
                    raise gp.with_location(q[group[0]]) from gp
                for i in group:
                    errors[int(i)] = gp.with_location(q[i])
                mean[group] = np.nan
                var[group] = np.nan
                continue
            m, v = gp.predict(q[group], prior[group])
            mean[group] = m
            var[group] = v
        return mean, var

    def evaluate_parallel(self, queries, threads=1, chunk=2048, errors=None, prior=None):
        q = np.asarray(queries, dtype=float).reshape(-1, 2)
        if threads <= 1 or len(q) <= chunk:
            return self.evaluate(q, errors, prior)
        mean = np.empty(len(q))
        var = np.empty(len(q))
        starts = list(range(0, len(q), chunk))

        def work(lo):
            local = {} if errors is not None else None
            m, v = self.evaluate(q[lo:lo + chunk], local, None if prior is None else prior[lo:lo + chunk])
            mean[lo:lo + chunk] = m
            var[lo:lo + chunk] = v
            return lo, local

        with ThreadPoolExecutor(max_workers=threads) as pool:
            for lo, local in pool.map(work, starts):
                if local:
                    errors.update({lo + k: e for k, e in local.items()})
        return mean, var

    def _sample(self, m, v):
        return FieldSample(float(m), float(v), classify_mean(m, self.config.level_set_c))

    def query(self, x) -> FieldSample:
        m, v = self.evaluate(np.asarray(x, dtype=float).reshape(1, 2))
        return self._sample(m[0], v[0])

    def batch_query(self, points, threads=1):
        """One FieldSample per point, or the NumericalFailure raised for that point."""
        errors = {}
        m, v = self.evaluate_parallel(points, threads=threads, errors=errors)
        return [errors[i] if i in errors else self._sample(m[i], v[i]) for i in range(len(m))]


# -- raster export -------------------------------------------------------------


def grid_axes(bbox_min, bbox_max, h):
    """Node coordinates of a grid covering the box with spacing h (both ends included)."""
    nx = int(round((bbox_max[0] - bbox_min[0]) / h))
    ny = int(round((bbox_max[1] - bbox_min[1]) / h))
    xs = bbox_min[0] + h * np.arange(nx + 1)
    ys = bbox_min[1] + h * np.arange(ny + 1)
    return xs, ys


def field_rasters(field: LatentField, bbox_min, bbox_max, h, threads=1):
    xs, ys = grid_axes(bbox_min, bbox_max, h)
    gx, gy = np.meshgrid(xs, ys)
    mean, var = field.evaluate_parallel(np.column_stack([gx.ravel(), gy.ravel()]), threads=threads)
    shape = gy.shape
    mean = mean.reshape(shape)
    var = var.reshape(shape)
    cls = (mean > field.config.level_set_c).astype(np.uint8)
    return xs, ys, mean, var, cls


def write_pgm(path, image):
    """Binary 8-bit PGM; row 0 of ``image`` is written as the bottom row."""
    img = np.flipud(np.asarray(image, dtype=np.uint8))
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = int(parts[1]), int(parts[2])
    img = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return np.flipud(img)


def export_rasters(field: LatentField, bbox_min, bbox_max, h, out_dir, threads=1):
    """Write mean/variance/class rasters as PGM images and CSV matrices; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    xs, ys, mean, var, cls = field_rasters(field, bbox_min, bbox_max, h, threads)
    c = field.config.level_set_c
    images = {
        "mean": np.clip(mean / (2 * c), 0.0, 1.0) * 255,
        "variance": np.clip(var, 0.0, 1.0) * 255,
        "class": cls * 255,
    }
    paths = {}
    for name, img in images.items():
        p = out / f"{name}.pgm"
        write_pgm(p, np.round(img))
        paths[name] = p
    for name, mat in (("mean", mean), ("variance", var), ("class", cls)):
        p = out / f"{name}.csv"
        np.savetxt(p, mat, delimiter=",", fmt="%d" if name == "class" else "%.17g")
        paths[f"{name}_csv"] = p
    return paths
