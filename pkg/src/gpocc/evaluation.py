"""Reconstruction error metrics, log-odds occupancy grid baseline, timing stats."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .contour import ContourSegment
from .field import WALL
from .kernel import ContractViolation

METRICS_SCHEMA = "gpocc.metrics/1"


@dataclass(frozen=True)
class ReconError:
    mean_abs: float  # mm
    rmse: float  # mm
    n_samples: int


def point_segment_distances(points, segments, chunk=2048):
    """Minimum distance from each point to any of the (M, 2, 2) segments."""
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    s = np.asarray(segments, dtype=float).reshape(-1, 2, 2)
    if len(s) == 0:
        raise ContractViolation("no segments to measure against")
    a = s[:, 0]
    ab = s[:, 1] - a
    ab2 = np.einsum("ij,ij->i", ab, ab)
    out = np.empty(len(p))
    for lo in range(0, len(p), chunk):
        q = p[lo:lo + chunk, None, :] - a[None]
        t = np.clip(np.einsum("nmj,mj->nm", q, ab) / ab2, 0.0, 1.0)
        d = q - t[..., None] * ab[None]
        out[lo:lo + chunk] = np.sqrt(np.min(np.einsum("nmj,nmj->nm", d, d), axis=1))
    return out


def point_to_surface_errors(samples, world) -> ReconError:
    pts = np.asarray(samples, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise ContractViolation("point-to-surface error is undefined for zero samples")
    d = point_segment_distances(pts, world.segments) * 1000.0
    return ReconError(float(np.mean(np.abs(d))), float(np.sqrt(np.mean(d * d))), len(d))


def sample_reconstruction(segments, spacing):
    """Points along each segment at most ``spacing`` apart, endpoints included."""
    if not spacing > 0:
        raise ContractViolation("spacing must be > 0")
    out = []
    for s in segments:
        a = np.asarray(s.a if isinstance(s, ContourSegment) else s[0], dtype=float)
        b = np.asarray(s.b if isinstance(s, ContourSegment) else s[1], dtype=float)
        n = math.ceil(float(np.hypot(*(b - a))) / spacing)
        t = np.linspace(0.0, 1.0, n + 1)
        out.append(a + t[:, None] * (b - a))
    return np.concatenate(out) if out else np.zeros((0, 2))


def wall_segments(segments):
    return [s for s in segments if s.kind == WALL]


# -- occupancy grid baseline ----------------------------------------------------


@dataclass(frozen=True)
class GridConfig:
    resolution: float = 0.05
    hit: float = 0.85
    miss: float = -0.4
    occupied_threshold: float = 2.0
    free_threshold: float = -2.0
    clamp_min: float = -4.0
    clamp_max: float = 4.0

    def __post_init__(self):
        if not self.resolution > 0:
            raise ContractViolation("grid resolution must be > 0")
        if not (self.clamp_min < self.free_threshold < self.occupied_threshold < self.clamp_max):
            raise ContractViolation("need clamp_min < free_threshold < occupied_threshold < clamp_max")


class OccGrid:
    def __init__(self, origin, shape, config: GridConfig):
        self.origin = np.asarray(origin, dtype=float)
        self.config = config
        self.resolution = config.resolution
        self.log_odds = np.zeros(shape)  # [ix, iy]

    def cell_of(self, points):
        return np.floor((np.asarray(points, dtype=float) - self.origin) / self.resolution).astype(np.int64)

    def center_of(self, cells):
        return self.origin + (np.asarray(cells, dtype=float) + 0.5) * self.resolution

    def occupied_cells(self):
        return np.argwhere(self.log_odds > self.config.occupied_threshold)

    def free_cells(self):
        return np.argwhere(self.log_odds < self.config.free_threshold)

    def occupied_points(self):
        return self.center_of(self.occupied_cells())

    def update(self, scan):
        """One scan: traversed cells get the miss increment, hit cells the hit
        increment (hit wins when a cell is both); each cell updates at most once."""
        s = np.array(scan.pose.position)
        bearings = scan.pose.heading + np.asarray(scan.angles)
        ranges = np.asarray(scan.ranges)
        ends = s + ranges[:, None] * np.column_stack([np.cos(bearings), np.sin(bearings)])
        c0 = self.cell_of(s)
        c1 = self.cell_of(ends)
        miss = _line_cells(c0, c1, include_end=False)
        hits = c1[np.asarray(scan.hits)]
        nx, ny = self.log_odds.shape
        flat_miss = _flat_inside(miss, nx, ny)
        flat_hit = _flat_inside(hits, nx, ny)
        flat_miss = np.setdiff1d(flat_miss, flat_hit)
        lo = self.log_odds.reshape(-1)
        lo[flat_miss] += self.config.miss
        lo[flat_hit] += self.config.hit
        np.clip(lo, self.config.clamp_min, self.config.clamp_max, out=lo)


def _flat_inside(cells, nx, ny):
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    ok = (cells[:, 0] >= 0) & (cells[:, 0] < nx) & (cells[:, 1] >= 0) & (cells[:, 1] < ny)
    return np.unique(cells[ok, 0] * ny + cells[ok, 1])


def _line_cells(start, ends, include_end=True):
    """Integer line walk from one start cell to each end cell.

    Step k of n = max(|di|, |dj|) visits start + round(k * d / n) with the
    rounding done in integer arithmetic, so the walk is exactly reproducible.
    """
    start = np.asarray(start, dtype=np.int64)
    d = np.asarray(ends, dtype=np.int64) - start
    n = np.max(np.abs(d), axis=1)
    steps = n + 1 if include_end else n
    total = int(steps.sum())
    if total == 0:
        return np.zeros((0, 2), dtype=np.int64)
    ray = np.repeat(np.arange(len(d)), steps)
    first = np.cumsum(steps) - steps
    k = np.arange(total) - np.repeat(first, steps)
    nn = np.maximum(n[ray], 1)
    dd = d[ray]
    # round-half-away-from-zero of k*d/n, in integers
    mag = (2 * k[:, None] * np.abs(dd) + nn[:, None]) // (2 * nn[:, None])
    q = np.sign(dd) * mag
    return start + q


def baseline_occupancy_grid(scans, config: GridConfig = GridConfig(), bounds=None):
    """Log-odds grid over the scan stream; returns (grid, occupied cell centres)."""
    scans = list(scans)
    if bounds is None:
        if scans:
            pts = [np.array([sc.pose.position]) for sc in scans]
            for sc in scans:
                b = sc.pose.heading + np.asarray(sc.angles)
                r = np.asarray(sc.ranges)
                pts.append(np.array(sc.pose.position) + r[:, None] * np.column_stack([np.cos(b), np.sin(b)]))
            allp = np.concatenate(pts)
            lo, hi = allp.min(axis=0), allp.max(axis=0)
        else:
            lo, hi = np.zeros(2), np.zeros(2)
    else:
        lo, hi = np.asarray(bounds[:2], dtype=float), np.asarray(bounds[2:], dtype=float)
    h = config.resolution
    origin = np.floor(lo / h) * h - h
    shape = tuple((np.ceil((hi - origin) / h).astype(int) + 2).tolist())
    grid = OccGrid(origin, shape, config)
    for sc in scans:
        grid.update(sc)
    return grid, grid.occupied_points()


# -- timing -----------------------------------------------------------------------


def _stats(values):
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return {}
    return {
        "n": int(len(v)),
        "mean": float(v.mean()),
        "median": float(np.median(v)),
        "p95": float(np.percentile(v, 95)),
        "min": float(v.min()),
        "max": float(v.max()),
    }


def timing_report(scan_update_s=(), query_us=(), reconstruction_s=None):
    """Summary statistics; inputs are raw per-scan seconds and per-query microseconds."""
    return {
        "per_scan_update_ms": _stats(np.asarray(scan_update_s, dtype=float) * 1000.0),
        "per_query_us": _stats(query_us),
        "reconstruction_s": None if reconstruction_s is None else float(reconstruction_s),
    }


# -- metrics file -----------------------------------------------------------------


def metrics_record(env, rows, params, timing=None):
    """``rows`` maps method name -> ReconError."""
    return {
        "schema": METRICS_SCHEMA,
        "environment": env,
        "methods": [dict(method=name, **asdict(err)) for name, err in rows.items()],
        "params": params,
        "timing": timing or {},
    }


def validate_metrics(data):
    if data.get("schema") != METRICS_SCHEMA:
        raise ValueError(f"unexpected metrics schema {data.get('schema')!r}")
    for key in ("environment", "methods", "params", "timing"):
        if key not in data:
            raise ValueError(f"metrics missing {key!r}")
    for row in data["methods"]:
        for key in ("method", "mean_abs", "rmse", "n_samples"):
            if key not in row:
                raise ValueError(f"method row missing {key!r}")
        if row["rmse"] < 0 or row["mean_abs"] < 0:
            raise ValueError("negative error in metrics")
    return data
