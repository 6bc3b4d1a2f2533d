"""Field-of-view shaped prior means.

Every pseudo-pose (a sensor position with its max range, or a bubble with
its inflated radius) contributes ``c * exp((r_eff - d) / l)``, which is
exactly ``gamma * k(d)`` with ``gamma = c / k(r_eff)``: above the level set
``c`` inside the disc of radius ``r_eff``, equal to it on the rim, below
outside. The prior is the maximum over contributions.

Bubbles are grown incrementally from each scan so that their union
follows the actual observed free space instead of a max-range disc.
"""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .kernel import ContractViolation
from .sensor import SensorPose, SensorScan

log = logging.getLogger(__name__)

ACTIVE = "active"
FIXED = "fixed"
COVERAGE_SCHEMA = "gpocc.bubbles/1"


@dataclass(frozen=True)
class PriorParams:
    level_set_c: float = 1.0
    lengthscale: float = 0.3
    clearance: float = 0.2
    r_min: float = 0.15
    r_max_bubble: float = 2.0
    boundary_samples: int = 16
    overlap_factor: float = 0.7
    prior_floor_eps: float | None = None  # None -> 1e-3 * c

    def __post_init__(self):
        if not 0 < self.r_min < self.r_max_bubble:
            raise ContractViolation("need 0 < r_min < r_max_bubble")
        if not self.clearance > 0:
            raise ContractViolation("clearance must be > 0")
        if self.boundary_samples < 8:
            raise ContractViolation("boundary_samples must be >= 8")
        if not 0 < self.overlap_factor < 1:
            raise ContractViolation("overlap_factor must lie in (0, 1)")
        if not self.lengthscale > 0:
            raise ContractViolation("lengthscale must be > 0")
        if not self.level_set_c > 0:
            raise ContractViolation("level set c must be > 0")

    @property
    def floor(self):
        return 1e-3 * self.level_set_c if self.prior_floor_eps is None else self.prior_floor_eps

    @property
    def prune_margin(self):
        """Beyond r_eff + this distance a contribution is below the prior floor."""
        return self.lengthscale * math.log(self.level_set_c / self.floor)


def gamma(r_effective, params: PriorParams):
    """Scale that puts ``gamma * k(r_effective)`` exactly on the level set."""
    if r_effective < 0:
        raise ContractViolation("effective range must be non-negative")
    return params.level_set_c * math.exp(r_effective / params.lengthscale)


def _distances(queries, centers):
    return cdist(queries, centers)


def _pose_arrays(poses):
    centers = np.array([[p.x, p.y] for p in poses], dtype=float).reshape(-1, 2)
    reach = np.array([p.r_max for p in poses], dtype=float)
    return centers, reach


def _max_exponent(queries, centers, reach, prune=None, chunk=4096):
    """max_i (reach_i - |q - center_i|), optionally ignoring terms beyond ``prune``."""
    out = np.full(len(queries), -np.inf)
    if len(centers) == 0:
        return out
    for lo in range(0, len(queries), chunk):
        t = reach[None, :] - _distances(queries[lo:lo + chunk], centers)
        if prune is not None:
            t = np.where(t >= -prune, t, -np.inf)
        out[lo:lo + chunk] = t.max(axis=1)
    return out


def _from_exponent(t, params):
    with np.errstate(over="ignore"):
        return np.where(np.isfinite(t), params.level_set_c * np.exp(t / params.lengthscale), 0.0)


def pose_prior_many(queries, poses, params: PriorParams):
    """Vectorized pose prior: max_i gamma_i k(|x - s_i|); 0 with no poses."""
    q = np.asarray(queries, dtype=float).reshape(-1, 2)
    centers, reach = _pose_arrays(poses)
    return _from_exponent(_max_exponent(q, centers, reach), params)


def pose_prior_mean(x, poses, params: PriorParams):
    return float(pose_prior_many([x], poses, params)[0])


@dataclass
class Bubble:
    center: tuple
    radius: float
    state: str = ACTIVE


class BubbleCoverage:
    """Growing set of bubbles plus the poses that had to fall back to pose-only prior."""

    def __init__(self):
        self._centers = np.zeros((16, 2))
        self._radii = np.zeros(16)
        self._n = 0
        self.states = []
        self.fallback_poses = []
        self._tree = None
        self._tree_n = -1

    def __len__(self):
        return self._n

    @property
    def centers(self):
        return self._centers[: self._n]

    @property
    def radii(self):
        return self._radii[: self._n]

    def bubbles(self):
        return [Bubble(tuple(c), float(r), s) for c, r, s in zip(self.centers, self.radii, self.states)]

    def add(self, center, radius, state=ACTIVE):
        if self._n == len(self._radii):
            self._centers = np.vstack([self._centers, np.zeros_like(self._centers)])
            self._radii = np.concatenate([self._radii, np.zeros_like(self._radii)])
        self._centers[self._n] = center
        self._radii[self._n] = radius
        self.states.append(state)
        self._n += 1
        return self._n - 1

    def tree(self):
        if self._tree_n != self._n:
            self._tree = cKDTree(self.centers) if self._n else None
            self._tree_n = self._n
        return self._tree

    def effective_radii(self, params):
        return self.radii + 2.0 * params.clearance

    def to_dict(self):
        return {
            "schema": COVERAGE_SCHEMA,
            "bubbles": [[float(c[0]), float(c[1]), float(r), s] for c, r, s in zip(self.centers, self.radii, self.states)],
            "fallback_poses": [[p.x, p.y, p.heading, p.fov_half_angle, p.r_max] for p in self.fallback_poses],
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("schema") != COVERAGE_SCHEMA:
            raise ValueError(f"unsupported bubble snapshot schema {data.get('schema')!r}")
        cov = cls()
        for x, y, r, s in data["bubbles"]:
            cov.add((x, y), r, s)
        cov.fallback_poses = [SensorPose(*p) for p in data.get("fallback_poses", [])]
        return cov

    def dumps(self):
        return json.dumps(self.to_dict())


def bubble_prior_many(queries, coverage: BubbleCoverage, params: PriorParams):
    """Dense evaluation of the bubble prior with the same pruning rule as the single-point path."""
    q = np.asarray(queries, dtype=float).reshape(-1, 2)
    t = _max_exponent(q, coverage.centers, coverage.effective_radii(params), prune=params.prune_margin)
    if coverage.fallback_poses:
        centers, reach = _pose_arrays(coverage.fallback_poses)
        t = np.maximum(t, _max_exponent(q, centers, reach))
    return _from_exponent(t, params)


def bubble_prior_mean(x, coverage: BubbleCoverage, params: PriorParams):
    """Bubble prior at one point, looking up candidate bubbles by radius search."""
    q = np.asarray(x, dtype=float).reshape(1, 2)
    t = np.array([-np.inf])
    tree = coverage.tree()
    if tree is not None:
        reach = coverage.effective_radii(params)
        rows = tree.query_ball_point(q[0], float(reach.max()) + params.prune_margin)
        if rows:
            rows = np.sort(np.asarray(rows))
            t = _max_exponent(q, coverage.centers[rows], reach[rows], prune=params.prune_margin)
    if coverage.fallback_poses:
        centers, reach = _pose_arrays(coverage.fallback_poses)
        t = np.maximum(t, _max_exponent(q, centers, reach))
    return float(_from_exponent(t, params)[0])


class FovRegion:
    """Observed-region test for one scan (angular sector, interpolated ranges)."""

    def __init__(self, scan: SensorScan):
        if len(scan.angles) < 1:
            raise ContractViolation("scan needs at least one ray")
        self.pose = scan.pose
        self.origin = np.array([scan.pose.x, scan.pose.y])
        self.angles = scan.angles
        self.ranges = np.minimum(scan.ranges, scan.pose.r_max)
        n = len(self.angles)
        self._regular = (
            scan.increment is not None and scan.pose.omnidirectional and n > 1
            and abs(scan.increment * n - 2 * math.pi) < 1e-9
        )
        if self._regular:
            self._a0 = self.angles[0]
            self._inc = scan.increment
            self._wrapped = np.append(self.ranges, self.ranges[0])

    def _interp_regular(self, bearing):
        n = len(self.ranges)
        u = np.mod(bearing - self._a0, 2 * math.pi) / self._inc
        i = np.minimum(np.floor(u).astype(np.int64), n - 1)
        frac = u - i
        return self._wrapped[i] * (1.0 - frac) + self._wrapped[i + 1] * frac

    def contains_many(self, points, margin=0.0):
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        v = p - self.origin
        dist = np.hypot(v[:, 0], v[:, 1])
        bearing = np.arctan2(v[:, 1], v[:, 0]) - self.pose.heading
        bearing = (bearing + math.pi) % (2 * math.pi) - math.pi
        if self._regular:
            r = self._interp_regular(bearing)
            inside = np.ones(len(p), dtype=bool)
        elif self.pose.omnidirectional:
            r = np.interp(bearing, self.angles, self.ranges, period=2 * math.pi)
            inside = np.ones(len(p), dtype=bool)
        else:
            r = np.interp(bearing, self.angles, self.ranges)
            inside = np.abs(bearing) <= self.pose.fov_half_angle
        return inside & (dist + margin <= r)


def fov_contains(scan: SensorScan, x, margin=0.0):
    return bool(FovRegion(scan).contains_many([x], margin)[0])


def reactivate_for_scan(coverage: BubbleCoverage, scan: SensorScan):
    """Mark fixed bubbles overlapping the scan's max-range disc active again."""
    if len(coverage) == 0:
        return []
    s = np.array([scan.pose.x, scan.pose.y])
    d = np.hypot(*(coverage.centers - s).T)
    rows = np.nonzero(d <= scan.pose.r_max + coverage.radii)[0]
    out = []
    for i in rows.tolist():
        if coverage.states[i] == FIXED:
            coverage.states[i] = ACTIVE
            out.append(i)
    return out


@dataclass
class GrowthResult:
    added: list = field(default_factory=list)
    refixed: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    seeded: bool = False
    # edf(center) - radius - clearance at creation, one per added bubble
    clearance_margins: list = field(default_factory=list)


def grow_bubbles(coverage: BubbleCoverage, scan: SensorScan, store, params: PriorParams) -> GrowthResult:
    """Expand ``coverage`` into the free space seen by ``scan``.

    ``store`` must already hold the scan's points. Deterministic: the queue
    is FIFO, boundary candidates start at angle 0, and existing bubbles are
    visited in creation order.
    """
    result = GrowthResult()
    fov = FovRegion(scan)
    s = fov.origin
    cl = params.clearance
    K = params.boundary_samples
    ring = np.column_stack([np.cos(2 * np.pi * np.arange(K) / K), np.sin(2 * np.pi * np.arange(K) / K)])

    requeued = set(reactivate_for_scan(coverage, scan))
    n0 = len(coverage)
    queue = deque()

    contained = n0 > 0 and bool(np.any(np.hypot(*(coverage.centers - s).T) <= coverage.radii))
    if not contained:
        e = store.edf(s)
        r = min(e - cl, params.r_max_bubble)
        if r < params.r_min:
            msg = f"no room for a seed bubble at ({s[0]:.3f}, {s[1]:.3f}); using pose-only prior for this pose"
            log.info(msg)
            result.diagnostics.append(msg)
            coverage.fallback_poses.append(scan.pose)
        else:
            i = coverage.add(s, r)
            result.added.append(i)
            result.clearance_margins.append(e - r - cl)
            result.seeded = True
            queue.append(i)

    if n0:
        d = np.hypot(*(coverage.centers[:n0] - s).T)
        queue.extend(np.nonzero(d <= scan.pose.r_max + coverage.radii[:n0])[0].tolist())

    def static_checks(rows):
        """Candidates, FoV/radius acceptance and new radii for bubbles ``rows`` (order independent)."""
        cands = coverage.centers[rows][:, None, :] + coverage.radii[rows][:, None, None] * ring[None]
        flat = cands.reshape(-1, 2)
        ok = fov.contains_many(flat, cl)
        edf = np.full(len(flat), -np.inf)
        if ok.any():
            edf[ok] = store.edf_many(flat[ok])
        r_new = np.minimum(edf - cl, params.r_max_bubble)
        ok &= r_new >= params.r_min
        return cands, ok.reshape(-1, K), r_new.reshape(-1, K), edf.reshape(-1, K)

    def blocked_by(points, upto):
        """Overlap test against bubbles [0, upto)."""
        if len(points) == 0 or upto == 0:
            return np.zeros(len(points), dtype=bool)
        return np.any(
            _distances(points, coverage.centers[:upto]) < params.overlap_factor * coverage.radii[:upto][None, :],
            axis=1,
        )

    n_base = len(coverage)
    pending = {}
    if queue:
        rows = np.asarray(queue, dtype=np.int64)
        cands, ok, r_new, edf = static_checks(rows)
        hit = ok.any(axis=1)
        blocked = np.zeros_like(ok)
        if hit.any():
            blocked[ok] = blocked_by(cands[ok], n_base)
        for j, b in enumerate(rows.tolist()):
            pending[b] = (cands[j], ok[j] & ~blocked[j], r_new[j], edf[j])

    while queue:
        b = queue.popleft()
        if b in pending:
            cands, ok, r_new, edf = pending.pop(b)
        else:
            cands, ok, r_new, edf = (a[0] for a in static_checks(np.array([b])))
            if ok.any():
                ok = ok.copy()
                ok[ok] = ~blocked_by(cands[ok], n_base)
        accepted = 0
        for k in np.nonzero(ok)[0]:
            if len(coverage) > n_base:
                fresh = slice(n_base, len(coverage))
                gap = np.hypot(*(coverage.centers[fresh] - cands[k]).T)
                if np.any(gap < params.overlap_factor * coverage.radii[fresh]):
                    continue
            i = coverage.add(cands[k], float(r_new[k]))
            result.added.append(i)
            result.clearance_margins.append(float(edf[k] - r_new[k] - cl))
            queue.append(i)
            accepted += 1
        if accepted == 0:
            coverage.states[b] = FIXED
            if b in requeued:
                result.refixed.append(b)
        else:
            coverage.states[b] = ACTIVE
    return result


def check_clearance(coverage: BubbleCoverage, store, params: PriorParams, slack=0.0):
    """Indices of bubbles whose clearance against the store is violated by more than ``slack``."""
    if len(coverage) == 0:
        return []
    e = store.edf_many(coverage.centers)
    bad = e + slack < coverage.radii + params.clearance - 1e-12
    return np.nonzero(bad)[0].tolist()
