"""Deterministic 2D lidar simulation over polyline worlds.

World files are JSON::

    {"name": "...", "bounds": [xmin, ymin, xmax, ymax],
     "obstacles": [{"points": [[x, y], ...], "closed": true}, ...],
     "trajectory": {"waypoints": [[x, y], ...], "step": 0.1}}

``trajectory`` is optional and only used by the bundled worlds.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .sensor import SensorPose, SensorScan, scan_to_points  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

BUNDLED_WORLDS = ("env_a", "env_b")


class WorldError(ValueError):
    pass


@dataclass
class World:
    obstacles: list
    bounds: tuple
    closed: list = field(default_factory=list)
    name: str = "world"
    waypoints: list | None = None
    step: float = 0.1

    def __post_init__(self):
        self.obstacles = [np.asarray(o, dtype=float).reshape(-1, 2) for o in self.obstacles]
        if not self.closed:
            self.closed = [False] * len(self.obstacles)
        if len(self.closed) != len(self.obstacles):
            raise WorldError("closed flags do not match obstacles")
        self.bounds = tuple(float(b) for b in self.bounds)
        if len(self.bounds) != 4 or self.bounds[2] <= self.bounds[0] or self.bounds[3] <= self.bounds[1]:
            raise WorldError(f"invalid bounds {self.bounds}")
        segs = self.segments
        if len(segs) and np.any(np.hypot(*(segs[:, 1] - segs[:, 0]).T) <= 0):
            raise WorldError("world contains a zero-length segment")

    @property
    def segments(self):
        """All obstacle edges as an (M, 2, 2) array."""
        out = []
        for poly, closed in zip(self.obstacles, self.closed):
            pts = np.vstack([poly, poly[:1]]) if closed and len(poly) > 2 else poly
            for a, b in zip(pts[:-1], pts[1:]):
                out.append((a, b))
        return np.asarray(out, dtype=float).reshape(-1, 2, 2)

    def contains(self, point):
        x, y = point
        xmin, ymin, xmax, ymax = self.bounds
        return xmin <= x <= xmax and ymin <= y <= ymax

    def to_dict(self):
        d = {
            "name": self.name,
            "bounds": list(self.bounds),
            "obstacles": [
                {"points": o.tolist(), "closed": bool(c)} for o, c in zip(self.obstacles, self.closed)
            ],
        }
        if self.waypoints is not None:
            d["trajectory"] = {"waypoints": [list(map(float, w)) for w in self.waypoints], "step": self.step}
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            obstacles = [o["points"] for o in d["obstacles"]]
            closed = [bool(o.get("closed", False)) for o in d["obstacles"]]
            traj = d.get("trajectory")
            return cls(
                obstacles,
                d["bounds"],
                closed,
                name=d.get("name", "world"),
                waypoints=traj["waypoints"] if traj else None,
                step=float(traj.get("step", 0.1)) if traj else 0.1,
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise WorldError(f"malformed world description: {exc!r}") from exc

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1)


def load_world(path) -> World:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise WorldError(f"cannot read world file {path}: {exc}") from exc
    return World.from_dict(data)


def bundled_world(name) -> World:
    if name not in BUNDLED_WORLDS:
        raise WorldError(f"unknown bundled world {name!r}; choose from {BUNDLED_WORLDS}")
    text = resources.files("gpocc").joinpath(f"worlds/{name}.json").read_text(encoding="utf-8")
    return World.from_dict(json.loads(text))


def resolve_world(spec) -> World:
    """Accept a bundled world name or a path to a world file."""
    if spec in BUNDLED_WORLDS:
        return bundled_world(spec)
    return load_world(spec)


def cast_rays(segments, origin, bearings, r_max):
    """Vectorized ray casting; returns the first-hit range per bearing (r_max on a miss)."""
    bearings = np.asarray(bearings, dtype=float)
    out = np.full(bearings.shape, float(r_max))
    if len(segments) == 0 or bearings.size == 0:
        return out
    o = np.asarray(origin, dtype=float)
    u = np.stack([np.cos(bearings), np.sin(bearings)], axis=-1)  # (R, 2)
    a = segments[:, 0]  # (M, 2)
    e = segments[:, 1] - a  # (M, 2)
    w = a - o  # (M, 2)
    # o + t u = a + s e  ->  t u - s e = w
    denom = u[:, None, 0] * (-e[None, :, 1]) - u[:, None, 1] * (-e[None, :, 0])  # (R, M)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[None, :, 0] * (-e[None, :, 1]) - w[None, :, 1] * (-e[None, :, 0])) / denom
        s = (u[:, None, 0] * w[None, :, 1] - u[:, None, 1] * w[None, :, 0]) / denom
    valid = (np.abs(denom) > 1e-15) & (t >= 0) & (s >= 0) & (s <= 1)
    t = np.where(valid, t, np.inf)
    best = t.min(axis=1)
    hit = best <= r_max
    out[hit] = best[hit]
    return out


def raycast(world: World, pose: SensorPose, angle, r_max):
    """Distance along ``pose.heading + angle`` to the first obstacle, or r_max."""
    return float(cast_rays(world.segments, (pose.x, pose.y), [pose.heading + angle], r_max)[0])


def scan_angles(n_rays, fov_half_angle):
    """Evenly spaced sensor-frame bearings over the field of view."""
    if fov_half_angle >= math.pi:
        inc = 2 * math.pi / n_rays
        start = -math.pi
    else:
        inc = 2 * fov_half_angle / (n_rays - 1)
        start = -fov_half_angle
    return start, inc, start + inc * np.arange(n_rays)


def simulate_scan(world, pose: SensorPose, n_rays, noise_sigma, rng, segments=None):
    if n_rays < 8:
        raise ValueError("n_rays must be >= 8")
    segments = world.segments if segments is None else segments
    if not world.contains((pose.x, pose.y)):
        log.warning("pose (%.3f, %.3f) lies outside world bounds %s", pose.x, pose.y, world.bounds)
    start, inc, angles = scan_angles(n_rays, pose.fov_half_angle)
    ranges = cast_rays(segments, (pose.x, pose.y), pose.heading + angles, pose.r_max)
    hits = ranges < pose.r_max
    # always draw n_rays samples so the RNG stream does not depend on the hit pattern
    noise = rng.normal(0.0, 1.0, size=n_rays) * noise_sigma
    if noise_sigma > 0:
        noisy = np.clip(ranges + noise, 1e-6, np.nextafter(pose.r_max, 0.0))
        ranges = np.where(hits, noisy, ranges)
    return SensorScan.regular(pose, start, inc, ranges, noise_sigma)


def simulate_trajectory(world, poses, n_rays=360, fov_half_angle=math.pi, r_max=5.0, noise_sigma=0.0, seed=0):
    """Yield one scan per pose; ``poses`` are (x, y, heading) triples or SensorPose."""
    rng = np.random.default_rng(seed)
    segments = world.segments
    for p in poses:
        if not isinstance(p, SensorPose):
            p = SensorPose(float(p[0]), float(p[1]), float(p[2]), fov_half_angle, r_max)
        yield simulate_scan(world, p, n_rays, noise_sigma, rng, segments)


def trajectory_poses(waypoints, step=0.1):
    """Poses every ``step`` meters along a waypoint polyline, heading along the path."""
    wp = np.asarray(waypoints, dtype=float)
    poses = []
    for a, b in zip(wp[:-1], wp[1:]):
        seg = b - a
        length = float(np.hypot(*seg))
        if length == 0:
            continue
        heading = math.atan2(seg[1], seg[0])
        n = max(1, int(math.ceil(length / step - 1e-9)))
        for i in range(n):
            p = a + seg * (i / n)
            poses.append((float(p[0]), float(p[1]), heading))
    last = wp[-1]
    poses.append((float(last[0]), float(last[1]), poses[-1][2] if poses else 0.0))
    return poses
