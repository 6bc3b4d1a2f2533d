"""Range-sensor data types and the line-delimited scan log format.

Scan log: one JSON object per line with the fields, in this order::

    {"pose": {"x": .., "y": .., "theta": ..}, "angle_min": .., "angle_increment": ..,
     "r_max": .., "fov_half_angle": .., "noise_sigma": .., "ranges": [..]}

Distances are meters, angles radians. ``ranges[i] == r_max`` encodes a
max-range miss. Floats are written with ``repr`` precision so a
write/read cycle is exact.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

SCAN_FIELDS = ("pose", "angle_min", "angle_increment", "r_max", "fov_half_angle", "noise_sigma", "ranges")


class ScanLogError(ValueError):
    pass


@dataclass(frozen=True)
class SensorPose:
    x: float
    y: float
    heading: float = 0.0
    fov_half_angle: float = math.pi
    r_max: float = 5.0

    def __post_init__(self):
        if not self.r_max > 0:
            raise ValueError("r_max must be > 0")
        if not 0 < self.fov_half_angle <= math.pi:
            raise ValueError("fov_half_angle must lie in (0, pi]")

    @property
    def position(self):
        return np.array([self.x, self.y])

    @property
    def omnidirectional(self):
        return self.fov_half_angle >= math.pi


@dataclass
class SensorScan:
    pose: SensorPose
    angles: np.ndarray
    ranges: np.ndarray
    noise_sigma: float = 0.0
    # set for evenly spaced scans so the log stores the generating values exactly
    angle_min: float | None = None
    increment: float | None = None

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float)
        self.ranges = np.asarray(self.ranges, dtype=float)
        if self.angles.shape != self.ranges.shape:
            raise ValueError("angles and ranges differ in length")
        if len(self.angles) > 1 and np.any(np.diff(self.angles) <= 0):
            raise ValueError("scan angles must be strictly increasing")
        if len(self.ranges) and not (np.all(self.ranges > 0) and np.all(self.ranges <= self.pose.r_max)):
            raise ValueError("ranges must satisfy 0 < range <= r_max")

    @property
    def hits(self):
        return self.ranges < self.pose.r_max

    @classmethod
    def regular(cls, pose, angle_min, increment, ranges, noise_sigma=0.0):
        ranges = np.asarray(ranges, dtype=float)
        angles = angle_min + increment * np.arange(len(ranges))
        return cls(pose, angles, ranges, noise_sigma, float(angle_min), float(increment))

    @property
    def angle_increment(self):
        if self.increment is not None:
            return self.increment
        if len(self.angles) < 2:
            return 0.0
        return float((self.angles[-1] - self.angles[0]) / (len(self.angles) - 1))


def scan_to_points(scan: SensorScan):
    """World-frame hit points (N x 2); max-range misses are left out."""
    keep = scan.hits
    bearing = scan.pose.heading + scan.angles[keep]
    r = scan.ranges[keep]
    return np.column_stack([scan.pose.x + r * np.cos(bearing), scan.pose.y + r * np.sin(bearing)])


def scan_to_record(scan: SensorScan):
    p = scan.pose
    return {
        "pose": {"x": float(p.x), "y": float(p.y), "theta": float(p.heading)},
        "angle_min": scan.angle_min if scan.angle_min is not None else (float(scan.angles[0]) if len(scan.angles) else 0.0),
        "angle_increment": scan.angle_increment,
        "r_max": float(p.r_max),
        "fov_half_angle": float(p.fov_half_angle),
        "noise_sigma": float(scan.noise_sigma),
        "ranges": [float(r) for r in scan.ranges],
    }


def scan_from_record(rec) -> SensorScan:
    missing = [k for k in SCAN_FIELDS if k not in rec]
    if missing:
        raise ScanLogError(f"scan record is missing fields {missing}")
    try:
        pose = SensorPose(
            float(rec["pose"]["x"]),
            float(rec["pose"]["y"]),
            float(rec["pose"]["theta"]),
            float(rec["fov_half_angle"]),
            float(rec["r_max"]),
        )
        return SensorScan.regular(
            pose, float(rec["angle_min"]), float(rec["angle_increment"]), rec["ranges"], float(rec["noise_sigma"])
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScanLogError(f"malformed scan record: {exc}") from exc


def dump_scan_line(scan: SensorScan):
    return json.dumps(scan_to_record(scan))


def write_scan_log(path, scans):
    with open(path, "w", encoding="utf-8") as fh:
        for scan in scans:
            fh.write(dump_scan_line(scan) + "\n")


def read_scan_log(path):
    scans = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ScanLogError(f"line {lineno}: not JSON ({exc})") from exc
            try:
                scans.append(scan_from_record(rec))
            except ScanLogError as exc:
                raise ScanLogError(f"line {lineno}: {exc}") from exc
    return scans
