"""Incremental map: voxel store, bubble coverage and pose history.

One ``ingest`` per scan inserts the scan's hit points, grows the bubble
coverage against the updated distance field, and bumps the map version.
The snapshot holds everything needed to resume ingestion bit-exactly.
"""
from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field

from .field import FieldConfig, LatentField
from .prior import BubbleCoverage, PriorParams, grow_bubbles
from .sensor import SensorPose, SensorScan, scan_to_points
from .voxels import VoxelStore

SNAPSHOT_SCHEMA = "gpocc.map/1"


@dataclass
class IngestStats:
    points: int
    cells_created: int
    bubbles_added: int
    seconds: float
    diagnostics: list = field(default_factory=list)
    clearance_margins: list = field(default_factory=list)


class OccupancyMap:
    def __init__(self, resolution=0.05, prior: PriorParams = PriorParams()):
        self.prior = prior
        self.store = VoxelStore(resolution)
        self.coverage = BubbleCoverage()
        self.poses = []
        self.version = 0
        self._lock = threading.Lock()

    def ingest(self, scan: SensorScan) -> IngestStats:
        t0 = time.perf_counter()
        with self._lock:
            pts = scan_to_points(scan)
            ins = self.store.insert_points(pts)
            grown = grow_bubbles(self.coverage, scan, self.store, self.prior)
            self.poses.append(scan.pose)
            self.version += 1
        return IngestStats(
            len(pts),
            ins.cells_created,
            len(grown.added),
            time.perf_counter() - t0,
            grown.diagnostics + [f"rejected non-finite point {p}" for p in ins.rejected],
            grown.clearance_margins,
        )

    def field(self, config: FieldConfig = None) -> LatentField:
        if config is None:
            config = FieldConfig(level_set_c=self.prior.level_set_c, lengthscale=self.prior.lengthscale)
        return LatentField(self.store, self.coverage, self.poses, config, self.prior, self.version)

    def to_dict(self):
        return {
            "schema": SNAPSHOT_SCHEMA,
            "version": self.version,
            "voxels": self.store.to_dict(),
            "coverage": self.coverage.to_dict(),
            "poses": [[p.x, p.y, p.heading, p.fov_half_angle, p.r_max] for p in self.poses],
        }

    @classmethod
    def from_dict(cls, data, prior: PriorParams = PriorParams()):
        if data.get("schema") != SNAPSHOT_SCHEMA:
            raise ValueError(f"unsupported map snapshot schema {data.get('schema')!r}")
        m = cls(data["voxels"]["resolution"], prior)
        m.store = VoxelStore.from_dict(data["voxels"])
        m.coverage = BubbleCoverage.from_dict(data["coverage"])
        m.poses = [SensorPose(*p) for p in data["poses"]]
        m.version = int(data["version"])
        return m

    def dumps(self):
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text, prior: PriorParams = PriorParams()):
        return cls.from_dict(json.loads(text), prior)
