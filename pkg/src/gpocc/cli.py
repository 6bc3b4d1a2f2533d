"""gpocc command line: simulate -> map -> reconstruct -> eval (and ``run`` for all four).

Exit codes: 0 success, 1 internal or numerical failure, 2 bad input or config.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from dataclasses import field as dc_field
from pathlib import Path

import numpy as np

from .contour import GridSpec, dumps_contour, evaluate_grid, loads_contour, marching_squares
from .evaluation import (
    GridConfig,
    baseline_occupancy_grid,
    metrics_record,
    point_to_surface_errors,
    sample_reconstruction,
    timing_report,
    validate_metrics,
    wall_segments,
)
from .field import FieldConfig, write_pgm
from .kernel import ContractViolation, NumericalFailure
from .mapper import OccupancyMap
from .prior import PriorParams
from .sensor import ScanLogError, read_scan_log, scan_to_points, write_scan_log
from .sim import WorldError, resolve_world, simulate_trajectory, trajectory_poses

log = logging.getLogger("gpocc")

CONFIG_SCHEMA = "gpocc.config/1"


class ConfigError(ValueError):
    pass


@dataclass
class SensorConfig:
    n_rays: int = 360
    fov_half_angle: float = math.pi
    r_max: float = 6.0
    noise_sigma: float = 0.01


@dataclass
class TrajectoryConfig:
    waypoints: list | None = None  # None -> the world's own trajectory
    step: float | None = None


@dataclass
class KernelConfig:
    level_set_c: float = 1.0
    lengthscale: float = 0.3
    jitter: float = 1e-10


@dataclass
class BubbleConfig:
    clearance: float = 0.2
    r_min: float = 0.15
    r_max_bubble: float = 2.0
    boundary_samples: int = 16
    overlap_factor: float = 0.7


@dataclass
class FieldGroup:
    obs_noise_sigma2: float = 1e-6
    neighborhood_radius: float = 1.0
    variance_wall_threshold: float = 0.4
    prior_mode: str = "bubbles"
    max_training: int = 64


@dataclass
class ReconConfig:
    h: float = 0.05
    bbox: list | None = None  # [xmin, ymin, xmax, ymax]; None -> world bounds
    skip_cells: bool = True
    sample_spacing: float = 0.01


@dataclass
class RunConfig:
    world: str = "env_a"
    out: str = "out"
    seed: int = 0
    threads: int = 1
    voxel_resolution: float = 0.05
    sensor: SensorConfig = dc_field(default_factory=SensorConfig)
    trajectory: TrajectoryConfig = dc_field(default_factory=TrajectoryConfig)
    kernel: KernelConfig = dc_field(default_factory=KernelConfig)
    bubbles: BubbleConfig = dc_field(default_factory=BubbleConfig)
    field: FieldGroup = dc_field(default_factory=FieldGroup)
    reconstruction: ReconConfig = dc_field(default_factory=ReconConfig)
    baseline: GridConfig = dc_field(default_factory=GridConfig)

    def to_dict(self):
        d = asdict(self)
        d["schema"] = CONFIG_SCHEMA
        return d

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        schema = data.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ConfigError(f"unsupported config schema {schema!r}")
        return _build(cls, data, "config")

    def prior_params(self):
        k, b = self.kernel, self.bubbles
        return PriorParams(k.level_set_c, k.lengthscale, b.clearance, b.r_min, b.r_max_bubble,
                           b.boundary_samples, b.overlap_factor)

    def field_config(self):
        k, f = self.kernel, self.field
        return FieldConfig(k.level_set_c, k.lengthscale, f.obs_noise_sigma2, f.neighborhood_radius,
                           f.variance_wall_threshold, f.prior_mode, k.jitter, f.max_training)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if hasattr(current, "__dataclass_fields__"):
            kwargs[name] = _build(type(current), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(data)


def _dump_json(path, data):
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _out(cfg, name):
    d = Path(cfg.out)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


# -- commands ---------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, scans_path=None):
    world = resolve_world(cfg.world)
    waypoints = cfg.trajectory.waypoints or world.waypoints
    if not waypoints:
        raise ConfigError("no trajectory: world has none and config.trajectory.waypoints is empty")
    step = cfg.trajectory.step or world.step
    poses = trajectory_poses(waypoints, step)
    s = cfg.sensor
    if s.n_rays < 8:
        raise ConfigError("sensor.n_rays must be >= 8")
    scans = simulate_trajectory(world, poses, s.n_rays, s.fov_half_angle, s.r_max, s.noise_sigma, cfg.seed)
    path = Path(scans_path) if scans_path else _out(cfg, "scans.jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_scan_log(path, scans)
    log.info("wrote %d scans to %s", len(poses), path)
    return path


def cmd_map(cfg: RunConfig, scans_path, snapshot_in=None):
    scans = read_scan_log(scans_path)
    prior = cfg.prior_params()
    if snapshot_in:
        m = _load_map(cfg, snapshot_in)
    else:
        m = OccupancyMap(cfg.voxel_resolution, prior)
    seconds = []
    for sc in scans:
        stats = m.ingest(sc)
        seconds.append(stats.seconds)
        for msg in stats.diagnostics:
            log.debug("scan %d: %s", m.version, msg)
    snap = _out(cfg, "map.json")
    snap.write_text(m.dumps(), encoding="utf-8")
    _dump_json(_out(cfg, "map_timing.json"), {"per_scan_update_s": seconds})
    log.info("map: %d scans, %d voxels, %d bubbles", len(scans), len(m.store), len(m.coverage))
    return snap


def _grid_spec(cfg, world=None):
    r = cfg.reconstruction
    if r.bbox is not None:
        bbox = r.bbox
    elif world is not None:
        bbox = world.bounds
    else:
        raise ConfigError("reconstruction.bbox is unset and no world is available")
    return GridSpec((bbox[0], bbox[1]), (bbox[2], bbox[3]), r.h)


def _load_map(cfg, snapshot_path):
    try:
        text = Path(snapshot_path).read_text(encoding="utf-8")
        return OccupancyMap.loads(text, cfg.prior_params())
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read snapshot {snapshot_path}: {exc}") from exc


def cmd_reconstruct(cfg: RunConfig, snapshot_path, rasters=True, contour=True):
    m = _load_map(cfg, snapshot_path)
    world = None
    if cfg.reconstruction.bbox is None:
        world = resolve_world(cfg.world)
    grid = _grid_spec(cfg, world)
    f = m.field(cfg.field_config())
    t0 = time.perf_counter()
    values = evaluate_grid(grid, f, cfg.reconstruction.skip_cells, cfg.threads)
    t_eval = time.perf_counter() - t0
    c = f.config.level_set_c
    segments = marching_squares(values, c, f.config.variance_wall_threshold,
                                lambda p: f.evaluate_parallel(p, threads=cfg.threads)[0] > c)
    total = time.perf_counter() - t0
    if len(m.store) == 0:
        print("notice: empty map snapshot; rasters show the prior only and there is no contour", file=sys.stderr)
    path = None
    if contour:
        path = _out(cfg, "contour.csv")
        path.write_text(dumps_contour(segments), encoding="utf-8")
    if rasters:
        _write_rasters(cfg, values, c)
    n_nodes = values.mean.size
    _dump_json(_out(cfg, "reconstruct_timing.json"), {
        "reconstruction_s": total,
        "grid_eval_s": t_eval,
        "grid_nodes": int(n_nodes),
        "per_query_us": 1e6 * t_eval / n_nodes,
    })
    log.info("contour: %d segments (%d walls)", len(segments), len(wall_segments(segments)))
    return path


def _write_rasters(cfg, values, c):
    d = Path(cfg.out) / "rasters"
    d.mkdir(parents=True, exist_ok=True)
    cls = (values.mean > c).astype(np.uint8)
    write_pgm(d / "mean.pgm", np.round(np.clip(values.mean / (2 * c), 0, 1) * 255))
    write_pgm(d / "variance.pgm", np.round(np.clip(values.var, 0, 1) * 255))
    write_pgm(d / "class.pgm", cls * 255)
    np.savetxt(d / "mean.csv", values.mean, delimiter=",", fmt="%.17g")
    np.savetxt(d / "variance.csv", values.var, delimiter=",", fmt="%.17g")
    np.savetxt(d / "class.csv", cls, delimiter=",", fmt="%d")
    return d


def _read_json(path):
    p = Path(path)
    if not p.exists():
        return None
    return json.loads(p.read_text(encoding="utf-8"))


def cmd_eval(cfg: RunConfig, contour_path, scans_path):
    world = resolve_world(cfg.world)
    try:
        segments = loads_contour(Path(contour_path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read contour {contour_path}: {exc}") from exc
    scans = read_scan_log(scans_path)
    rows = {}
    walls = wall_segments(segments)
    if walls:
        rows["ours"] = point_to_surface_errors(sample_reconstruction(walls, cfg.reconstruction.sample_spacing), world)
    else:
        log.warning("no wall segments; the 'ours' row is omitted")
    raw = np.concatenate([scan_to_points(s) for s in scans]) if scans else np.zeros((0, 2))
    if len(raw):
        rows["raw"] = point_to_surface_errors(raw, world)
    _, occupied = baseline_occupancy_grid(scans, cfg.baseline)
    if len(occupied):
        rows["grid"] = point_to_surface_errors(occupied, world)
    map_t = _read_json(Path(cfg.out) / "map_timing.json") or {}
    rec_t = _read_json(Path(cfg.out) / "reconstruct_timing.json") or {}
    timing = timing_report(
        map_t.get("per_scan_update_s", []),
        [rec_t["per_query_us"]] if "per_query_us" in rec_t else [],
        rec_t.get("reconstruction_s"),
    )
    params = cfg.to_dict()
    params.pop("out")  # where outputs go is not a run parameter; keeps metrics comparable across dirs
    record = validate_metrics(metrics_record(world.name, rows, params, timing))
    path = _out(cfg, "metrics.json")
    _dump_json(path, record)
    for name, err in rows.items():
        log.info("%-5s mean %.2f mm  rmse %.2f mm  (n=%d)", name, err.mean_abs, err.rmse, err.n_samples)
    return path


# -- argument handling ----------------------------------------------------------------


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override it")
    common.add_argument("--world", help="bundled world name (env_a, env_b) or world file path")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--grid-h", type=float, dest="grid_h")
    common.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    common.add_argument("--scans", help="scan log path (default OUT/scans.jsonl)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gpocc", description="GP occupancy mapping with FoV-shaped priors")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate lidar scans along the world trajectory")
    m = sub.add_parser("map", parents=[common], help="ingest a scan log into a map snapshot")
    m.add_argument("--resume", help="existing snapshot to continue from")
    for name, helptext in (("reconstruct", "extract contour and rasters"), ("render", "write rasters only")):
        r = sub.add_parser(name, parents=[common], help=helptext)
        r.add_argument("--map", dest="snapshot", help="map snapshot (default OUT/map.json)")
    e = sub.add_parser("eval", parents=[common], help="compute metrics file")
    e.add_argument("--contour", help="contour file (default OUT/contour.csv)")
    sub.add_parser("run", parents=[common], help="simulate, map, reconstruct and eval")
    sub.add_parser("config", parents=[common], help="print the effective config")
    return p


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    if args.world is not None:
        cfg = replace(cfg, world=args.world)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = replace(cfg, threads=args.threads)
    if args.grid_h is not None:
        cfg = replace(cfg, reconstruction=replace(cfg.reconstruction, h=args.grid_h))
    if args.noise_sigma is not None:
        cfg = replace(cfg, sensor=replace(cfg.sensor, noise_sigma=args.noise_sigma))
    return cfg


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        cfg = _apply_flags(load_config(args.config), args)
        cfg.prior_params()
        cfg.field_config()
        scans = args.scans or str(Path(cfg.out) / "scans.jsonl")
        cmd = args.command
        if cmd == "config":
            print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
            return 0
        if cmd in ("simulate", "run"):
            _dump_json(_out(cfg, "config.json"), cfg.to_dict())
            cmd_simulate(cfg, scans)
        if cmd == "map":
            cmd_map(cfg, scans, args.resume)
        if cmd == "run":
            cmd_map(cfg, scans)
        if cmd in ("reconstruct", "render"):
            cmd_reconstruct(cfg, args.snapshot or str(Path(cfg.out) / "map.json"), contour=cmd == "reconstruct")
        if cmd == "run":
            cmd_reconstruct(cfg, str(Path(cfg.out) / "map.json"))
        if cmd == "eval":
            cmd_eval(cfg, args.contour or str(Path(cfg.out) / "contour.csv"), scans)
        if cmd == "run":
            cmd_eval(cfg, str(Path(cfg.out) / "contour.csv"), scans)
        return 0
    except (ConfigError, ContractViolation, WorldError, ScanLogError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
