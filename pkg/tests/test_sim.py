import math

import numpy as np
import pytest

from gpocc.sensor import (
    ScanLogError,
    SensorPose,
    SensorScan,
    read_scan_log,
    scan_from_record,
    scan_to_points,
    scan_to_record,
    write_scan_log,
)
from gpocc.sim import (
    BUNDLED_WORLDS,
    World,
    WorldError,
    bundled_world,
    load_world,
    raycast,
    scan_angles,
    simulate_scan,
    simulate_trajectory,
    trajectory_poses,
)


def brute_ray(segments, origin, bearing, r_max):
    """Segment intersection by Cramer's rule, one segment at a time (oracle)."""
    ox, oy = origin
    dx, dy = math.cos(bearing), math.sin(bearing)
    best = r_max
    for (ax, ay), (bx, by) in segments:
        ex, ey = bx - ax, by - ay
        den = dx * (-ey) - dy * (-ex)
        if abs(den) < 1e-15:
            continue
        rx, ry = ax - ox, ay - oy
        t = (rx * (-ey) - ry * (-ex)) / den
        u = (dx * ry - dy * rx) / den
        if t >= 0 and 0 <= u <= 1:
            best = min(best, t)
    return best


def point_seg_dist(p, a, b):
    a, b, p = map(np.asarray, (a, b, p))
    t = np.clip(np.dot(p - a, b - a) / np.dot(b - a, b - a), 0, 1)
    return float(np.hypot(*(a + t * (b - a) - p)))


def random_world(rng, n=12):
    obstacles = []
    for _ in range(n):
        a = rng.uniform(-8, 8, size=2)
        b = a + rng.uniform(-3, 3, size=2)
        obstacles.append([a.tolist(), b.tolist()])
    return World(obstacles, (-10, -10, 10, 10))


def wall_world():
    return World([[(2.0, -5.0), (2.0, 5.0)]], (-10, -10, 10, 10))


def test_raycast_empty_world():
    w = World([], (-1, -1, 1, 1))
    assert raycast(w, SensorPose(0, 0), 0.3, 4.0) == 4.0


def test_raycast_axis_aligned_wall():
    assert raycast(wall_world(), SensorPose(0, 0, 0.0), 0.0, 5.0) == pytest.approx(2.0, abs=1e-12)


def test_raycast_matches_brute_force(rng):
    w = random_world(rng)
    segs = w.segments.tolist()
    for _ in range(100):
        o = rng.uniform(-9, 9, size=2)
        ang = rng.uniform(-math.pi, math.pi)
        got = raycast(w, SensorPose(o[0], o[1], 0.0), ang, 15.0)
        assert abs(got - brute_ray(segs, o, ang, 15.0)) <= 1e-9


def test_noise_free_scan_equals_raycast():
    w = bundled_world("env_a")
    pose = SensorPose(2.0, 2.0, 0.3, math.pi, 6.0)
    scan = simulate_scan(w, pose, 90, 0.0, np.random.default_rng(0))
    for a, r in zip(scan.angles, scan.ranges):
        assert r == raycast(w, pose, a, 6.0)


def test_same_seed_identical_scans():
    w = bundled_world("env_b")
    poses = trajectory_poses(w.waypoints, w.step)[:10]
    a = list(simulate_trajectory(w, poses, 120, math.pi, 5.0, 0.02, seed=7))
    b = list(simulate_trajectory(w, poses, 120, math.pi, 5.0, 0.02, seed=7))
    for x, y in zip(a, b):
        assert np.array_equal(x.ranges, y.ranges)
    c = list(simulate_trajectory(w, poses, 120, math.pi, 5.0, 0.02, seed=8))
    assert not np.array_equal(a[0].ranges, c[0].ranges)


def test_noise_statistics_flat_wall():
    w = World([[(2.0, -50.0), (2.0, 50.0)]], (-60, -60, 60, 60))
    pose = SensorPose(0, 0, 0.0, 0.05, 10.0)
    rng = np.random.default_rng(3)
    errs = []
    for _ in range(1000):
        scan = simulate_scan(w, pose, 100, 0.01, rng)
        truth = 2.0 / np.cos(scan.angles)
        errs.append(scan.ranges - truth)
    errs = np.concatenate(errs)
    assert len(errs) == 100_000
    assert abs(errs.std() - 0.01) <= 0.05 * 0.01
    assert abs(errs.mean()) <= 1e-3 * 0.01 * 10


def test_misses_are_not_perturbed():
    w = World([], (-5, -5, 5, 5))
    scan = simulate_scan(w, SensorPose(0, 0, 0, math.pi, 3.0), 64, 0.5, np.random.default_rng(0))
    assert np.all(scan.ranges == 3.0)
    assert not scan.hits.any()


def test_noisy_ranges_stay_valid():
    w = World([[(0.02, -1.0), (0.02, 1.0)]], (-5, -5, 5, 5))
    scan = simulate_scan(w, SensorPose(0, 0, 0, math.pi / 4, 3.0), 64, 0.5, np.random.default_rng(1))
    assert np.all(scan.ranges > 0) and np.all(scan.ranges <= 3.0)


def test_pose_outside_bounds_still_scans(caplog):
    w = wall_world()
    scan = simulate_scan(w, SensorPose(50, 0), 16, 0.0, np.random.default_rng(0))
    assert len(scan.ranges) == 16
    assert any("outside" in r.message for r in caplog.records)


def test_scan_angles_even_and_increasing():
    a0, inc, angles = scan_angles(8, math.pi)
    assert a0 == -math.pi and inc == pytest.approx(2 * math.pi / 8)
    assert angles[-1] < math.pi
    a0, inc, angles = scan_angles(9, math.pi / 2)
    assert a0 == -math.pi / 2 and inc == pytest.approx(math.pi / 8)
    assert angles[-1] == pytest.approx(math.pi / 2)
    assert np.all(np.diff(angles) > 0)


def test_scan_to_points_examples():
    s = SensorScan(SensorPose(0, 0, 0.0, math.pi, 5.0), [0.0], [2.0])
    assert np.allclose(scan_to_points(s), [[2.0, 0.0]])
    s = SensorScan(SensorPose(0, 0, math.pi / 2, math.pi, 5.0), [0.0], [1.0])
    assert np.max(np.abs(scan_to_points(s) - [[0.0, 1.0]])) <= 1e-12


def test_misses_excluded_from_points():
    s = SensorScan(SensorPose(0, 0, 0.0, math.pi, 5.0), [0.0, 1.0], [5.0, 2.0])
    assert len(scan_to_points(s)) == 1


def test_points_lie_on_geometry(rng):
    w = random_world(rng)
    segs = w.segments
    for _ in range(5):
        o = rng.uniform(-9, 9, size=2)
        scan = simulate_scan(w, SensorPose(o[0], o[1], rng.uniform(-3, 3), math.pi, 20.0), 180, 0.0, rng)
        for p in scan_to_points(scan):
            assert min(point_seg_dist(p, a, b) for a, b in segs) <= 1e-9


def test_more_rays_never_lose_obstacles(rng):
    w = random_world(rng, 20)
    segs = w.segments
    for _ in range(5):
        o = rng.uniform(-9, 9, size=2)
        pose = SensorPose(o[0], o[1], 0.0, math.pi, 20.0)

        def seen(n):
            pts = scan_to_points(simulate_scan(w, pose, n, 0.0, rng))
            return {int(np.argmin([point_seg_dist(p, a, b) for a, b in segs])) for p in pts}

        assert seen(90) <= seen(360)


def test_scan_validation():
    with pytest.raises(ValueError):
        SensorScan(SensorPose(0, 0), [0.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        SensorScan(SensorPose(0, 0, r_max=2.0), [0.0], [3.0])
    with pytest.raises(ValueError):
        SensorPose(0, 0, fov_half_angle=0.0)


def test_scan_log_round_trip(tmp_path):
    w = bundled_world("env_a")
    poses = trajectory_poses(w.waypoints, w.step)[:5]
    scans = list(simulate_trajectory(w, poses, 64, 2.0, 6.0, 0.01, 0))
    path = tmp_path / "scans.jsonl"
    write_scan_log(path, scans)
    back = read_scan_log(path)
    assert len(back) == 5
    for a, b in zip(scans, back):
        assert np.array_equal(a.angles, b.angles)
        assert np.array_equal(a.ranges, b.ranges)
        assert a.pose == b.pose
    text = path.read_text()
    first = text.splitlines()[0]
    assert first.index('"pose"') < first.index('"angle_min"') < first.index('"ranges"')


def test_scan_log_schema_errors(tmp_path):
    rec = scan_to_record(SensorScan.regular(SensorPose(0, 0), -1.0, 0.5, [1.0, 2.0]))
    del rec["angle_increment"]
    with pytest.raises(ScanLogError):
        scan_from_record(rec)
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    with pytest.raises(ScanLogError):
        read_scan_log(bad)


def test_world_validation_and_round_trip(tmp_path):
    with pytest.raises(WorldError):
        World([[(0, 0), (0, 0)]], (0, 0, 1, 1))
    with pytest.raises(WorldError):
        World([], (0, 0, -1, 1))
    for name in BUNDLED_WORLDS:
        w = bundled_world(name)
        p = tmp_path / f"{name}.json"
        p.write_text(w.dumps())
        w2 = load_world(p)
        assert np.array_equal(w.segments, w2.segments)
        assert w2.bounds == w.bounds and w2.waypoints == w.waypoints


def test_bundled_trajectories_keep_clear_of_obstacles():
    for name in BUNDLED_WORLDS:
        w = bundled_world(name)
        poses = trajectory_poses(w.waypoints, w.step)
        assert 50 <= len(poses) <= 200
        segs = w.segments
        clear = min(min(point_seg_dist(p[:2], a, b) for a, b in segs) for p in poses)
        assert clear >= 0.3


def test_malformed_world_file(tmp_path):
    p = tmp_path / "w.json"
    p.write_text('{"bounds": [0, 0, 1]}')
    with pytest.raises(WorldError):
        load_world(p)
