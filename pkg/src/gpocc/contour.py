"""Level-set contour extraction (marching squares) and wall/frontier filtering.

A field accessor is anything with ``evaluate(points) -> (mean, var)`` and a
``config`` carrying ``level_set_c`` and ``variance_wall_threshold``.
Accessors that also expose ``prior_many`` and a voxel ``store`` (as
``LatentField`` does) enable the cell-skip rule: far from every centroid
the field equals its prior, so cells whose corners are all unsupported
and whose prior sits clearly on one side of ``c`` cannot hold a crossing
and their corners are never sent through the GP.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import FRONTIER, WALL, FieldSample, classify_crossing, grid_axes
from .kernel import ContractViolation

SKIP_HIGH = 1.5
SKIP_LOW = 0.5
_EDGE_EPS = 1e-9
CONTOUR_HEADER = "ax,ay,bx,by,var_a,var_b,kind"


@dataclass(frozen=True)
class GridSpec:
    bbox_min: tuple
    bbox_max: tuple
    h: float

    def __post_init__(self):
        if not self.h > 0:
            raise ContractViolation("grid spacing must be > 0")
        if not (self.bbox_max[0] > self.bbox_min[0] and self.bbox_max[1] > self.bbox_min[1]):
            raise ContractViolation("bbox_max must exceed bbox_min componentwise")

    def axes(self):
        xs, ys = grid_axes(self.bbox_min, self.bbox_max, self.h)
        if len(xs) < 2 or len(ys) < 2:
            raise ContractViolation("grid needs at least two nodes per axis")
        return xs, ys


@dataclass(frozen=True)
class ContourSegment:
    a: tuple
    b: tuple
    var_a: float
    var_b: float
    kind: str


@dataclass
class GridValues:
    xs: np.ndarray
    ys: np.ndarray
    mean: np.ndarray  # (ny, nx), row = y index
    var: np.ndarray
    evaluated: int = 0  # nodes that went through the full field evaluation

    def nodes(self):
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.column_stack([gx.ravel(), gy.ravel()])


def _supports_skip(field):
    return hasattr(field, "prior_many") and hasattr(field, "store")


def evaluate_grid(grid: GridSpec, field, skip_cells=True, threads=1) -> GridValues:
    xs, ys = grid.axes()
    gx, gy = np.meshgrid(xs, ys)
    nodes = np.column_stack([gx.ravel(), gy.ravel()])
    shape = gy.shape
    if not (skip_cells and _supports_skip(field)):
        mean, var = _evaluate(field, nodes, threads)
        return GridValues(xs, ys, mean.reshape(shape), var.reshape(shape), len(nodes))

    c = field.config.level_set_c
    prior = field.prior_many(nodes).reshape(shape)
    _, dist = field.store.nearest_many(nodes)
    supported = (dist <= field.config.neighborhood_radius).reshape(shape)

    def corners(a):
        return a[:-1, :-1], a[:-1, 1:], a[1:, :-1], a[1:, 1:]

    unsupported_cell = ~np.logical_or.reduce(corners(supported))
    hi = np.logical_and.reduce([p > SKIP_HIGH * c for p in corners(prior)])
    lo = np.logical_and.reduce([p < SKIP_LOW * c for p in corners(prior)])
    skipped = unsupported_cell & (hi | lo)

    needed = np.zeros(shape, dtype=bool)
    live = ~skipped
    needed[:-1, :-1] |= live
    needed[:-1, 1:] |= live
    needed[1:, :-1] |= live
    needed[1:, 1:] |= live
    # unsupported nodes evaluate to (prior, 1) exactly; only supported ones need the GP
    todo = np.nonzero((needed & supported).ravel())[0]
    mean = prior.ravel().copy()
    var = np.ones(mean.shape)
    if len(todo):
        m, v = _evaluate(field, nodes[todo], threads, mean[todo])
        mean[todo] = m
        var[todo] = v
    return GridValues(xs, ys, mean.reshape(shape), var.reshape(shape), len(todo))


def _evaluate(field, points, threads, prior=None):
    if prior is not None:
        if threads > 1:
            return field.evaluate_parallel(points, threads=threads, prior=prior)
        return field.evaluate(points, prior=prior)
    if threads > 1 and hasattr(field, "evaluate_parallel"):
        return field.evaluate_parallel(points, threads=threads)
    return field.evaluate(points)


def _edge_point(p, q, fp, fq, vp, vq, c):
    t = (c - fp) / (fq - fp)
    t = min(max(t, _EDGE_EPS), 1.0 - _EDGE_EPS)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])), vp + t * (vq - vp)


def marching_squares(values: GridValues, c, threshold, center_sign=None):
    """Segment soup for the level set ``mean == c`` with 16-case marching squares.

    ``center_sign(points) -> bool array`` resolves the two saddle cases; by
    default the mean of the four corners decides.
    """
    xs, ys, f, v = values.xs, values.ys, values.mean, values.var
    above = f > c
    b00, b10, b01, b11 = above[:-1, :-1], above[:-1, 1:], above[1:, :-1], above[1:, 1:]
    case = b00 * 1 + b10 * 2 + b11 * 4 + b01 * 8
    mixed = (case != 0) & (case != 15)
    cells = np.argwhere(mixed)  # row-major (iy, ix)

    saddle = np.isin(case, (5, 10)) & mixed
    centre_above = {}
    sad = np.argwhere(saddle)
    if len(sad):
        pts = np.column_stack([xs[sad[:, 1]] + 0.5 * (xs[1] - xs[0]), ys[sad[:, 0]] + 0.5 * (ys[1] - ys[0])])
        if center_sign is None:
            avg = (f[sad[:, 0], sad[:, 1]] + f[sad[:, 0], sad[:, 1] + 1]
                   + f[sad[:, 0] + 1, sad[:, 1]] + f[sad[:, 0] + 1, sad[:, 1] + 1]) / 4
            signs = avg > c
        else:
            signs = np.asarray(center_sign(pts), dtype=bool)
        centre_above = {(int(i), int(j)): bool(s) for (i, j), s in zip(sad, signs)}

    segments = []
    for iy, ix in cells.tolist():
        p00 = (xs[ix], ys[iy])
        p10 = (xs[ix + 1], ys[iy])
        p01 = (xs[ix], ys[iy + 1])
        p11 = (xs[ix + 1], ys[iy + 1])
        f00, f10, f01, f11 = f[iy, ix], f[iy, ix + 1], f[iy + 1, ix], f[iy + 1, ix + 1]
        v00, v10, v01, v11 = v[iy, ix], v[iy, ix + 1], v[iy + 1, ix], v[iy + 1, ix + 1]
        a00, a10, a01, a11 = above[iy, ix], above[iy, ix + 1], above[iy + 1, ix], above[iy + 1, ix + 1]
        edges = {}
        if a00 != a10:
            edges[0] = _edge_point(p00, p10, f00, f10, v00, v10, c)
        if a10 != a11:
            edges[1] = _edge_point(p10, p11, f10, f11, v10, v11, c)
        if a01 != a11:
            edges[2] = _edge_point(p01, p11, f01, f11, v01, v11, c)
        if a00 != a01:
            edges[3] = _edge_point(p00, p01, f00, f01, v00, v01, c)
        if len(edges) == 2:
            pairs = [tuple(edges)]
        elif centre_above[(iy, ix)] == a00:
            pairs = [(0, 1), (2, 3)]
        else:
            pairs = [(0, 3), (1, 2)]
        for i, j in pairs:
            (pa, va), (pb, vb) = edges[i], edges[j]
            kind = WALL if max(va, vb) < threshold else FRONTIER
            segments.append(ContourSegment((float(pa[0]), float(pa[1])), (float(pb[0]), float(pb[1])),
                                           float(va), float(vb), kind))
    return segments


def extract_contour(grid: GridSpec, field, skip_cells=True, threads=1):
    values = evaluate_grid(grid, field, skip_cells, threads)
    c = field.config.level_set_c

    def center_sign(points):
        m, _ = _evaluate(field, points, threads)
        return m > c

    return marching_squares(values, c, field.config.variance_wall_threshold, center_sign)


def filter_surface(segments, config=None):
    """Split segments into walls and frontiers by their kind tag."""
    walls = [s for s in segments if s.kind == WALL]
    frontiers = [s for s in segments if s.kind != WALL]
    return {"walls": walls, "frontiers": frontiers}


def level_crossings(values: GridValues, config):
    """Every grid edge whose end nodes straddle ``c``.

    Returns (points, kinds) where kinds come from ``classify_crossing`` on
    the two node samples and points are the interpolated crossing locations.
    """
    c = config.level_set_c
    f, v = values.mean, values.var
    pts, kinds = [], []
    for axis in (1, 0):
        fa = f[:, :-1] if axis == 1 else f[:-1, :]
        fb = f[:, 1:] if axis == 1 else f[1:, :]
        va = v[:, :-1] if axis == 1 else v[:-1, :]
        vb = v[:, 1:] if axis == 1 else v[1:, :]
        for iy, ix in np.argwhere((fa > c) != (fb > c)).tolist():
            sa = FieldSample(float(fa[iy, ix]), float(va[iy, ix]), "")
            sb = FieldSample(float(fb[iy, ix]), float(vb[iy, ix]), "")
            t = (c - sa.mean) / (sb.mean - sa.mean)
            if axis == 1:
                x = values.xs[ix] + t * (values.xs[ix + 1] - values.xs[ix])
                y = values.ys[iy]
            else:
                x = values.xs[ix]
                y = values.ys[iy] + t * (values.ys[iy + 1] - values.ys[iy])
            pts.append((x, y))
            kinds.append(classify_crossing(sa, sb, config))
    return np.asarray(pts, dtype=float).reshape(-1, 2), kinds


def dumps_contour(segments):
    lines = [CONTOUR_HEADER]
    for s in segments:
        lines.append(",".join([repr(s.a[0]), repr(s.a[1]), repr(s.b[0]), repr(s.b[1]),
                               repr(s.var_a), repr(s.var_b), s.kind]))
    return "\n".join(lines) + "\n"


def loads_contour(text):
    rows = text.strip().splitlines()
    if not rows or rows[0].strip() != CONTOUR_HEADER:
        raise ValueError("contour file must start with header " + CONTOUR_HEADER)
    out = []
    for line in rows[1:]:
        ax, ay, bx, by, va, vb, kind = line.split(",")
        out.append(ContourSegment((float(ax), float(ay)), (float(bx), float(by)), float(va), float(vb), kind))
    return out
