"""Height-field mesh: a regular vertex grid with heights and class posteriors.

Vertex ``(i, j)`` sits at world ``(origin_x + i * resolution,
origin_y + j * resolution)``; arrays are indexed ``[j, i]`` (row = y).
Every grid cell is split along its lower-left to upper-right diagonal:

    (i, j+1) ---- (i+1, j+1)
        |  tri 1  /  |
        |       /    |
        |     /      |
        |   /  tri 0 |
    (i, j) ------ (i+1, j)

Triangle 0 holds points with local ``fx >= fy``, triangle 1 the rest.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .pnm import read_pgm, write_pgm


class GridError(ValueError):
    pass


class Location(NamedTuple):
    cell: tuple
    triangle: int
    vertices: tuple
    weights: tuple


@dataclass
class HeightField:
    width: int
    height: int
    resolution: float
    origin: tuple
    heights: np.ndarray
    fusion_weights: np.ndarray
    log_posteriors: np.ndarray

    @property
    def num_classes(self):
        return self.log_posteriors.shape[-1]

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def observed(self):
        return self.fusion_weights > 0

    def coverage(self):
        return float(np.count_nonzero(self.observed)) / self.observed.size

    def vertex_xy(self):
        """World x and y of every vertex, each shaped like ``heights``."""
        xs = self.origin[0] + np.arange(self.width) * self.resolution
        ys = self.origin[1] + np.arange(self.height) * self.resolution
        return np.meshgrid(xs, ys)

    def posteriors(self):
        lp = self.log_posteriors
        p = np.exp(lp - lp.max(axis=-1, keepdims=True))
        return p / p.sum(axis=-1, keepdims=True)

    def copy(self):
        return HeightField(
            self.width, self.height, self.resolution, tuple(self.origin),
            self.heights.copy(), self.fusion_weights.copy(), self.log_posteriors.copy(),
        )

    def locate(self, point_xy):
        """Triangle and barycentric weights for one point, or None when outside."""
        loc = self.locate_points(np.array([point_xy[0]], float), np.array([point_xy[1]], float))
        if not loc.valid[0]:
            return None
        ix, iy, tri = int(loc.ix[0]), int(loc.iy[0]), int(loc.tri[0])
        verts = tuple(
            (int(v % self.width), int(v // self.width)) for v in loc.vertex_index[0]
        )
        return Location((ix, iy), tri, verts, tuple(float(w) for w in loc.weights[0]))

    def locate_points(self, x, y):
        return locate_points(self.width, self.height, self.resolution, self.origin, x, y)


class PointLocations(NamedTuple):
    valid: np.ndarray
    ix: np.ndarray
    iy: np.ndarray
    tri: np.ndarray
    vertex_index: np.ndarray  # (n, 3) flat row-major vertex indices
    weights: np.ndarray  # (n, 3) barycentric weights


def locate_points(width, height, resolution, origin, x, y):
    """Vectorised point location; rows of invalid points hold zeros."""
    gx = (np.asarray(x, float) - origin[0]) / resolution
    gy = (np.asarray(y, float) - origin[1]) / resolution
    valid = (gx >= 0) & (gx <= width - 1) & (gy >= 0) & (gy <= height - 1)
    gx = np.where(valid, gx, 0.0)
    gy = np.where(valid, gy, 0.0)
    ix = np.minimum(np.floor(gx).astype(np.int64), width - 2)
    iy = np.minimum(np.floor(gy).astype(np.int64), height - 2)
    fx = gx - ix
    fy = gy - iy
    tri = (fy > fx).astype(np.int8)
    base = iy * width + ix
    upper = tri == 1
    vidx = np.empty((gx.size, 3), dtype=np.int64)
    vidx[:, 0] = base
    vidx[:, 1] = np.where(upper, base + width + 1, base + 1)
    vidx[:, 2] = np.where(upper, base + width, base + width + 1)
    w = np.empty((gx.size, 3))
    w[:, 0] = np.where(upper, 1.0 - fy, 1.0 - fx)
    w[:, 1] = np.where(upper, fx, fx - fy)
    w[:, 2] = np.where(upper, fy - fx, fy)
    return PointLocations(valid, ix, iy, tri, vidx, w)


def new_height_field(width, height, resolution, origin=(0.0, 0.0), num_classes=4):
    if width < 2 or height < 2:
        raise GridError(f"grid needs at least 2x2 vertices, got {width}x{height}")
    if not resolution > 0:
        raise GridError(f"resolution must be positive, got {resolution}")
    if num_classes < 2:
        raise GridError(f"need at least 2 classes, got {num_classes}")
    return HeightField(
        width=int(width),
        height=int(height),
        resolution=float(resolution),
        origin=(float(origin[0]), float(origin[1])),
        heights=np.zeros((height, width)),
        fusion_weights=np.zeros((height, width)),
        log_posteriors=np.full((height, width, num_classes), -np.log(num_classes)),
    )


def argmax_labels(field):
    """Hard labels; ties go to the lowest class, unobserved vertices to class 0."""
    labels = np.argmax(field.log_posteriors, axis=-1)
    labels[~field.observed] = 0
    return labels


# ---------------------------------------------------------------- export


def export_heights_pgm(path, heights):
    heights = np.asarray(heights, float)
    lo, hi = float(heights.min()), float(heights.max())
    span = hi - lo
    if span > 0:
        q = np.rint((heights - lo) / span * 65535.0).astype(np.uint16)
    else:
        q = np.zeros(heights.shape, np.uint16)
    write_pgm(path, q, comments=[f"height_min {lo!r}", f"height_max {hi!r}",
                                 "height = min + q / 65535 * (max - min)"])


def import_heights_pgm(path):
    q, comments = read_pgm(path)
    meta = dict(c.split(None, 1) for c in comments if c.startswith("height_m"))
    lo, hi = float(meta["height_min"]), float(meta["height_max"])
    return lo + q.astype(float) / 65535.0 * (hi - lo)


def export_heights_csv(path, heights):
    with open(path, "w") as fh:
        for row in np.asarray(heights, float):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def import_heights_csv(path):
    with open(path) as fh:
        return np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])


def export_posteriors_csv(path, field):
    probs = field.posteriors()
    ncls = field.num_classes
    with open(path, "w") as fh:
        fh.write("row,col," + ",".join(f"p_{c}" for c in range(ncls)) + "\n")
        for j in range(field.height):
            for i in range(field.width):
                fh.write(f"{j},{i}," + ",".join(repr(float(p)) for p in probs[j, i]) + "\n")


def import_posteriors_csv(path, shape):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    rows, cols = data[:, 0].astype(int), data[:, 1].astype(int)
    probs = np.zeros(tuple(shape) + (data.shape[1] - 2,))
    probs[rows, cols] = data[:, 2:]
    return probs


def export_labels_txt(path, labels):
    np.savetxt(path, np.asarray(labels, dtype=np.int64), fmt="%d")


def import_labels_txt(path):
    return np.loadtxt(path, dtype=np.int64, ndmin=2)


def save_field(path, field):
    """Lossless native snapshot (npz)."""
    np.savez(
        path,
        meta=np.array([field.width, field.height, field.resolution, *field.origin]),
        heights=field.heights,
        fusion_weights=field.fusion_weights,
        log_posteriors=field.log_posteriors,
    )


def load_field(path):
    with np.load(path) as z:
        w, h, res, ox, oy = z["meta"]
        return HeightField(int(w), int(h), float(res), (float(ox), float(oy)),
                           z["heights"].copy(), z["fusion_weights"].copy(),
                           z["log_posteriors"].copy())
