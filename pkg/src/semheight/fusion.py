"""Incremental height fusion and Bayesian label fusion into a HeightField.

A pixel measurement ``m`` (a class distribution) projected to a world point at
distance ``d`` from vertex ``v`` has likelihood

    g_bar(m, v, d) = sum_c g(c, v, d) m(c)
    g(c, v, d)     = exp(-alpha d) a + b              if c == v
                   = (1 - exp(-alpha d) a - b)/(C-1)  otherwise

with ``a = (C-1)/C`` and ``b = 1/C``, so ``g`` goes from a delta at ``d = 0``
to uniform as ``d`` grows. Every valid pixel updates the three vertices of the
mesh triangle its point falls in; each vertex's log-posterior is renormalised
after every frame.
"""

import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .grid import argmax_labels
from .render import backproject, perturb_depth, perturb_pose, pixel_rays

# log-likelihood floor; keeps contradictory certain measurements from producing -inf - -inf
LOG_FLOOR = float(np.log(np.finfo(float).tiny))


@dataclass(frozen=True)
class DecayModel:
    alpha: float = 1.0
    num_classes: int = 4
    distance: str = "3d"  # or "horizontal"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.distance not in ("3d", "horizontal"):
            raise ValueError(f"unknown distance mode {self.distance!r}")

    @property
    def a(self):
        return (self.num_classes - 1) / self.num_classes

    @property
    def b(self):
        return 1.0 / self.num_classes

    # e a + b and (1 - e a - b)/(C - 1) rearranged so that d = 0 gives exactly 1 and 0
    def match(self, d):
        e = np.exp(-self.alpha * np.asarray(d, float))
        return (1.0 + (self.num_classes - 1) * e) / self.num_classes

    def mismatch(self, d):
        return (1.0 - np.exp(-self.alpha * np.asarray(d, float))) / self.num_classes


def decay_g(measured_class, vertex_class, d, model):
    if d < 0:
        raise ValueError("distance must be non-negative")
    if measured_class == vertex_class:
        return float(model.match(d))
    return float(model.mismatch(d))


def decay_g_bar(distribution, vertex_class, d, model):
    m = np.asarray(distribution, float)
    if abs(m.sum() - 1.0) > 1e-6:
        raise ValueError(f"measurement distribution sums to {m.sum()}, expected 1")
    return float(sum(decay_g(c, vertex_class, d, model) * m[c] for c in range(len(m))))


class Projection(NamedTuple):
    points: np.ndarray  # (n, 3) located world points
    pixels: np.ndarray  # (n,) flat pixel indices
    vertices: np.ndarray  # (n, 3) flat vertex indices
    weights: np.ndarray  # (n, 3) barycentric weights
    skipped: int


def project_frame(field, depth, pose, intrinsics, rays=None):
    """Back-project valid pixels and locate them on the mesh."""
    pts, pix = backproject(depth, pose, intrinsics, rays)
    loc = field.locate_points(pts[:, 0], pts[:, 1])
    keep = loc.valid
    return Projection(pts[keep], pix[keep], loc.vertex_index[keep], loc.weights[keep],
                      int(np.count_nonzero(~keep)))


def fuse_height(field, projection):
    """Barycentric-weighted running mean of point heights at each vertex.

    All points of one frame are accumulated together; the result equals
    applying ``h += w (z - h) / W`` point by point.
    """
    n = field.width * field.height
    flat = projection.vertices.ravel()
    w = projection.weights.ravel()
    z = np.repeat(projection.points[:, 2], 3)
    sw = np.bincount(flat, w, minlength=n)
    swz = np.bincount(flat, w * z, minlength=n)
    heights = field.heights.reshape(-1)
    weights = field.fusion_weights.reshape(-1)
    upd = sw > 0
    total = weights[upd] + sw[upd]
    heights[upd] = (heights[upd] * weights[upd] + swz[upd]) / total
    weights[upd] = total
    return field


def measurement_log_likelihood(probs, dist, model):
    """log g_bar for measurements ``probs`` (n, C) at distances ``dist`` (n, k) -> (n, k, C).

    Uses ``g_bar(m, v, d) = m_v g_match(d) + (1 - m_v) g_mismatch(d)``, which
    follows from the class sum because ``m`` is normalised.
    """
    gm = model.match(dist)[..., None]
    gx = model.mismatch(dist)[..., None]
    m = probs[:, None, :]
    lik = m * gm + (1.0 - m) * gx
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(lik), LOG_FLOOR)


def fuse_semantic(field, projection, probs, model):
    """Bayesian update of vertex posteriors from per-pixel class distributions."""
    w, c = field.width, field.num_classes
    n = w * field.height
    vidx = projection.vertices
    pts = projection.points
    vx = field.origin[0] + (vidx % w) * field.resolution
    vy = field.origin[1] + (vidx // w) * field.resolution
    d2 = (pts[:, 0:1] - vx) ** 2 + (pts[:, 1:2] - vy) ** 2
    if model.distance == "3d":
        vz = field.heights.reshape(-1)[vidx]
        seen = field.fusion_weights.reshape(-1)[vidx] > 0
        d2 = d2 + np.where(seen, (pts[:, 2:3] - vz) ** 2, 0.0)
    dist = np.sqrt(d2)
    m = probs.reshape(-1, c)[projection.pixels]
    loglik = measurement_log_likelihood(m, dist, model)
    flat = vidx.ravel()
    lp = field.log_posteriors.reshape(n, c)
    touched = np.bincount(flat, minlength=n) > 0
    for k in range(c):
        lp[:, k] += np.bincount(flat, loglik[:, :, k].ravel(), minlength=n)
    sub = lp[touched]
    mx = sub.max(axis=1, keepdims=True)
    sub -= mx + np.log(np.exp(sub - mx).sum(axis=1, keepdims=True))
    lp[touched] = sub
    return field


# ---------------------------------------------------------------- sequences


@dataclass
class Snapshot:
    frames: int
    labels: np.ndarray
    heights: np.ndarray
    observed: np.ndarray
    coverage: float
    elapsed: float  # seconds of reconstruction + labelling + fusion so far
    geometry_elapsed: float  # seconds of reconstruction only


@dataclass
class SequenceLog:
    rows: list = field(default_factory=list)
    labelled_pixels: int = 0

    HEADER = ("frame", "t_load", "t_reconstruct", "t_label", "t_fuse",
              "pixels_fused", "pixels_skipped")

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(self.HEADER) + "\n")
            for r in self.rows:
                fh.write(",".join(str(v) if isinstance(v, int) else f"{v:.6f}" for v in r) + "\n")


def run_sequence(field, frames, noise, labeller, cadence, model, intrinsics, on_snapshot=None):
    """Fuse a stream of clean rendered frames, corrupting them per ``noise``.

    For every frame: perturb the fusion pose and depth, fuse heights, label the
    view (skipped when ``labeller`` is None) and fuse the labels. A snapshot is
    taken every ``cadence`` frames. Returns ``(snapshots, log)``.
    """
    if cadence < 1:
        raise ValueError("cadence must be >= 1")
    rays = pixel_rays(intrinsics)
    snapshots, log = [], SequenceLog()
    elapsed = geo_elapsed = 0.0
    it = iter(frames)
    count = 0
    while True:
        t0 = time.perf_counter()
        try:
            frame = next(it)
        except StopIteration:
            break
        t1 = time.perf_counter()
        k = frame.index
        pose = perturb_pose(frame.pose, noise, k)
        depth = perturb_depth(frame.depth, noise, k)
        proj = project_frame(field, depth, pose, intrinsics, rays)
        fuse_height(field, proj)
        t2 = time.perf_counter()
        if labeller is not None:
            probs = labeller.label_view(frame, depth, k, pose)
            log.labelled_pixels += intrinsics.num_pixels
            t3 = time.perf_counter()
            fuse_semantic(field, proj, probs, model)
        else:
            t3 = t2
        t4 = time.perf_counter()
        elapsed += t4 - t1
        geo_elapsed += t2 - t1
        log.rows.append((k, t1 - t0, t2 - t1, t3 - t2, t4 - t3, len(proj.pixels), proj.skipped))
        count += 1
        if count % cadence == 0:
            snap = Snapshot(count, argmax_labels(field), field.heights.copy(), field.observed.copy(),
                            field.coverage(), elapsed, geo_elapsed)
            snapshots.append(snap)
            if on_snapshot is not None:
                on_snapshot(snap)
    if count == 0:
        raise ValueError("run_sequence needs at least one frame")
    return snapshots, log
