"""Simulated pinhole depth camera over a procedural scene.

Camera frame follows the usual vision convention: x right, y down, z along the
optical axis. Poses are world-from-camera. Depth images store z-depth in
metres with 0 marking pixels whose ray leaves the scene; label images store -1
there.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.spatial.transform import Rotation

from .pnm import write_pgm
from .rng import frame_rng
from .scenegen import SceneError, height_range, surface_point, surface_point_subset

INVALID_LABEL = -1
BISECTION_TOL = 1e-6
# side of the coarse height-bound cells used for empty-space skipping, in grid steps
SKIP_CELLS = 8

_POSE_STREAM = 11
_DEPTH_STREAM = 12


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 277.13
    fy: float = 277.13
    cx: float = 159.5
    cy: float = 119.5
    width: int = 320
    height: int = 240

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width, height, hfov_deg=60.0):
        f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, int(width), int(height))

    @property
    def num_pixels(self):
        return self.width * self.height


@dataclass
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)

    def quaternion(self):
        """(qw, qx, qy, qz)"""
        x, y, z, w = Rotation.from_matrix(self.rotation).as_quat()
        return w, x, y, z

    def is_valid(self, tol=1e-9):
        r = self.rotation
        return (np.allclose(r @ r.T, np.eye(3), atol=tol)
                and abs(np.linalg.det(r) - 1.0) <= tol)


@dataclass
class ViewFrame:
    depth: np.ndarray
    labels: np.ndarray
    pose: CameraPose
    index: int = 0

    @property
    def valid(self):
        return self.depth > 0


@dataclass(frozen=True)
class NoiseModel:
    pose_sigma_trans: float = 0.0
    pose_sigma_rot: float = 0.0
    depth_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if min(self.pose_sigma_trans, self.pose_sigma_rot, self.depth_sigma) < 0:
            raise ValueError("noise sigmas must be non-negative")


@dataclass
class FrameStats:
    frame: int = 0
    pixels_fused: int = 0
    pixels_skipped: int = 0
    timings: dict = field(default_factory=dict)


# ---------------------------------------------------------------- rendering


@njit(cache=True)
def _render_kernel(C, R, fx, fy, cx, cy, extent, zmin, zmax, step, tol,
                   rough, bg, objs, cell, bound, cell_objs, cell_count, depth, labels):
    H, W = depth.shape
    nc = bound.shape[0]
    for v in range(H):
        for u in range(W):
            a = (u - cx) / fx
            b = (v - cy) / fy
            dx = R[0, 0] * a + R[0, 1] * b + R[0, 2]
            dy = R[1, 0] * a + R[1, 1] * b + R[1, 2]
            dz = R[2, 0] * a + R[2, 1] * b + R[2, 2]
            depth[v, u] = 0.0
            labels[v, u] = -1
            if dz >= 0.0:
                continue
            t0 = max(0.0, (C[2] - zmax) / -dz)
            t1 = (C[2] - zmin) / -dz
            norm = math.sqrt(dx * dx + dy * dy + dz * dz)
            dt = step / norm
            t_prev = t0
            t = t0
            tc = t0
            hit = False
            while True:
                tc = min(t, t1)
                x = C[0] + tc * dx
                y = C[1] + tc * dy
                z = C[2] + tc * dz
                if 0.0 <= x <= extent and 0.0 <= y <= extent:
                    ci = min(int(x / cell), nc - 1)
                    cj = min(int(y / cell), nc - 1)
                    B = bound[cj, ci]
                    if z > B:
                        # empty-space skip: stay above the cell's height bound
                        tn = (C[2] - B) / -dz
                        if dx > 0.0:
                            tn = min(tn, (C[0] - (ci + 1) * cell) / -dx)
                        elif dx < 0.0:
                            tn = min(tn, (ci * cell - C[0]) / dx)
                        if dy > 0.0:
                            tn = min(tn, (C[1] - (cj + 1) * cell) / -dy)
                        elif dy < 0.0:
                            tn = min(tn, (cj * cell - C[1]) / dy)
                        t_prev = tc
                        if tc >= t1:
                            break
                        t = max(tn, tc + 1e-9)
                        continue
                    h, lab = surface_point_subset(x, y, rough, bg, objs,
                                                  cell_objs[cj, ci], cell_count[cj, ci])
                    if z <= h:
                        hit = True
                        break
                t_prev = tc
                if tc >= t1:
                    break
                t = tc + dt
            if not hit:
                continue
            lo = t_prev
            hi = tc
            while (hi - lo) * norm > tol:
                mid = 0.5 * (lo + hi)
                x = C[0] + mid * dx
                y = C[1] + mid * dy
                below = False
                if 0.0 <= x <= extent and 0.0 <= y <= extent:
                    ci = min(int(x / cell), nc - 1)
                    cj = min(int(y / cell), nc - 1)
                    h, lab = surface_point_subset(x, y, rough, bg, objs,
                                                  cell_objs[cj, ci], cell_count[cj, ci])
                    below = C[2] + mid * dz <= h
                if below:
                    hi = mid
                else:
                    lo = mid
            x = C[0] + hi * dx
            y = C[1] + hi * dy
            h, lab = surface_point(x, y, rough, bg, objs)
            depth[v, u] = hi
            labels[v, u] = lab


def _cell_tables(scene, cell):
    """Conservative max surface height and candidate objects per coarse cell."""
    n = max(1, int(math.ceil(scene.extent / cell)))
    bound = np.full((n, n), scene.background_roughness + 1e-9)
    _, _, objs = scene.arrays()
    cell_objs = np.zeros((n, n, max(1, len(objs))), dtype=np.int64)
    cell_count = np.zeros((n, n), dtype=np.int64)
    edges = np.arange(n + 1) * cell
    for k, o in enumerate(objs):
        cx, cy, rad = o[1], o[2], o[14]
        top = o[13] + o[10] + o[11] + 1e-9
        # distance from disc centre to each cell rectangle
        dxs = np.maximum(np.maximum(edges[:-1] - cx, cx - edges[1:]), 0.0)
        dys = np.maximum(np.maximum(edges[:-1] - cy, cy - edges[1:]), 0.0)
        near = dys[:, None] ** 2 + dxs[None, :] ** 2 <= rad * rad + 1e-12
        bound[near] = np.maximum(bound[near], top)
        cell_objs[near, cell_count[near]] = k
        cell_count[near] += 1
    return bound, cell_objs, cell_count


def render_view(scene, pose, intrinsics=None, index=0):
    """Ray-march every pixel against the continuous scene surface."""
    intr = intrinsics or Intrinsics()
    bg, rough, objs = scene.arrays()
    C = np.ascontiguousarray(pose.translation, dtype=np.float64)
    zmin, zmax = height_range(scene)
    if 0.0 <= C[0] <= scene.extent and 0.0 <= C[1] <= scene.extent:
        h, _ = surface_point(C[0], C[1], rough, bg, objs)
        if C[2] <= h:
            raise SceneError(f"camera at z={C[2]:.4f} is below the surface ({h:.4f})")
    elif C[2] <= zmax:
        raise SceneError("camera outside the scene must be above the tallest object")
    depth = np.empty((intr.height, intr.width))
    labels = np.empty((intr.height, intr.width), dtype=np.int16)
    cell = SKIP_CELLS * scene.resolution
    _render_kernel(C, np.ascontiguousarray(pose.rotation), intr.fx, intr.fy, intr.cx, intr.cy,
                   scene.extent, zmin, zmax, scene.resolution / 2.0, BISECTION_TOL,
                   rough, bg, objs, cell, *_cell_tables(scene, cell), depth, labels)
    return ViewFrame(depth, labels, pose, index)


def pixel_rays(intrinsics):
    """Camera-frame ray directions with unit z for every pixel, shape (H, W, 3)."""
    intr = intrinsics
    u, v = np.meshgrid(np.arange(intr.width, dtype=float), np.arange(intr.height, dtype=float))
    rays = np.empty((intr.height, intr.width, 3))
    rays[..., 0] = (u - intr.cx) / intr.fx
    rays[..., 1] = (v - intr.cy) / intr.fy
    rays[..., 2] = 1.0
    return rays


def backproject(depth, pose, intrinsics, rays=None):
    """World points of valid pixels; returns ``(points (n, 3), flat pixel indices)``."""
    if rays is None:
        rays = pixel_rays(intrinsics)
    flat = depth.ravel()
    idx = np.flatnonzero(flat > 0)
    cam = rays.reshape(-1, 3)[idx] * flat[idx, None]
    pts = cam @ pose.rotation.T + pose.translation
    return pts, idx


# ---------------------------------------------------------------- noise


def perturb_pose(pose, noise, frame_index):
    if noise.pose_sigma_trans == 0 and noise.pose_sigma_rot == 0:
        return CameraPose(pose.rotation.copy(), pose.translation.copy())
    rng = frame_rng(noise.rng_seed, _POSE_STREAM, frame_index)
    dt = rng.normal(0.0, noise.pose_sigma_trans, size=3) if noise.pose_sigma_trans > 0 else np.zeros(3)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.normal(0.0, noise.pose_sigma_rot) if noise.pose_sigma_rot > 0 else 0.0
    dR = Rotation.from_rotvec(axis * angle).as_matrix()
    return CameraPose(dR @ pose.rotation, pose.translation + dt)


def perturb_depth(depth, noise, frame_index):
    out = depth.copy()
    if noise.depth_sigma == 0:
        return out
    rng = frame_rng(noise.rng_seed, _DEPTH_STREAM, frame_index)
    draws = rng.normal(0.0, noise.depth_sigma, size=depth.size).reshape(depth.shape)
    valid = depth > 0
    out[valid] += draws[valid]
    # keep perturbed pixels valid
    out[valid] = np.maximum(out[valid], 1e-6)
    return out


def perturb(item, noise, frame_index):
    """Noisy copy of a pose or of a frame (depth noise only; the stored pose is kept)."""
    if isinstance(item, CameraPose):
        return perturb_pose(item, noise, frame_index)
    if isinstance(item, ViewFrame):
        return ViewFrame(perturb_depth(item.depth, noise, frame_index), item.labels.copy(),
                         item.pose, item.index)
    raise TypeError(f"cannot perturb {type(item).__name__}")


# ---------------------------------------------------------------- trajectories


def look_pose(target_xy, height, tilt, yaw):
    """Camera at ``height`` looking at ground point ``target_xy`` with ``tilt`` from nadir."""
    nadir = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    ct, st = math.cos(tilt), math.sin(tilt)
    tilt_m = np.array([[1.0, 0.0, 0.0], [0.0, ct, -st], [0.0, st, ct]])
    cy, sy = math.cos(yaw), math.sin(yaw)
    yaw_m = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    R = yaw_m @ nadir @ tilt_m
    forward = R[:, 2]
    horiz = forward[:2]
    norm = np.hypot(*horiz)
    offset = np.zeros(2) if norm < 1e-15 else horiz / norm * height * math.tan(tilt)
    t = np.array([target_xy[0] - offset[0], target_xy[1] - offset[1], height])
    return CameraPose(R, t)


def make_trajectory(scene, num_frames, height_range=(0.18, 0.4), tilt_range=(0.0, 40.0),
                    rng_seed=0):
    """Random browsing poses; ``tilt_range`` in degrees.

    Look-at targets are uniform over the scene, so the union of footprints
    covers the whole surface with high probability after a few hundred frames.
    """
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    rng = np.random.default_rng(rng_seed)
    poses = []
    for _ in range(num_frames):
        target = rng.uniform(0.0, scene.extent, size=2)
        h = float(rng.uniform(*height_range))
        tilt = math.radians(float(rng.uniform(*tilt_range)))
        yaw = float(rng.uniform(0.0, 2.0 * math.pi))
        poses.append(look_pose(target, h, tilt, yaw))
    return poses


# ---------------------------------------------------------------- export


def export_depth_pgm(path, depth):
    mm = np.clip(np.rint(np.asarray(depth) * 1000.0), 0, 65535).astype(np.uint16)
    write_pgm(path, mm, comments=["depth in millimetres, 0 = invalid"])


def export_labels_pgm(path, labels):
    lab = np.asarray(labels)
    out = np.where(lab < 0, 255, lab).astype(np.uint8)
    write_pgm(path, out, comments=["class id per pixel, 255 = invalid"])


def export_trajectory_csv(path, poses):
    with open(path, "w") as fh:
        fh.write("frame,tx,ty,tz,qw,qx,qy,qz\n")
        for k, p in enumerate(poses):
            vals = list(p.translation) + list(p.quaternion())
            fh.write(f"{k}," + ",".join(repr(float(v)) for v in vals) + "\n")


def import_trajectory_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    poses = []
    for row in data:
        qw, qx, qy, qz = row[4:8]
        poses.append(CameraPose(Rotation.from_quat([qx, qy, qz, qw]).as_matrix(), row[1:4]))
    return poses
