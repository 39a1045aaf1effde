"""One-off labelling of a reconstructed height map with a sliding window.

Windows of size ``w`` advance by ``o = w - 2r`` where ``r`` is the labeller's
receptive-field margin. Each window keeps only its trusted interior, the part
at least ``r`` pixels from any window side that is not on the map boundary, so
every map pixel is labelled once and with the same context a single
whole-map pass would give it.
"""

import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class TilingError(ValueError):
    pass


class ConvLayer(NamedTuple):
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    dilation: tuple = (1, 1)


_LAYER_RE = re.compile(r"^(\d+)(?:x(\d+))?(?:s(\d+)(?:x(\d+))?)?(?:d(\d+)(?:x(\d+))?)?$")


def parse_layers(text):
    """Parse ``"3s1,3s2d2,5x3"`` style layer lists.

    Each entry is ``K[xK]`` optionally followed by ``sS[xS]`` and ``dD[xD]``;
    a single number applies to both axes, stride and dilation default to 1.
    """
    layers = []
    for item in text.replace(" ", "").split(","):
        m = _LAYER_RE.match(item)
        if not m:
            raise ValueError(f"bad layer spec {item!r}; expected e.g. 3s2d1")
        kx, ky, sx, sy, dx, dy = m.groups()
        k = (int(kx), int(ky or kx))
        s = (int(sx or 1), int(sy or sx or 1))
        d = (int(dx or 1), int(dy or dx or 1))
        layers.append(make_layer(k, s, d))
    if not layers:
        raise ValueError("empty layer spec")
    return layers


def make_layer(kernel, stride=1, dilation=1):
    def pair(v):
        return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))

    layer = ConvLayer(pair(kernel), pair(stride), pair(dilation))
    if min(layer.kernel) < 1 or min(layer.stride) < 1 or min(layer.dilation) < 1:
        raise ValueError(f"kernel, stride and dilation must be >= 1: {layer}")
    return layer


def receptive_field(layers):
    """Theoretical receptive field ``(r_x, r_y)`` of a conv stack."""
    if not layers:
        raise ValueError("receptive_field needs at least one layer")
    out = []
    for axis in (0, 1):
        r, j = 1, 1
        for layer in layers:
            r += (layer.kernel[axis] - 1) * layer.dilation[axis] * j
            j *= layer.stride[axis]
        out.append(r)
    return tuple(out)


# ---------------------------------------------------------------- tiling


def _axis_tiles(size, window, r):
    """Window origins and trusted half-open intervals along one axis."""
    if window >= size:
        return [0], [(0, size)], size
    step = window - 2 * r
    if step <= 0:
        raise TilingError(f"window too small for receptive field: window {window} <= 2 * {r}")
    origins = [0]
    while origins[-1] + window < size:
        nxt = origins[-1] + step
        origins.append(min(nxt, size - window))
    intervals = []
    lo = 0
    for k, o in enumerate(origins):
        hi = size if k == len(origins) - 1 else o + window - r
        intervals.append((lo, hi))
        lo = hi
    return origins, intervals, window


@dataclass
class TilePlan:
    map_dims: tuple  # (width, height)
    window: tuple  # requested (w_x, w_y)
    r: tuple
    offsets: tuple
    x_origins: list
    y_origins: list
    x_trusted: list
    y_trusted: list
    effective_window: tuple  # window after clamping to the map

    @property
    def num_windows(self):
        return len(self.x_origins) * len(self.y_origins)

    def windows(self):
        """Yield ``(x0, y0, w, h, (tx0, ty0, tx1, ty1))`` with half-open trusted rects."""
        ew, eh = self.effective_window
        for y0, (ty0, ty1) in zip(self.y_origins, self.y_trusted):
            for x0, (tx0, tx1) in zip(self.x_origins, self.x_trusted):
                yield x0, y0, ew, eh, (tx0, ty0, tx1, ty1)

    def pixel_evaluations(self):
        ew, eh = self.effective_window
        return self.num_windows * ew * eh

    def to_json(self):
        return json.dumps({
            "map_dims": list(self.map_dims),
            "window": list(self.window),
            "effective_window": list(self.effective_window),
            "r": list(self.r),
            "offsets": list(self.offsets),
            "windows": [{"origin": [x0, y0], "trusted": list(t)}
                        for x0, y0, _, _, t in self.windows()],
        }, indent=2) + "\n"


def plan_tiles(map_dims, window_dims, r):
    """Sliding-window layout for a ``(width, height)`` map."""
    mx, my = (int(v) for v in map_dims)
    wx, wy = (int(v) for v in window_dims)
    rx, ry = (int(r), int(r)) if np.isscalar(r) else (int(r[0]), int(r[1]))
    if min(mx, my, wx, wy) < 1 or min(rx, ry) < 0:
        raise TilingError("map and window dims must be positive and r non-negative")
    xo, xt, ew = _axis_tiles(mx, wx, rx)
    yo, yt, eh = _axis_tiles(my, wy, ry)
    return TilePlan((mx, my), (wx, wy), (rx, ry), (wx - 2 * rx, wy - 2 * ry),
                    xo, yo, xt, yt, (ew, eh))


# ---------------------------------------------------------------- labelling


@dataclass
class MapLabelStats:
    windows: int = 0
    pixel_evaluations: int = 0
    unobserved_pixels: int = 0
    seconds: float = 0.0


def height_image(field):
    """Height map with NaN at unobserved vertices, the labeller's input."""
    return np.where(field.observed, field.heights, np.nan)


def label_map(field, labeller, plan, jobs=1):
    """Label a map window by window and stitch trusted interiors.

    ``field`` needs ``heights`` and ``observed``; ``labeller.predict(crop,
    origin=(row, col))`` returns class distributions for the crop. Returns
    ``(probs, labels, stats)``.
    """
    t0 = time.perf_counter()
    image = height_image(field)
    ny, nx = image.shape
    if (nx, ny) != tuple(plan.map_dims):
        raise TilingError(f"plan is for map {plan.map_dims}, field is {(nx, ny)}")
    rho = getattr(labeller, "radius", 0)
    if rho > min(plan.r):
        raise TilingError(f"labeller radius {rho} exceeds plan margin {plan.r}")
    wins = list(plan.windows())

    def run(win):
        x0, y0, w, h, _ = win
        return labeller.predict(image[y0:y0 + h, x0:x0 + w], origin=(y0, x0))

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            outputs = list(pool.map(run, wins))
    else:
        outputs = [run(win) for win in wins]

    probs = None
    written = np.zeros((ny, nx), np.int32)
    for (x0, y0, _, _, (tx0, ty0, tx1, ty1)), out in zip(wins, outputs):
        if probs is None:
            probs = np.empty((ny, nx, out.shape[-1]))
        probs[ty0:ty1, tx0:tx1] = out[ty0 - y0:ty1 - y0, tx0 - x0:tx1 - x0]
        written[ty0:ty1, tx0:tx1] += 1
    if not np.all(written == 1):
        raise TilingError("trusted interiors do not partition the map")
    stats = MapLabelStats(len(wins), plan.pixel_evaluations(),
                          int(np.count_nonzero(np.isnan(image))), time.perf_counter() - t0)
    return probs, np.argmax(probs, axis=-1), stats


@dataclass
class MapEvalResult:
    frames: int
    coverage: float
    skipped: bool
    labels: np.ndarray = None
    stats: MapLabelStats = field(default_factory=MapLabelStats)


def run_map_eval(snapshots, labeller, plan, coverage_threshold=0.99, jobs=1):
    """Label each snapshot once the map is covered; earlier ones are marked skipped."""
    results = []
    for snap in snapshots:
        if snap.coverage < coverage_threshold:
            results.append(MapEvalResult(snap.frames, snap.coverage, True))
            continue
        _, labels, stats = label_map(snap, labeller, plan, jobs)
        results.append(MapEvalResult(snap.frames, snap.coverage, False, labels, stats))
    return results
