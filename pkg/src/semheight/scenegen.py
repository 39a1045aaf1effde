"""Procedural table-top scenes: a gently undulating surface with three object families.

Class ids: 0 background, 1 wide slab with periodic top relief (keyboard-like),
2 small rounded elongated slab (remote-like), 3 cross-shaped extrusion
(plane-like). Heights are single valued everywhere. Rectangular footprint
parts are half-open (min edge inclusive, max edge exclusive); round caps use a
strict inequality.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

SCENE_SCHEMA_VERSION = 1
NUM_CLASSES = 4

# fixed background frequencies (cycles per metre) and relative amplitudes
BACKGROUND_TERMS = ((1.3, 0.4, 0.5), (-0.6, 1.1, 0.3), (0.9, 0.9, 0.2))

# class-specific construction ranges; heights are disjoint so families stay distinct
FAMILY_RANGES = {
    1: dict(length=(0.18, 0.24), width=(0.06, 0.09), base=(0.012, 0.018),
            relief=(0.0015, 0.0025), period=(0.012, 0.020)),
    2: dict(length=(0.10, 0.15), width=(0.030, 0.045), base=(0.020, 0.026),
            relief=(0.002, 0.004)),
    3: dict(length=(0.14, 0.20), width=(0.020, 0.030), span=(0.12, 0.18),
            chord=(0.025, 0.040), wing_offset=(0.05, 0.15), base=(0.030, 0.040),
            relief=(0.004, 0.008)),
}

PLACEMENT_MARGIN = 0.01
MAX_PLACEMENT_TRIES = 1000

# object parameter columns for the compiled kernel
_CLS, _CX, _CY, _COS, _SIN, _A, _B, _S, _C, _E, _H, _AMP, _PER, _REF, _RAD = range(15)


class SceneError(ValueError):
    pass


class SceneDensityError(SceneError):
    pass


@dataclass
class ObjectSpec:
    class_id: int
    position: tuple
    orientation: float
    footprint: dict
    height_profile: dict


@dataclass
class SceneSpec:
    extent: float
    resolution: float
    rng_seed: int
    background_roughness: float = 0.002
    background_phases: tuple = (0.0, 0.0, 0.0)
    objects: list = field(default_factory=list)

    def to_json(self):
        doc = {
            "version": SCENE_SCHEMA_VERSION,
            "extent": self.extent,
            "resolution": self.resolution,
            "seed": self.rng_seed,
            "background_roughness": self.background_roughness,
            "background_phases": list(self.background_phases),
            "objects": [
                {**asdict(o), "position": list(o.position)} for o in self.objects
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("version") != SCENE_SCHEMA_VERSION:
            raise SceneError(f"unsupported scene schema version {doc.get('version')}")
        objs = [
            ObjectSpec(o["class_id"], tuple(o["position"]), o["orientation"],
                       dict(o["footprint"]), dict(o["height_profile"]))
            for o in doc["objects"]
        ]
        return cls(doc["extent"], doc["resolution"], doc["seed"], doc["background_roughness"],
                   tuple(doc["background_phases"]), objs)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())

    def grid_dims(self):
        n = int(round(self.extent / self.resolution)) + 1
        return n, n

    def arrays(self):
        """Packed arrays consumed by the compiled surface kernel."""
        return _pack(self)


@dataclass
class GroundTruth:
    heights: np.ndarray
    labels: np.ndarray
    resolution: float
    origin: tuple = (0.0, 0.0)


# ---------------------------------------------------------------- geometry


def bounding_radius(obj):
    f = obj.footprint
    if obj.class_id == 1:
        return math.hypot(f["half_length"], f["half_width"])
    if obj.class_id == 2:
        return f["half_core"] + f["radius"]
    if obj.class_id == 3:
        return max(math.hypot(f["half_length"], f["half_width"]),
                   math.hypot(abs(f["wing_offset"]) + f["half_chord"], f["half_span"]))
    raise SceneError(f"unknown class id {obj.class_id}")


def footprint_area(obj):
    f = obj.footprint
    if obj.class_id == 1:
        return 4.0 * f["half_length"] * f["half_width"]
    if obj.class_id == 2:
        r = f["radius"]
        return 4.0 * f["half_core"] * r + math.pi * r * r
    # cross: union of fuselage and wing rectangles
    fus = 4.0 * f["half_length"] * f["half_width"]
    wing = 4.0 * f["half_chord"] * f["half_span"]
    u_lo = max(-f["half_length"], f["wing_offset"] - f["half_chord"])
    u_hi = min(f["half_length"], f["wing_offset"] + f["half_chord"])
    overlap = max(0.0, u_hi - u_lo) * 2.0 * min(f["half_width"], f["half_span"])
    return fus + wing - overlap


def _sample_shape(rng, class_id):
    r = FAMILY_RANGES[class_id]
    u = lambda key: float(rng.uniform(*r[key]))  # noqa: E731
    if class_id == 1:
        fp = dict(half_length=u("length") / 2, half_width=u("width") / 2)
        hp = dict(base=u("base"), relief=u("relief"), period=u("period"))
    elif class_id == 2:
        length, width = u("length"), u("width")
        fp = dict(half_core=length / 2 - width / 2, radius=width / 2)
        hp = dict(base=u("base"), relief=u("relief"))
    else:
        length = u("length")
        fp = dict(half_length=length / 2, half_width=u("width") / 2, half_span=u("span") / 2,
                  half_chord=u("chord") / 2, wing_offset=u("wing_offset") * length)
        hp = dict(base=u("base"), relief=u("relief"))
    return fp, hp


def generate_scene(extent, resolution, counts_per_class, rng_seed, background_roughness=0.002):
    """Random non-overlapping placement of ``counts_per_class[k]`` objects of class k+1."""
    if extent <= 0 or resolution <= 0 or resolution > extent:
        raise SceneError("extent and resolution must be positive with resolution <= extent")
    counts = [int(c) for c in counts_per_class]
    if len(counts) != 3 or min(counts) < 0:
        raise SceneError("counts_per_class needs three non-negative entries")
    rng = np.random.default_rng(rng_seed)
    phases = tuple(float(p) for p in rng.uniform(0.0, 2.0 * math.pi, size=len(BACKGROUND_TERMS)))
    spec = SceneSpec(float(extent), float(resolution), int(rng_seed),
                     float(background_roughness), phases, [])

    shapes = []
    for class_id, n in zip((1, 2, 3), counts):
        for _ in range(n):
            shapes.append((class_id,) + _sample_shape(rng, class_id))

    proto = [ObjectSpec(c, (0.0, 0.0), 0.0, fp, hp) for c, fp, hp in shapes]
    radii = [bounding_radius(o) + PLACEMENT_MARGIN / 2 for o in proto]
    if sum(math.pi * r * r for r in radii) > extent * extent:
        raise SceneDensityError(
            f"object density too high: bounding discs need {sum(math.pi * r * r for r in radii):.3f} m^2 "
            f"but the scene has {extent * extent:.3f} m^2")

    placed = []
    for obj, rad in zip(proto, radii):
        if 2 * rad > extent:
            raise SceneDensityError(f"object of radius {rad:.3f} m does not fit in {extent} m")
        for _ in range(MAX_PLACEMENT_TRIES):
            x, y = rng.uniform(rad, extent - rad, size=2)
            theta = float(rng.uniform(0.0, 2.0 * math.pi))
            if all((x - px) ** 2 + (y - py) ** 2 >= (rad + pr) ** 2 for px, py, pr in placed):
                break
        else:
            raise SceneDensityError(
                f"could not place object {len(placed) + 1}/{len(proto)} after "
                f"{MAX_PLACEMENT_TRIES} tries: object density too high")
        placed.append((float(x), float(y), rad))
        obj.position = (float(x), float(y))
        obj.orientation = theta
        spec.objects.append(obj)
    return spec


def _pack(spec):
    bg = np.array([[fx, fy, w, ph] for (fx, fy, w), ph in zip(BACKGROUND_TERMS, spec.background_phases)],
                  dtype=np.float64)
    objs = np.zeros((len(spec.objects), 15))
    for k, o in enumerate(spec.objects):
        f, h = o.footprint, o.height_profile
        row = objs[k]
        row[_CLS] = o.class_id
        row[_CX], row[_CY] = o.position
        row[_COS], row[_SIN] = math.cos(o.orientation), math.sin(o.orientation)
        if o.class_id == 1:
            row[_A], row[_B], row[_PER] = f["half_length"], f["half_width"], h["period"]
        elif o.class_id == 2:
            row[_A], row[_B] = f["half_core"], f["radius"]
        else:
            row[_A], row[_B] = f["half_length"], f["half_width"]
            row[_S], row[_C], row[_E] = f["half_span"], f["half_chord"], f["wing_offset"]
        row[_H], row[_AMP] = h["base"], h["relief"]
        row[_REF] = _background(o.position[0], o.position[1], spec.background_roughness, bg)
        row[_RAD] = bounding_radius(o)
    return bg, float(spec.background_roughness), objs


# ---------------------------------------------------------------- compiled surface


@njit(cache=True)
def _background(x, y, roughness, bg):
    z = 0.0
    for t in range(bg.shape[0]):
        z += bg[t, 2] * math.sin(2.0 * math.pi * (bg[t, 0] * x + bg[t, 1] * y) + bg[t, 3])
    return roughness * z


@njit(cache=True)
def _object_top(x, y, objs, k):
    """Top height of object ``k`` at (x, y), or -inf outside its footprint."""
    dx = x - objs[k, _CX]
    dy = y - objs[k, _CY]
    if dx * dx + dy * dy > objs[k, _RAD] * objs[k, _RAD] + 1e-12:
        return -math.inf
    o = objs[k]
    u = o[_COS] * dx + o[_SIN] * dy
    v = -o[_SIN] * dx + o[_COS] * dy
    a = o[_A]
    b = o[_B]
    cls = int(o[_CLS])
    top = -math.inf
    if cls == 1:
        if -a <= u < a and -b <= v < b:
            top = o[_REF] + o[_H] + o[_AMP] * 0.5 * (1.0 + math.cos(2.0 * math.pi * u / o[_PER]))
    elif cls == 2:
        rho2 = -1.0
        if -a <= u < a and -b <= v < b:
            rho2 = v * v
        else:
            d1 = (u - a) * (u - a) + v * v
            d2 = (u + a) * (u + a) + v * v
            d = min(d1, d2)
            if d < b * b:
                rho2 = d
        if rho2 >= 0.0:
            top = o[_REF] + o[_H] + o[_AMP] * max(0.0, 1.0 - rho2 / (b * b))
    else:
        if -a <= u < a and -b <= v < b:
            top = o[_REF] + o[_H] + o[_AMP] * (1.0 - (v / b) * (v / b))
        e = o[_E]
        c = o[_C]
        s = o[_S]
        if e - c <= u < e + c and -s <= v < s:
            top = max(top, o[_REF] + o[_H])
    return top


@njit(cache=True)
def surface_point_subset(x, y, roughness, bg, objs, subset, count):
    """(height, class) at (x, y) considering only objects ``subset[:count]``."""
    h = _background(x, y, roughness, bg)
    label = 0
    best = -math.inf
    for n in range(count):
        k = subset[n]
        top = _object_top(x, y, objs, k)
        if top > best:
            best = top
            label = int(objs[k, _CLS])
    if best > h:
        h = best
    return h, label


@njit(cache=True)
def surface_point(x, y, roughness, bg, objs):
    """(height, class) of the scene at (x, y)."""
    h = _background(x, y, roughness, bg)
    label = 0
    best = -math.inf
    for k in range(objs.shape[0]):
        top = _object_top(x, y, objs, k)
        if top > best:
            best = top
            label = int(objs[k, _CLS])
    if best > h:
        h = best
    return h, label


@njit(cache=True)
def _surface_many(xs, ys, roughness, bg, objs, heights, labels):
    for n in range(xs.size):
        h, lab = surface_point(xs[n], ys[n], roughness, bg, objs)
        heights[n] = h
        labels[n] = lab


def surface(spec, x, y):
    """Vectorised exact scene height and class at world points."""
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    y = np.ascontiguousarray(np.asarray(y, dtype=np.float64))
    xs, ys = np.broadcast_arrays(x, y)
    shape = xs.shape
    xs, ys = xs.ravel().copy(), ys.ravel().copy()
    heights = np.empty(xs.size)
    labels = np.empty(xs.size, dtype=np.int64)
    bg, rough, objs = spec.arrays()
    _surface_many(xs, ys, rough, bg, objs, heights, labels)
    return heights.reshape(shape), labels.reshape(shape)


def height_at(spec, x, y):
    if not (0.0 <= x <= spec.extent and 0.0 <= y <= spec.extent):
        raise SceneError(f"point ({x}, {y}) outside scene extent [0, {spec.extent}]")
    h, _ = surface(spec, np.array([x]), np.array([y]))
    return float(h[0])


def rasterize_ground_truth(spec, grid_dims=None):
    """Sample height and class at every grid vertex; ``grid_dims`` is (nx, ny)."""
    nx, ny = grid_dims if grid_dims is not None else spec.grid_dims()
    if nx < 2 or ny < 2:
        raise SceneError("grid needs at least 2x2 vertices")
    res_x = spec.extent / (nx - 1)
    res_y = spec.extent / (ny - 1)
    xs = np.arange(nx) * res_x
    ys = np.arange(ny) * res_y
    gx, gy = np.meshgrid(xs, ys)
    heights, labels = surface(spec, gx, gy)
    return GroundTruth(heights, labels, res_x)


def height_range(spec):
    """Bounds (zmin, zmax) of the scene surface, padded slightly."""
    zmax = spec.background_roughness
    for o in spec.objects:
        zmax = max(zmax, spec.background_roughness + o.height_profile["base"]
                   + o.height_profile["relief"] + spec.background_roughness)
    return -spec.background_roughness - 1e-6, zmax + 1e-6
