"""Desk-scale experiments comparing view-based fusion with map-based labelling.

Both pipelines consume the same clean frame stream. The view pipeline
corrupts each frame (pose and depth noise), fuses geometry, labels the frame
and fuses the labels. The map pipeline fuses the same noisy geometry and
labels the reconstruction with a sliding window at every checkpoint once the
map is covered. Geometry fusion is identical for both, so it runs once.
"""

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache

import numpy as np

from .fusion import DecayModel, run_sequence
from .grid import new_height_field
from .labellers import CorruptionParams, OracleMapLabeller, OracleViewLabeller
from .mapseg import label_map, plan_tiles
from .metrics import mean_iou
from .render import Intrinsics, NoiseModel, make_trajectory, render_view
from .scenegen import generate_scene, rasterize_ground_truth

NUM_CLASSES = 4
_SEED_STRIDE = 1_000_003

# Labeller settings for the default desk configuration. base_accuracy comes
# from calibrate_view_labeller (single-frame mIoU 0.95) and
# calibrate_map_labeller (single-pass mIoU 0.93 on ground-truth heights).
DEFAULT_VIEW_LABELLER = dict(base_accuracy=0.997588, boundary_band=1, boundary_boost=0.1,
                             boundary_mode="erode", noise_sensitivity=50.0,
                             degradation_window=5, confidence=0.9, rng_seed=1)
DEFAULT_MAP_LABELLER = dict(base_accuracy=0.994770, boundary_band=1, boundary_boost=0.0,
                            noise_sensitivity=50.0, confidence=0.9, rng_seed=2)


@dataclass
class ExperimentConfig:
    seed: int = 0
    scene_seeds: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    run_seeds: list = field(default_factory=lambda: list(range(10)))
    map_size: int = 257
    resolution: float = 0.004
    object_counts: list = field(default_factory=lambda: [2, 3, 2])
    background_roughness: float = 0.002
    frames: int = 300
    cadence: int = 20
    image_size: list = field(default_factory=lambda: [80, 60])
    hfov_deg: float = 60.0
    height_range: list = field(default_factory=lambda: [0.12, 0.25])
    tilt_range: list = field(default_factory=lambda: [0.0, 40.0])
    alpha: float = 1.0
    distance: str = "3d"
    map_window: list = field(default_factory=lambda: [96, 96])
    map_r: int = None  # margin override; default is the map labeller radius
    coverage_threshold: float = 0.99
    sigma_pose: float = 0.0  # translation sigma in m
    sigma_depth: float = 0.0
    rot_per_trans: float = 1.0  # rotation sigma (rad) per metre of translation sigma
    sigma_pose_grid: list = field(default_factory=lambda: [0.0, 0.0025, 0.005, 0.01])
    sigma_depth_grid: list = field(default_factory=lambda: [0.0, 0.005, 0.01, 0.02])
    sweep_scenes: int = 1  # the sweep uses the first N scene seeds
    view_labeller: dict = field(default_factory=lambda: dict(DEFAULT_VIEW_LABELLER))
    map_labeller: dict = field(default_factory=lambda: dict(DEFAULT_MAP_LABELLER))

    def __post_init__(self):
        if self.frames < 0 or self.cadence < 1:
            raise ValueError("frames must be >= 0 and cadence >= 1")
        if self.map_size < 2 or not self.resolution > 0:
            raise ValueError("map_size must be >= 2 and resolution positive")
        if not self.scene_seeds or not self.run_seeds:
            raise ValueError("scene_seeds and run_seeds must be nonempty")
        CorruptionParams(**self.view_labeller)
        CorruptionParams(**self.map_labeller)

    @property
    def extent(self):
        return (self.map_size - 1) * self.resolution

    def intrinsics(self):
        return Intrinsics.from_fov(self.image_size[0], self.image_size[1], self.hfov_deg)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key, defaults in (("view_labeller", DEFAULT_VIEW_LABELLER),
                              ("map_labeller", DEFAULT_MAP_LABELLER)):
            if key in d:
                d[key] = {**defaults, **d[key]}
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_master_seed(self, seed):
        """Copy whose scene and run seeds are derived from one master seed."""
        state = np.random.SeedSequence(seed).generate_state(len(self.scene_seeds) + len(self.run_seeds))
        d = asdict(self)
        d["seed"] = int(seed)
        d["scene_seeds"] = [int(s) for s in state[:len(self.scene_seeds)]]
        d["run_seeds"] = [int(s) for s in state[len(self.scene_seeds):]]
        return ExperimentConfig(**d)


def labeller_params(spec, run_seed):
    d = dict(spec)
    d["rng_seed"] = int(d.get("rng_seed", 0)) * _SEED_STRIDE + int(run_seed)
    return CorruptionParams(**d)


# ---------------------------------------------------------------- building blocks


@lru_cache(maxsize=8)
def _scene(extent, resolution, counts, roughness, seed, map_size):
    spec = generate_scene(extent, resolution, counts, seed, roughness)
    gt = rasterize_ground_truth(spec, (map_size, map_size))
    return spec, gt


def build_scene(config, scene_seed):
    return _scene(config.extent, config.resolution, tuple(config.object_counts),
                  config.background_roughness, int(scene_seed), config.map_size)


def render_frames(config, spec, run_seed, num_frames=None):
    n = config.frames if num_frames is None else num_frames
    if n == 0:
        return []
    intr = config.intrinsics()
    poses = make_trajectory(spec, n, tuple(config.height_range), tuple(config.tilt_range),
                            rng_seed=run_seed)
    return [render_view(spec, pose, intr, index=k) for k, pose in enumerate(poses)]


def new_field(config):
    return new_height_field(config.map_size, config.map_size, config.resolution,
                            num_classes=NUM_CLASSES)


def map_plan(config):
    r = config.map_r if config.map_r is not None else config.map_labeller["boundary_band"]
    return plan_tiles((config.map_size, config.map_size), config.map_window, r)


def view_labeller_for(config, run_seed):
    return OracleViewLabeller(labeller_params(config.view_labeller, run_seed))


# ---------------------------------------------------------------- single run


@dataclass
class Checkpoint:
    frames: int
    coverage: float
    view_miou: float
    map_miou: float  # NaN before full coverage
    view_seconds: float
    map_seconds: float
    view_pixevals: int
    map_pixevals: int


@dataclass
class RunResult:
    scene_seed: int
    run_seed: int
    sigma_pose: float
    sigma_depth: float
    checkpoints: list
    timing_rows: list = field(default_factory=list)

    def final(self):
        return self.checkpoints[-1] if self.checkpoints else None


def run_single(config, scene_seed, run_seed, sigma_pose=None, sigma_depth=None, frames=None):
    """Run both pipelines on one scene and trajectory; ``frames`` may be pre-rendered."""
    sp = config.sigma_pose if sigma_pose is None else sigma_pose
    sd = config.sigma_depth if sigma_depth is None else sigma_depth
    spec, gt = build_scene(config, scene_seed)
    if frames is None:
        frames = render_frames(config, spec, run_seed)
    if not frames:
        return RunResult(scene_seed, run_seed, sp, sd, [])
    intr = config.intrinsics()
    model = DecayModel(config.alpha, NUM_CLASSES, config.distance)
    noise = NoiseModel(sp, sp * config.rot_per_trans, sd, rng_seed=run_seed)
    noisy = sp > 0 or sd > 0

    clean_snaps = None
    if noisy:
        clean_snaps, _ = run_sequence(new_field(config), frames, NoiseModel(), None,
                                      config.cadence, model, intr)
    snaps, log = run_sequence(new_field(config), frames, noise, view_labeller_for(config, run_seed),
                              config.cadence, model, intr)
    if clean_snaps is None:
        clean_snaps = snaps

    plan = map_plan(config)
    map_params = labeller_params(config.map_labeller, run_seed)
    w, h = config.image_size
    checkpoints = []
    map_seconds = 0.0
    passes = 0
    for snap, ref in zip(snaps, clean_snaps):
        view = mean_iou(snap.labels, gt.labels, NUM_CLASSES).mean
        miou = float("nan")
        if snap.coverage >= config.coverage_threshold:
            reference = np.where(ref.observed, ref.heights, np.nan)
            t0 = time.perf_counter()
            _, labels, _ = label_map(snap, OracleMapLabeller(gt.labels, reference, map_params), plan)
            map_seconds += time.perf_counter() - t0
            passes += 1
            miou = mean_iou(labels, gt.labels, NUM_CLASSES).mean
        checkpoints.append(Checkpoint(snap.frames, snap.coverage, view, miou, snap.elapsed,
                                      snap.geometry_elapsed + map_seconds, snap.frames * w * h,
                                      passes * plan.pixel_evaluations()))
    return RunResult(scene_seed, run_seed, sp, sd, checkpoints, log.rows)


def _run_task(args):
    config, scene_seed, run_seed, cells = args
    spec, _ = build_scene(config, scene_seed)
    frames = render_frames(config, spec, run_seed)
    return [run_single(config, scene_seed, run_seed, sp, sd, frames) for sp, sd in cells]


def _map_tasks(tasks, jobs):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_run_task, tasks))
    return [_run_task(t) for t in tasks]


def run_comparison(config, jobs=1):
    """All scene x run seeds at the configured noise; results in (scene, seed) order."""
    tasks = [(config, s, r, [(config.sigma_pose, config.sigma_depth)])
             for s in config.scene_seeds for r in config.run_seeds]
    return [res for group in _map_tasks(tasks, jobs) for res in group]


def run_noise_sweep(config, jobs=1):
    """Both pipelines over the sigma_pose x sigma_depth grid; one render per trajectory."""
    if not config.sigma_pose_grid or not config.sigma_depth_grid:
        raise ValueError("noise grids must be nonempty")
    cells = [(float(p), float(d)) for p in config.sigma_pose_grid for d in config.sigma_depth_grid]
    scenes = config.scene_seeds[:max(1, config.sweep_scenes)]
    tasks = [(config, s, r, cells) for s in scenes for r in config.run_seeds]
    return [res for group in _map_tasks(tasks, jobs) for res in group]


# ---------------------------------------------------------------- aggregation and output


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{v:.6f}"


COMPARISON_HEADER = ("scene", "seed", "frames", "wallclock_ms", "view_miou", "map_miou",
                     "view_pixevals", "map_pixevals")


def write_comparison_csv(path, results, wallclock=False):
    with open(path, "w") as fh:
        fh.write(",".join(COMPARISON_HEADER) + "\n")
        for res in results:
            for c in res.checkpoints:
                ms = c.view_seconds * 1000.0 if wallclock else None
                fh.write(",".join(_fmt(v) for v in (res.scene_seed, res.run_seed, c.frames, ms,
                                                    c.view_miou, c.map_miou, c.view_pixevals,
                                                    c.map_pixevals)) + "\n")


def mean_curves(results):
    """Per-scene and overall mean curves keyed by ``(scene or 'all', frames)``."""
    groups = {}
    for res in results:
        for key in (res.scene_seed, "all"):
            for c in res.checkpoints:
                groups.setdefault((key, c.frames), []).append(c)
    rows = []
    for (scene, frames), cs in groups.items():
        view = np.array([c.view_miou for c in cs])
        maps = np.array([c.map_miou for c in cs])
        done = ~np.isnan(maps)
        rows.append(dict(scene=scene, frames=frames, n_runs=len(cs),
                         view_miou=float(view.mean()), view_std=float(view.std()),
                         map_miou=float(maps[done].mean()) if done.any() else float("nan"),
                         map_std=float(maps[done].std()) if done.any() else float("nan"),
                         map_runs=int(done.sum()),
                         view_pixevals=cs[0].view_pixevals,
                         map_pixevals=int(round(np.mean([c.map_pixevals for c in cs])))))
    order = {s: k for k, s in enumerate(dict.fromkeys(r.scene_seed for r in results))}
    rows.sort(key=lambda r: (order.get(r["scene"], len(order)), r["frames"]))
    return rows


MEAN_HEADER = ("scene", "frames", "n_runs", "view_miou", "view_std", "map_miou", "map_std",
               "map_runs", "view_pixevals", "map_pixevals")


def write_mean_csv(path, rows):
    with open(path, "w") as fh:
        fh.write(",".join(MEAN_HEADER) + "\n")
        for r in rows:
            fh.write(",".join(str(r[k]) if k == "scene" else _fmt(r[k]) for k in MEAN_HEADER) + "\n")


def write_time_curves_csv(path, results):
    with open(path, "w") as fh:
        fh.write("scene,seed,pipeline,frames,wallclock_ms,miou\n")
        for res in results:
            for c in res.checkpoints:
                fh.write(f"{res.scene_seed},{res.run_seed},view,{c.frames},"
                         f"{_fmt(c.view_seconds * 1000)},{_fmt(c.view_miou)}\n")
                if not math.isnan(c.map_miou):
                    fh.write(f"{res.scene_seed},{res.run_seed},map,{c.frames},"
                             f"{_fmt(c.map_seconds * 1000)},{_fmt(c.map_miou)}\n")


def write_timing_csv(path, results):
    with open(path, "w") as fh:
        fh.write("scene,seed,sigma_pose,sigma_depth,frame,t_load,t_reconstruct,t_label,t_fuse,"
                 "pixels_fused,pixels_skipped\n")
        for res in results:
            for row in res.timing_rows:
                fh.write(f"{res.scene_seed},{res.run_seed},{_fmt(res.sigma_pose)},"
                         f"{_fmt(res.sigma_depth)}," + ",".join(_fmt(v) for v in row) + "\n")


def noise_table(results):
    """Final-checkpoint mIoU per noise cell and pipeline: mean, std, n."""
    cells = {}
    for res in results:
        fin = res.final()
        if fin is None:
            continue
        cell = cells.setdefault((res.sigma_pose, res.sigma_depth), {"view": [], "map": []})
        cell["view"].append(fin.view_miou)
        if not math.isnan(fin.map_miou):
            cell["map"].append(fin.map_miou)
    rows = []
    for (sp, sd) in sorted(cells):
        for pipeline in ("view", "map"):
            v = np.array(cells[(sp, sd)][pipeline])
            rows.append(dict(sigma_pose=sp, sigma_depth=sd, pipeline=pipeline,
                             miou_mean=float(v.mean()) if v.size else float("nan"),
                             miou_std=float(v.std()) if v.size else float("nan"),
                             n_runs=int(v.size)))
    return rows


NOISE_HEADER = ("sigma_pose", "sigma_depth", "pipeline", "miou_mean", "miou_std", "n_runs")


def write_noise_csv(path, rows):
    with open(path, "w") as fh:
        fh.write(",".join(NOISE_HEADER) + "\n")
        for r in rows:
            fh.write(",".join(r[k] if k == "pipeline" else _fmt(r[k]) for k in NOISE_HEADER) + "\n")


def write_noise_runs_csv(path, results):
    with open(path, "w") as fh:
        fh.write("scene,seed,sigma_pose,sigma_depth,frames,view_miou,map_miou\n")
        for res in results:
            fin = res.final()
            if fin is None:
                continue
            fh.write(",".join(_fmt(v) for v in (res.scene_seed, res.run_seed, res.sigma_pose,
                                                res.sigma_depth, fin.frames, fin.view_miou,
                                                fin.map_miou)) + "\n")


def write_noise_matrix(path, rows, pipeline, pose_grid, depth_grid):
    """Whitespace matrix for gnuplot ``matrix nonuniform``: first row is sigma_depth."""
    table = {(r["sigma_pose"], r["sigma_depth"]): r["miou_mean"]
             for r in rows if r["pipeline"] == pipeline}
    with open(path, "w") as fh:
        fh.write(f"# {pipeline} mean IoU; rows sigma_pose, columns sigma_depth\n")
        fh.write(" ".join([str(len(depth_grid))] + [_fmt(float(d)) for d in depth_grid]) + "\n")
        for p in pose_grid:
            vals = [table.get((float(p), float(d)), float("nan")) for d in depth_grid]
            fh.write(" ".join([_fmt(float(p))] + [_fmt(v) or "nan" for v in vals]) + "\n")


# ---------------------------------------------------------------- calibration


def single_frame_view_miou(config, params, scene_seeds=None, frames_per_scene=20):
    """Single-frame mIoU of the view labeller on clean renders.

    Intersections and unions are pooled over all calibration frames (valid
    pixels only), the usual test-set convention; per-image means would be
    dominated by stray pixels of classes absent from the image.
    """
    seeds = config.scene_seeds if scene_seeds is None else scene_seeds
    lab = OracleViewLabeller(params)
    preds, truth = [], []
    for s in seeds:
        for frame in _calibration_frames(config, s, frames_per_scene):
            probs = lab.label_view(frame, frame.depth, frame.index)
            valid = frame.valid
            preds.append(np.argmax(probs, -1)[valid])
            truth.append(frame.labels[valid])
    return mean_iou(np.concatenate(preds), np.concatenate(truth), NUM_CLASSES).mean


@lru_cache(maxsize=16)
def _calibration_frames_cached(config_json, scene_seed, n):
    config = ExperimentConfig.from_dict(json.loads(config_json))
    spec, _ = build_scene(config, scene_seed)
    # a trajectory stream disjoint from the run seeds
    return tuple(render_frames(config, spec, 10_000 + scene_seed, n))


def _calibration_frames(config, scene_seed, n):
    return _calibration_frames_cached(config.to_json(), int(scene_seed), int(n))


def single_pass_map_miou(config, params, scene_seeds=None):
    """Mean mIoU of the map labeller on ground-truth height maps."""
    seeds = config.scene_seeds if scene_seeds is None else scene_seeds
    plan = map_plan(config)
    scores = []
    for s in seeds:
        _, gt = build_scene(config, s)
        field_like = _GroundTruthField(gt.heights)
        _, labels, _ = label_map(field_like, OracleMapLabeller(gt.labels, gt.heights, params), plan)
        scores.append(mean_iou(labels, gt.labels, NUM_CLASSES).mean)
    return float(np.mean(scores))


class _GroundTruthField:
    def __init__(self, heights):
        self.heights = heights
        self.observed = np.ones(heights.shape, bool)


def _bisect_accuracy(score, target, lo=0.3, hi=1.0, iters=30):
    """Find base_accuracy whose score hits ``target``; score is non-decreasing in it."""
    if score(hi) < target:
        raise ValueError(f"target {target} unreachable: score at accuracy 1 is {score(hi):.4f}")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if score(mid) < target:
            lo = mid
        else:
            hi = mid
    return hi


def calibrate_view_labeller(config, target=0.95, **kw):
    base = dict(config.view_labeller)

    def score(acc):
        return single_frame_view_miou(config, CorruptionParams(**{**base, "base_accuracy": acc}), **kw)

    return _bisect_accuracy(score, target)


def calibrate_map_labeller(config, target=0.93, **kw):
    base = dict(config.map_labeller)

    def score(acc):
        return single_pass_map_miou(config, CorruptionParams(**{**base, "base_accuracy": acc}), **kw)

    return _bisect_accuracy(score, target)
