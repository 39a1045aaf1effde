"""Per-pixel semantic labellers emitting class distributions.

Two families stand in for trained segmentation networks:

* oracle-corruption labellers degrade ground-truth labels with errors that
  depend on input corruption and on proximity to class boundaries;
* a multinomial logistic model over local height/depth features, trained by
  mini-batch gradient descent.

Both obey the same locality contract: the output at a pixel depends only on
inputs within Chebyshev distance ``radius`` of it, and randomness is keyed by
global pixel index, so a labeller run on a crop reproduces the full-image
result away from the crop border.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter

from .rng import keyed_uniform


class LabellerError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


def off_diagonal_confusion(num_classes):
    """Row-stochastic matrix sending an error uniformly to the other classes."""
    m = np.full((num_classes, num_classes), 1.0 / (num_classes - 1))
    np.fill_diagonal(m, 0.0)
    return m


@dataclass
class CorruptionParams:
    base_accuracy: float = 0.95
    boundary_band: int = 2
    boundary_boost: float = 0.0
    confusion: list = None
    noise_sensitivity: float = 0.0
    confidence: float = 0.9
    rng_seed: int = 0
    num_classes: int = 4
    # "confusion": band errors use the confusion row; "neighbour": they take the
    # adjacent class; "erode": only pixels of the higher class bleed to the lower
    boundary_mode: str = "confusion"
    degradation_window: int = 1  # odd; >1 uses the local RMS of the degradation map

    def __post_init__(self):
        c = self.num_classes
        if c < 2:
            raise LabellerError("need at least two classes")
        if not (1.0 / c < self.base_accuracy <= 1.0):
            raise LabellerError(
                f"base_accuracy must lie in (1/C, 1], got {self.base_accuracy} for C={c}")
        if self.confusion is None:
            self.confusion = off_diagonal_confusion(c).tolist()
        conf = np.asarray(self.confusion, float)
        if conf.shape != (c, c) or (conf < 0).any() or not np.allclose(conf.sum(1), 1.0, atol=1e-9):
            raise LabellerError("confusion must be a CxC row-stochastic matrix")
        if self.noise_sensitivity < 0 or self.boundary_band < 0:
            raise LabellerError("noise_sensitivity and boundary_band must be non-negative")
        if not (0.0 < self.confidence <= 1.0):
            raise LabellerError("confidence must lie in (0, 1]")
        if self.degradation_window < 1 or self.degradation_window % 2 == 0:
            raise LabellerError("degradation_window must be odd and >= 1")
        if self.boundary_mode not in ("confusion", "neighbour", "erode"):
            raise LabellerError(f"unknown boundary_mode {self.boundary_mode!r}")

    def to_dict(self):
        d = asdict(self)
        d["confusion"] = [list(map(float, row)) for row in np.asarray(self.confusion, float)]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _band_extremes(labels, band):
    """Largest and smallest valid label within Chebyshev distance ``band``."""
    valid = labels >= 0
    size = 2 * band + 1
    hi = maximum_filter(np.where(valid, labels, -1), size=size, mode="nearest")
    lo = minimum_filter(np.where(valid, labels, np.iinfo(np.int32).max).astype(np.int64),
                        size=size, mode="nearest")
    return valid, hi, lo


def local_rms(values, window):
    """RMS over a ``window x window`` neighbourhood with edge padding.

    Fixed-order slice sums keep each output independent of the crop it is in.
    """
    if window == 1:
        return np.abs(values)
    rho = window // 2
    h, w = values.shape
    pad = np.pad(values * values, rho, mode="edge")
    acc = np.zeros((h, w))
    for dy in range(window):
        for dx in range(window):
            acc += pad[dy:dy + h, dx:dx + w]
    return np.sqrt(acc / (window * window))


def boundary_mask(labels, band):
    """Valid pixels within Chebyshev distance ``band`` of a differently labelled valid pixel."""
    labels = np.asarray(labels)
    if band <= 0:
        return np.zeros(labels.shape, bool)
    valid, hi, lo = _band_extremes(labels, band)
    return valid & (hi != lo)


def corrupt_label(gt_labels, degradation, params, stream=0, index=None):
    """Sample a per-pixel class distribution image from ground truth.

    Error probability per pixel is ``1 - base_accuracy + noise_sensitivity *
    degradation`` (degradation taken as a local RMS when
    ``degradation_window > 1``) plus ``boundary_boost`` inside the boundary band, clamped to
    ``[0, 1 - 1/C]``. NaN degradation (no usable input) takes the clamp maximum.
    An erroneous pixel takes a class drawn from the confusion row of its true
    class. Inside the band, ``boundary_mode="neighbour"`` sends errors to the
    other class present there, and ``"erode"`` restricts the band to pixels of
    the higher class and sends them to the lower one. ``confidence`` mass goes on the chosen class, the rest is spread
    evenly. ``index`` gives global pixel ids for the random draws.
    """
    gt = np.asarray(gt_labels)
    deg = np.asarray(degradation, float)
    if deg.shape != gt.shape:
        raise LabellerError(f"degradation shape {deg.shape} != labels shape {gt.shape}")
    c = params.num_classes
    if index is None:
        index = np.arange(gt.size).reshape(gt.shape)
    index = np.asarray(index)

    max_err = 1.0 - 1.0 / c
    missing = np.isnan(deg)
    if params.degradation_window > 1:
        deg = local_rms(np.where(missing, 0.0, deg), params.degradation_window)
    p_err = (1.0 - params.base_accuracy) + params.noise_sensitivity * np.where(missing, 0.0, deg)
    if params.boundary_band > 0:
        _, hi, lo = _band_extremes(gt, params.boundary_band)
        band = (gt >= 0) & (hi != lo)
        if params.boundary_mode == "erode":
            band &= gt != lo
    else:
        band = np.zeros(gt.shape, bool)
    if params.boundary_boost:
        p_err = p_err + params.boundary_boost * band
    p_err = np.where(missing, max_err, np.clip(p_err, 0.0, max_err))

    valid = gt >= 0
    truth = np.where(valid, gt, 0)
    u_err = keyed_uniform(params.rng_seed, stream, index, draw=0)
    u_cls = keyed_uniform(params.rng_seed, stream, index, draw=1)
    err = valid & (u_err < p_err)

    cum = np.cumsum(np.asarray(params.confusion, float), axis=1)
    cum[:, -1] = np.inf
    chosen = truth.copy()
    if err.any():
        rows = cum[truth[err]]
        chosen[err] = np.argmax(u_cls[err][:, None] < rows, axis=1)
        if params.boundary_mode != "confusion" and params.boundary_band > 0:
            bleed = err & band
            chosen[bleed] = np.where(hi[bleed] != truth[bleed], hi[bleed], lo[bleed])

    kappa = params.confidence
    rest = (1.0 - kappa) / (c - 1)
    probs = np.full(gt.shape + (c,), rest)
    np.put_along_axis(probs, chosen[..., None], kappa, axis=-1)
    probs[~valid] = 1.0 / c
    return probs


class OracleViewLabeller:
    """Corrupts the rendered label image; degradation is the per-pixel depth error."""

    def __init__(self, params):
        self.params = params
        self.radius = max(params.boundary_band, params.degradation_window // 2)

    def label_view(self, frame, depth, frame_index, pose=None):
        degradation = np.where(frame.depth > 0, np.abs(depth - frame.depth), 0.0)
        return corrupt_label(frame.labels, degradation, self.params, stream=frame_index + 1)


class OracleMapLabeller:
    """Corrupts ground-truth map labels; degradation is the reconstruction error.

    Inputs are height crops with NaN where the map is unobserved. Degradation
    is measured against ``reference_heights``, the clean-input reconstruction
    (NaN where that is unobserved). Random draws are keyed by global map
    pixel, so the same input always yields the same labels, as a
    deterministic network would.
    """

    def __init__(self, gt_labels, reference_heights, params):
        self.gt_labels = np.asarray(gt_labels)
        self.reference = np.asarray(reference_heights, float)
        if self.reference.shape != self.gt_labels.shape:
            raise LabellerError("reference heights and labels differ in shape")
        self.params = params
        self.radius = max(params.boundary_band, params.degradation_window // 2)

    def predict(self, image, origin=(0, 0)):
        r0, c0 = origin
        h, w = image.shape
        gt = self.gt_labels[r0:r0 + h, c0:c0 + w]
        degradation = np.abs(image - self.reference[r0:r0 + h, c0:c0 + w])
        rows, cols = np.mgrid[r0:r0 + h, c0:c0 + w]
        index = rows * self.gt_labels.shape[1] + cols
        return corrupt_label(gt, degradation, self.params, stream=0, index=index)


# ---------------------------------------------------------------- logistic model

FEATURE_NAMES = ("value", "gradient", "variance")


def local_features(image, window, fill=0.0):
    """Per-pixel features ``(value, gradient magnitude, k x k variance)``.

    Sums run over shifted slices in a fixed order, so each output pixel is
    computed from the same operands in the same order whatever crop it sits in.
    """
    if window < 3 or window % 2 == 0:
        raise LabellerError(f"feature window must be odd and >= 3, got {window}")
    img = np.where(np.isnan(image), fill, image).astype(float)
    rho = window // 2
    h, w = img.shape
    pad = np.pad(img, rho, mode="edge")
    s1 = np.zeros_like(img)
    s2 = np.zeros_like(img)
    for dy in range(window):
        for dx in range(window):
            patch = pad[dy:dy + h, dx:dx + w]
            s1 += patch
            s2 += patch * patch
    n = float(window * window)
    mean = s1 / n
    var = np.maximum(s2 / n - mean * mean, 0.0)
    gx = (pad[rho:rho + h, rho + 1:rho + 1 + w] - pad[rho:rho + h, rho - 1:rho - 1 + w]) * 0.5
    gy = (pad[rho + 1:rho + 1 + h, rho:rho + w] - pad[rho - 1:rho - 1 + h, rho:rho + w]) * 0.5
    grad = np.sqrt(gx * gx + gy * gy)
    return np.stack([img, grad, var], axis=-1)


@dataclass
class TrainingParams:
    learning_rate: float = 0.5
    epochs: int = 30
    batch_size: int = 256
    rng_seed: int = 0


@dataclass
class LogisticLabeller:
    weights: np.ndarray  # (num_features + 1, C); last row is the bias
    feature_mean: np.ndarray
    feature_std: np.ndarray
    window: int = 5
    fill: float = 0.0
    hyperparams: TrainingParams = field(default_factory=TrainingParams)

    @property
    def radius(self):
        return self.window // 2

    @property
    def num_classes(self):
        return self.weights.shape[1]

    def design(self, feats):
        """Standardised features with a trailing bias column, shape (..., F + 1)."""
        z = (feats - self.feature_mean) / self.feature_std
        return np.concatenate([z, np.ones(z.shape[:-1] + (1,))], axis=-1)

    def predict(self, image, origin=(0, 0)):
        x = self.design(local_features(np.asarray(image, float), self.window, self.fill))
        scores = np.zeros(x.shape[:-1] + (self.num_classes,))
        # explicit accumulation keeps results independent of array size
        for f in range(x.shape[-1]):
            scores += x[..., f:f + 1] * self.weights[f]
        return softmax(scores)

    def to_json(self):
        return json.dumps({
            "window": self.window, "fill": self.fill,
            "feature_mean": self.feature_mean.tolist(), "feature_std": self.feature_std.tolist(),
            "hyperparams": asdict(self.hyperparams),
        }, indent=2, sort_keys=True) + "\n"

    def save(self, json_path, csv_path):
        with open(json_path, "w") as fh:
            fh.write(self.to_json())
        np.savetxt(csv_path, self.weights, delimiter=",", fmt="%.17g",
                   header=",".join(f"class_{c}" for c in range(self.num_classes)))

    @classmethod
    def load(cls, json_path, csv_path):
        with open(json_path) as fh:
            meta = json.load(fh)
        weights = np.loadtxt(csv_path, delimiter=",", ndmin=2)
        return cls(weights, np.array(meta["feature_mean"]), np.array(meta["feature_std"]),
                   meta["window"], meta["fill"], TrainingParams(**meta["hyperparams"]))


def softmax(scores):
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(weights, x, y):
    """Mean multinomial cross-entropy and its gradient with respect to ``weights``."""
    scores = x @ weights
    scores -= scores.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(scores).sum(axis=1))
    n = x.shape[0]
    loss = float(np.mean(log_z - scores[np.arange(n), y]))
    p = np.exp(scores - log_z[:, None])
    p[np.arange(n), y] -= 1.0
    return loss, x.T @ p / n


def train_logistic(features, labels, num_classes, hyperparams=None, window=5, fill=0.0):
    """Fit a logistic labeller on raw per-pixel features; returns ``(model, final_loss)``."""
    hp = hyperparams or TrainingParams()
    feats = np.asarray(features, float).reshape(-1, len(FEATURE_NAMES))
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if not np.isfinite(feats).all():
        raise LabellerError("training features must be finite")
    counts = np.bincount(y, minlength=num_classes)
    if (counts[:num_classes] == 0).any() or y.max() >= num_classes:
        raise LabellerError(f"need at least one sample per class, got counts {counts.tolist()}")
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std[std == 0] = 1.0
    model = LogisticLabeller(np.zeros((feats.shape[1] + 1, num_classes)), mean, std,
                             window, fill, hp)
    x = model.design(feats)
    rng = np.random.default_rng(hp.rng_seed)
    w = model.weights
    for _ in range(hp.epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), hp.batch_size):
            batch = order[start:start + hp.batch_size]
            loss, grad = cross_entropy(w, x[batch], y[batch])
            if not np.isfinite(loss):
                raise TrainingDivergedError("non-finite training loss; lower the learning rate")
            w -= hp.learning_rate * grad
    final_loss, _ = cross_entropy(w, x, y)
    if not np.isfinite(final_loss) or not np.isfinite(w).all():
        raise TrainingDivergedError("non-finite training loss; lower the learning rate")
    model.weights = w
    return model, final_loss


class LogisticViewLabeller:
    """Applies a logistic labeller to the height image derived from a depth frame."""

    def __init__(self, model, intrinsics):
        from .render import pixel_rays

        self.model = model
        self.radius = model.radius
        self._rays = pixel_rays(intrinsics)

    def height_image(self, depth, pose):
        cam = self._rays * depth[..., None]
        z = cam @ pose.rotation[2] + pose.translation[2]
        return np.where(depth > 0, z, np.nan)

    def label_view(self, frame, depth, frame_index, pose=None):
        return self.model.predict(self.height_image(depth, pose if pose is not None else frame.pose))
