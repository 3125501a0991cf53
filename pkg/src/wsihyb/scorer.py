"""Reference models: a per-pixel logistic patch scorer and a pooled-feature patch classifier.

Both are generalized-linear over a fixed hand-built feature set, so losses and
gradients are exact and training runs in seconds on a CPU.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .tissue import luma

log = logging.getLogger(__name__)

FEATURE_SPEC_VERSION = 1
PIXEL_FEATURES = ("red", "green", "blue", "window_mean", "window_var", "grad_mag", "bias")
N_PIXEL_FEATURES = len(PIXEL_FEATURES)
POOLS = ("mean", "var", "max")
N_POOLED_FEATURES = N_PIXEL_FEATURES * len(POOLS)
WINDOW = 9
EPS = 1e-7

# Per-feature centring and scaling applied inside the linear predictor,
# z = sum_i w_i * scale_i * (f_i - center_i). Trainers fit them to the training
# features (mean, 1/std) so plain SGD converges at one learning rate whatever the
# texture statistics; these constants are only the defaults of an untrained model.
# Bias features keep center 0 and scale 1 so each model retains an intercept.
PIXEL_CENTER = np.array([0.8, 0.6, 0.8, 0.7, 0.005, 0.05, 0.0])
PIXEL_SCALE = np.array([10.0, 10.0, 10.0, 10.0, 200.0, 25.0, 1.0])
POOLED_CENTER = np.array([
    0.9, 0.0028, 1.0, 0.77, 0.013, 0.97, 0.86, 0.0055, 1.0, 0.82, 0.0067, 0.93,
    0.0013, 3e-06, 0.017, 0.027, 0.00045, 0.24, 0.0, 0.0, 0.0])
POOLED_SCALE = np.array([
    33.0, 600.0, 1.0, 10.0, 130.0, 22.0, 17.0, 350.0, 150.0, 14.0, 230.0, 18.0,
    1400.0, 310000.0, 120.0, 110.0, 4000.0, 19.0, 1.0, 1.0, 1.0])
PIXEL_BIAS = (N_PIXEL_FEATURES - 1,)
POOLED_BIAS = tuple(range(N_POOLED_FEATURES - 3, N_POOLED_FEATURES))

_CKPT_MAGIC = b"WSIC"
_CKPT_VERSION = 2
_CKPT_HEAD = struct.Struct("<4sHHBI")
_KINDS = {"patch_scorer": 1, "slide_classifier": 2}


class FeatureSpecError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


def _window_sums(plane, half):
    """Sum over (2*half+1)^2 windows with edge replication; int32 separable cumsums."""
    padded = np.pad(plane, half, mode="edge").astype(np.int32)
    n = 2 * half + 1
    c = np.cumsum(padded, axis=0, dtype=np.int32)
    rows = c[n - 1:].copy()
    rows[1:] -= c[:-n]
    c = np.cumsum(rows, axis=1, dtype=np.int32)
    out = c[:, n - 1:].copy()
    out[:, 1:] -= c[:, :-n]
    return out


def window_stats(gray):
    """Integer window sum and sum of squares of an integer luma plane."""
    return _window_sums(gray, WINDOW // 2), _window_sums(gray * gray, WINDOW // 2)


def gradient_squares(gray):
    """(2*gx)^2 + (2*gy)^2 from central differences with replicated edges."""
    q = np.pad(gray, 1, mode="edge")
    dx = q[1:-1, 2:] - q[1:-1, :-2]
    dy = q[2:, 1:-1] - q[:-2, 1:-1]
    return dx * dx + dy * dy


def features_from_parts(rgb, window_sum, window_sq, grad_sq):
    n = WINDOW * WINDOW
    planes = np.empty((N_PIXEL_FEATURES,) + rgb.shape[:2], np.float64)
    for c in range(3):
        planes[c] = rgb[..., c] / 255.0
    planes[3] = window_sum / (n * 255.0)
    planes[4] = (n * window_sq.astype(np.int64) - window_sum.astype(np.int64) ** 2) / (n * n * 255.0 ** 2)
    planes[5] = np.sqrt(grad_sq) / (2 * 255.0)
    planes[6] = 1.0
    return planes


def patch_features(pixels):
    """(7, H, W) planes: RGB/255, 9x9 luma mean and variance, luma gradient magnitude, bias."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] < 3:
        raise FeatureSpecError("expected an (H, W, 3) uint8 patch")
    rgb = pixels[..., :3]
    gray = luma(rgb)
    s, s2 = window_stats(gray)
    return features_from_parts(rgb, s, s2, gradient_squares(gray))


def effective_weights(params, center, scale):
    """Weights on the raw features equivalent to ``params`` on the standardized ones.

    The bias feature is the last pixel plane (or the mean of it, for pooled
    features), so the centring offsets are folded into that coefficient.
    """
    bias = N_PIXEL_FEATURES - 1 if len(params) == N_PIXEL_FEATURES else N_POOLED_FEATURES - 3
    with np.errstate(over="ignore", invalid="ignore"):
        w = params * scale
        w[bias] -= w @ center
    if not np.all(np.isfinite(w)):
        raise TrainingDiverged(f"parameters {params} overflow on the raw feature scale")
    return w


def param_gradient(raw_grad, center, scale):
    """Chain a gradient w.r.t. effective weights back to the model parameters."""
    bias = N_PIXEL_FEATURES - 1 if len(raw_grad) == N_PIXEL_FEATURES else N_POOLED_FEATURES - 3
    return scale * (raw_grad - center * raw_grad[bias])


def pooled_features(planes):
    """Mean, variance and max of each plane, plane-major."""
    flat = planes.reshape(planes.shape[0], -1)
    out = np.empty((planes.shape[0], len(POOLS)))
    out[:, 0] = flat.mean(axis=1)
    out[:, 1] = flat.var(axis=1)
    out[:, 2] = flat.max(axis=1)
    return out.ravel()


class LinearModel:
    kind = ""
    n_features = 0
    default_center = default_scale = None
    bias_features = ()

    def __init__(self, params=None, feature_spec=FEATURE_SPEC_VERSION, center=None, scale=None):
        if feature_spec != FEATURE_SPEC_VERSION:
            raise FeatureSpecError(f"feature spec {feature_spec} != {FEATURE_SPEC_VERSION}")
        if params is None:
            params = np.zeros(self.n_features)
        params = np.array(params, np.float64)
        if params.shape != (self.n_features,):
            raise FeatureSpecError(f"{self.kind} needs {self.n_features} parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise ValueError("non-finite parameters")
        self.params = params
        self.feature_spec = feature_spec
        self.center = np.array(self.default_center if center is None else center, np.float64)
        self.scale = np.array(self.default_scale if scale is None else scale, np.float64)
        if self.center.shape != params.shape or self.scale.shape != params.shape:
            raise FeatureSpecError("center and scale must match the parameter count")
        if not (np.all(np.isfinite(self.center)) and np.all(np.isfinite(self.scale)) and np.all(self.scale > 0)):
            raise ValueError("center must be finite and scale finite and positive")

    def copy(self):
        return type(self)(self.params.copy(), self.feature_spec, self.center, self.scale)

    def with_scaling(self, rows):
        """Copy whose centring and scaling are the mean and 1/std of ``rows`` (n, n_features)."""
        rows = np.asarray(rows, np.float64)
        return self._scaled(rows.mean(axis=0), rows.std(axis=0))

    def _scaled(self, center, std):
        center = np.array(center, np.float64)
        scale = 1.0 / np.where(std > 1e-12, std, 1.0)
        for i in self.bias_features:
            center[i], scale[i] = 0.0, 1.0
        return type(self)(self.params.copy(), self.feature_spec, center, scale)

    def __eq__(self, other):
        return (type(self) is type(other) and np.array_equal(self.params, other.params)
                and np.array_equal(self.center, other.center) and np.array_equal(self.scale, other.scale))

    def effective(self):
        return effective_weights(self.params, self.center, self.scale)

    def __repr__(self):
        return f"{type(self).__name__}({np.array2string(self.params, precision=4)})"

    def to_bytes(self):
        head = _CKPT_HEAD.pack(_CKPT_MAGIC, _CKPT_VERSION, self.feature_spec, _KINDS[self.kind],
                               self.params.size)
        body = head + np.concatenate([self.params, self.center, self.scale]).astype("<f8").tobytes()
        return body + struct.pack("<I", zlib.crc32(body))

    def checksum(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())
        return self.checksum()


class PatchScorer(LinearModel):
    kind = "patch_scorer"
    n_features = N_PIXEL_FEATURES
    default_center, default_scale = PIXEL_CENTER, PIXEL_SCALE
    bias_features = PIXEL_BIAS

    def with_scaling(self, planes):
        """Scaling fitted to every pixel of ``planes``, a (7, h, w) array or a list of them."""
        if isinstance(planes, np.ndarray):
            planes = [planes]
        n, total, squares = 0, np.zeros(self.n_features), np.zeros(self.n_features)
        for p in planes:
            flat = p.reshape(p.shape[0], -1)
            n += flat.shape[1]
            total += flat.sum(axis=1)
            squares += np.einsum("ij,ij->i", flat, flat)
        mean = total / n
        return self._scaled(mean, np.sqrt(np.maximum(squares / n - mean * mean, 0.0)))

    def logits(self, planes):
        if planes.shape[0] != self.n_features:
            raise FeatureSpecError(f"expected {self.n_features} feature planes, got {planes.shape[0]}")
        return np.tensordot(self.effective(), planes, axes=1)


class SlideClassifier(LinearModel):
    kind = "slide_classifier"
    n_features = N_POOLED_FEATURES
    default_center, default_scale = POOLED_CENTER, POOLED_SCALE
    bias_features = POOLED_BIAS

    def logits(self, pooled):
        pooled = np.asarray(pooled, np.float64)
        if pooled.shape[-1] != self.n_features:
            raise FeatureSpecError(f"expected {self.n_features} pooled features, got {pooled.shape[-1]}")
        return pooled @ self.effective()


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEAD.size + 4:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, spec, kind, count = _CKPT_HEAD.unpack_from(data)
    if magic != _CKPT_MAGIC or version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r}, version {version})")
    if len(data) != _CKPT_HEAD.size + 3 * 8 * count + 4:
        raise CheckpointError(f"{path}: parameter count {count} does not match file size")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    values = np.frombuffer(data, "<f8", 3 * count, _CKPT_HEAD.size)
    cls = {1: PatchScorer, 2: SlideClassifier}.get(kind)
    if cls is None:
        raise CheckpointError(f"{path}: unknown model kind {kind}")
    try:
        return cls(values[:count], spec, values[count:2 * count], values[2 * count:])
    except FeatureSpecError:
        raise
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


def predict_pixel_probs(scorer, pixels=None, planes=None):
    if planes is None:
        planes = patch_features(pixels)
    return expit(scorer.logits(planes))


def classify_patch(classifier, pixels=None, pooled=None):
    if pooled is None:
        pooled = pooled_features(patch_features(pixels))
    return float(expit(classifier.logits(pooled)))


def soft_ce_loss(pred, target):
    """Mean soft-label cross entropy and its derivative w.r.t. the logits.

    ``pred`` is clamped to [EPS, 1-EPS]; where the clamp is active the
    derivative is zero.
    """
    pred = np.asarray(pred, np.float64)
    target = np.asarray(target, np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    p = np.clip(pred, EPS, 1 - EPS)
    loss = -np.mean(target * np.log(p) + (1 - target) * np.log1p(-p))
    dlogit = np.where(p == pred, pred - target, 0.0) / pred.size
    return float(loss), dlogit


def image_bce_loss(pred, label):
    """Mean binary cross entropy over slides and its derivative w.r.t. the predicted probability."""
    pred = np.atleast_1d(np.asarray(pred, np.float64))
    label = np.atleast_1d(np.asarray(label, np.float64))
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs label {label.shape}")
    p = np.clip(pred, EPS, 1 - EPS)
    loss = -np.mean(label * np.log(p) + (1 - label) * np.log1p(-p))
    dpred = np.where(p == pred, -label / p + (1 - label) / (1 - p), 0.0) / pred.size
    return float(loss), dpred


def scorer_loss_and_grad(params, planes_list, targets, center=PIXEL_CENTER, scale=PIXEL_SCALE):
    """Soft CE over all pixels of a batch of patches, gradient w.r.t. scorer parameters."""
    n_total = sum(t.size for t in targets)
    w = effective_weights(params, center, scale)
    loss = 0.0
    grad = np.zeros_like(params)
    for planes, target in zip(planes_list, targets):
        z = np.tensordot(w, planes, axes=1)
        patch_loss, dlogit = soft_ce_loss(expit(z), target)
        weight = target.size / n_total
        loss += patch_loss * weight
        grad += planes.reshape(planes.shape[0], -1) @ dlogit.ravel() * weight
    return loss, param_gradient(grad, center, scale)


def slide_loss_and_grad(params, topk_pooled, labels, center=POOLED_CENTER, scale=POOLED_SCALE):
    """BCE of mean-of-top-K patch probabilities, gradient w.r.t. classifier parameters.

    ``topk_pooled`` is a sequence of (k_i, 21) arrays, one per slide.
    """
    w = effective_weights(params, center, scale)
    probs = [expit(np.asarray(g) @ w) for g in topk_pooled]
    conf = np.array([p.mean() for p in probs])
    loss, dconf = image_bce_loss(conf, labels)
    grad = np.zeros_like(params)
    for g, p, d in zip(topk_pooled, probs, dconf):
        grad += d * ((p * (1 - p)) @ np.asarray(g)) / len(p)
    return loss, param_gradient(grad, center, scale)


@dataclass
class SGDConfig:
    lr: float = 0.05
    batch_size: int = 10
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"invalid SGD config {self}")


def train(model, batches, loss_and_grad, config, rng=None):
    """Plain fixed-step SGD.

    ``batches(epoch, rng)`` yields the epoch's (inputs, targets) batches;
    ``loss_and_grad(params, batch)`` returns (loss, gradient). Returns the updated model copy and the
    per-epoch mean loss, each batch's loss taken before its update.
    """
    model = model.copy()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    trace = []
    for epoch in range(config.epochs):
        total, weight = 0.0, 0
        for step, batch in enumerate(batches(epoch, rng)):
            loss, grad = loss_and_grad(model.params, batch)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch} step {step}; params {model.params}")
            n = len(batch[1])
            total += loss * n
            weight += n
            with np.errstate(over="ignore", invalid="ignore"):
                model.params = model.params - config.lr * grad
            if not np.all(np.isfinite(model.params)):
                raise TrainingDiverged(f"non-finite parameters after epoch {epoch} step {step}")
        if weight == 0:
            raise ValueError(f"epoch {epoch} produced no batches")
        trace.append(total / weight)
        log.debug("%s epoch %d loss %.6f", model.kind, epoch, trace[-1])
    return model, trace
