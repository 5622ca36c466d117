"""
Test-time training of a per-pixel head on OT-guided pseudo-labels.

The head is a three-layer perceptron D -> 32 -> 16 -> 1 with exact GELU
activations. The 16-dim second hidden layer, L2-normalized, is the pixel
embedding used by the contrastive term; the last layer gives the logit.
Training minimizes L_OT + lambda * L_contrastive with Adam and analytic
gradients, one full image per step. Either term can be trained alone; a head
trained on the contrastive term only is binarized by nearest class centroid
in embedding space.
"""
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union
import logging
import math

import numpy as np
from scipy import ndimage
from scipy.special import erf, expit

from . import config
from .exceptions import NumericError, StructuralError, ValidationError
from .grid_io import BinaryMask, ScoreGrid, load_features

logger = logging.getLogger('ttt')

BLUR_RADII = (1, 2, 4)
PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")
LOSS_MODES = ("both", "ot", "contrastive")
NORM_FLOOR = 1e-12


# --- Features ---

@dataclass(frozen=True)
class PixelFeatures:
    """(H, W, D) per-pixel features and where they came from."""
    values: np.ndarray
    provenance: str = "builtin"

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[2] < 1:
            raise StructuralError(f"Features must have shape (H, W, D) with D >= 1, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("Features contain non-finite values")
        if self.provenance not in ("builtin", "external-file"):
            raise ValidationError(f"Unknown feature provenance '{self.provenance}'")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape[:2]

    @property
    def depth(self) -> int:
        return self.values.shape[2]

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1, self.depth)


def build_features(grid: ScoreGrid, external: Optional[Union[str, Path]] = None) -> PixelFeatures:
    """Per-pixel features of a score grid.

    Builtin features are 6 channels: A, the box means of A over windows of
    radius 1, 2 and 4 (edges replicated), then row / H and col / W. An
    external raw-f32 feature file is passed through unchanged.
    """
    if external is not None:
        return PixelFeatures(load_features(external, grid.height, grid.width), "external-file")
    values = grid.values
    channels = [values]
    channels += [ndimage.uniform_filter(values, size=2 * r + 1, mode="nearest") for r in BLUR_RADII]
    rows, cols = np.mgrid[0:grid.height, 0:grid.width].astype(np.float64)
    channels += [rows / grid.height, cols / grid.width]
    return PixelFeatures(np.stack(channels, axis=2), "builtin")


# --- Head ---

@dataclass(frozen=True)
class TTTConfig:
    """Test-time training settings."""
    lam: float = config.DEFAULT_LAMBDA
    margin: float = config.DEFAULT_MARGIN
    epochs: int = config.DEFAULT_EPOCHS
    steps_per_epoch: int = config.DEFAULT_STEPS_PER_EPOCH
    lr: float = config.DEFAULT_LR
    pairs: int = config.DEFAULT_PAIRS
    hidden: Tuple[int, int] = config.DEFAULT_HIDDEN
    seed: int = config.DEFAULT_SEED
    loss: str = config.DEFAULT_LOSS  # both | ot | contrastive

    def validate(self) -> None:
        if self.loss not in LOSS_MODES:
            raise ValidationError(f"loss must be one of {LOSS_MODES}, got '{self.loss}'")
        if self.loss == "contrastive" and not self.lam > 0:
            raise ValidationError("a contrastive-only loss needs lambda > 0")
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValidationError("epochs and steps_per_epoch must be >= 1")
        if not self.margin > 0:
            raise ValidationError(f"margin must be positive, got {self.margin}")
        if self.lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        if not self.lr > 0:
            raise ValidationError(f"learning rate must be positive, got {self.lr}")
        if self.pairs < 2:
            raise ValidationError(f"pairs must be >= 2, got {self.pairs}")
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ValidationError(f"hidden must be two positive widths, got {self.hidden}")


@dataclass(frozen=True)
class HeadParams:
    """Weights of the head plus the fixed input standardization."""
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    feature_mean: np.ndarray
    feature_scale: np.ndarray

    def trainable(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_trainable(self, arrays: Dict[str, np.ndarray]) -> "HeadParams":
        return replace(self, **arrays)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.trainable().values())


def init_params(features: PixelFeatures, cfg: TTTConfig) -> HeadParams:
    """Seeded U(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.

    The standardization statistics are the per-channel mean and standard
    deviation of this sample's features (unit scale for constant channels).
    """
    rng = np.random.default_rng(cfg.seed)
    flat = features.flat()
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    scale = np.where(std > NORM_FLOOR, std, 1.0)

    widths = (features.depth, *cfg.hidden, 1)
    arrays = {}
    for layer, (fan_in, fan_out) in enumerate(zip(widths, widths[1:]), start=1):
        bound = 1.0 / math.sqrt(fan_in)
        arrays[f"w{layer}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        arrays[f"b{layer}"] = rng.uniform(-bound, bound, size=fan_out)
    arrays["w3"] = arrays["w3"][:, 0]
    return HeadParams(feature_mean=mean, feature_scale=scale, **arrays)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


@dataclass
class ForwardCache:
    x: np.ndarray
    a1: np.ndarray
    h1: np.ndarray
    a2: np.ndarray
    h2: np.ndarray
    norm: np.ndarray
    z: np.ndarray
    logit: np.ndarray
    prob: np.ndarray


class TTTHead:
    """Forward and backward passes of the head for one feature grid."""

    def __init__(self, features: PixelFeatures):
        self.features = features
        self.flat = features.flat()

    def forward(self, params: HeadParams) -> ForwardCache:
        x = (self.flat - params.feature_mean) / params.feature_scale
        a1 = x @ params.w1 + params.b1
        h1 = gelu(a1)
        a2 = h1 @ params.w2 + params.b2
        h2 = gelu(a2)
        norm = np.maximum(np.linalg.norm(h2, axis=1), NORM_FLOOR)
        z = h2 / norm[:, None]
        logit = h2 @ params.w3 + params.b3[0]
        return ForwardCache(x, a1, h1, a2, h2, norm, z, logit, expit(logit))

    def backward(self, params: HeadParams, cache: ForwardCache,
                 d_prob: np.ndarray, d_z: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
        """Parameter gradients from loss gradients w.r.t. probabilities and embeddings."""
        d_logit = d_prob * cache.prob * (1.0 - cache.prob)
        d_h2 = d_logit[:, None] * params.w3[None, :]
        if d_z is not None:
            radial = np.sum(cache.z * d_z, axis=1, keepdims=True)
            d_h2 = d_h2 + (d_z - cache.z * radial) / cache.norm[:, None]
        d_a2 = d_h2 * gelu_grad(cache.a2)
        d_h1 = d_a2 @ params.w2.T
        d_a1 = d_h1 * gelu_grad(cache.a1)
        return {
            "w1": cache.x.T @ d_a1,
            "b1": d_a1.sum(axis=0),
            "w2": cache.h1.T @ d_a2,
            "b2": d_a2.sum(axis=0),
            "w3": cache.h2.T @ d_logit,
            "b3": np.array([d_logit.sum()]),
        }


# --- Losses ---

def loss_ot(pred: np.ndarray, pseudo: np.ndarray) -> Tuple[float, np.ndarray]:
    """Root mean squared deviation from the pseudo-labels and its gradient."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(pseudo, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise StructuralError(f"Prediction has {pred.size} pixels, pseudo-label {target.size}")
    diff = pred - target
    loss = math.sqrt(float(np.mean(diff ** 2)))
    if loss == 0.0:
        return 0.0, np.zeros_like(diff)
    return loss, diff / (diff.size * loss)


def sample_pairs(labels: np.ndarray, count: int, rng: np.random.Generator) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Balanced pixel pairs: half same-label, half cross-label.

    Same-label pairs pick a class uniformly, then both pixels from it.
    Returns None when the labels hold a single class.
    """
    labels = np.asarray(labels, dtype=bool).ravel()
    positive = np.flatnonzero(labels)
    negative = np.flatnonzero(~labels)
    if positive.size == 0 or negative.size == 0:
        return None
    same = count // 2
    cross = count - same

    use_positive = rng.random(same) < 0.5
    p_same = np.where(use_positive, rng.choice(positive, same), rng.choice(negative, same))
    q_same = np.where(use_positive, rng.choice(positive, same), rng.choice(negative, same))
    p_cross = rng.choice(positive, cross)
    q_cross = rng.choice(negative, cross)
    return np.concatenate([p_same, p_cross]), np.concatenate([q_same, q_cross])


def loss_contrastive(embeddings: np.ndarray, labels: np.ndarray,
                     pairs: Tuple[np.ndarray, np.ndarray], margin: float) -> Tuple[float, np.ndarray]:
    """Margin contrastive loss over sampled pairs and its embedding gradient.

    Same-label pairs pay ||z_p - z_q||^2, differing pairs pay
    max(0, margin - ||z_p - z_q||)^2; the loss is the mean over pairs.
    """
    labels = np.asarray(labels, dtype=bool).ravel()
    p, q = pairs
    delta = embeddings[p] - embeddings[q]
    dist = np.linalg.norm(delta, axis=1)
    differ = labels[p] != labels[q]
    hinge = np.maximum(0.0, margin - dist)
    per_pair = np.where(differ, hinge ** 2, dist ** 2)
    loss = float(per_pair.mean())

    safe = np.where(dist > 0, dist, 1.0)
    coeff = np.where(differ, np.where(dist > 0, -2.0 * hinge / safe, 0.0), 2.0) / len(p)
    d_delta = coeff[:, None] * delta
    grad = np.zeros_like(embeddings)
    np.add.at(grad, p, d_delta)
    np.add.at(grad, q, -d_delta)
    return loss, grad


def ttt_loss(head: TTTHead, params: HeadParams, pseudo: np.ndarray, lam: float, margin: float,
             pairs: Optional[Tuple[np.ndarray, np.ndarray]],
             use_ot: bool = True) -> Tuple[Dict[str, float], Dict[str, np.ndarray]]:
    """L_OT + lam * L_contrastive with the gradient of every trainable array.

    With use_ot False the L_OT term is left out and reported as 0.
    """
    cache = head.forward(params)
    if use_ot:
        l_ot, d_prob = loss_ot(cache.prob, pseudo)
    else:
        l_ot, d_prob = 0.0, np.zeros_like(cache.prob)
    l_con, d_z = 0.0, None
    if pairs is not None and lam > 0:
        l_con, d_z = loss_contrastive(cache.z, pseudo, pairs, margin)
        d_z = lam * d_z
    grads = head.backward(params, cache, d_prob, d_z)
    return {"total": l_ot + lam * l_con, "ot": l_ot, "contrastive": l_con}, grads


# --- Optimization ---

class AdamOptimizer:
    """Adam with bias-corrected moments over a dict of arrays."""

    def __init__(self, lr: float = config.DEFAULT_LR, betas: Tuple[float, float] = config.ADAM_BETAS,
                 eps: float = config.ADAM_EPS):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, arrays: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        self.step_count += 1
        t = self.step_count
        updated = {}
        for name, value in arrays.items():
            g = grads[name]
            m = self.beta1 * self.m.get(name, np.zeros_like(g)) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, np.zeros_like(g)) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            updated[name] = value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return updated


@dataclass
class AdaptResult:
    """Adapted head, loss trace and, for a contrastive-only loss, class centroids.

    Attributes:
        params: Trained head parameters
        trace: Losses of every step
        contrastive_skipped: The pseudo-label held a single class
        centroids: Mean embedding of pseudo-label foreground and background
            pixels (None for an absent class); set only when the logit was
            not trained
    """
    params: HeadParams
    trace: List[Dict[str, float]] = field(default_factory=list)
    contrastive_skipped: bool = False
    centroids: Optional[Tuple[Optional[np.ndarray], Optional[np.ndarray]]] = None

    @property
    def final_loss(self) -> float:
        return self.trace[-1]["total"] if self.trace else float("nan")


def adapt(features: PixelFeatures, pseudo: BinaryMask, cfg: TTTConfig) -> AdaptResult:
    """Fit the head to one sample's pseudo-labels.

    Args:
        features: Pixel features of the sample
        pseudo: OT pseudo-label mask
        cfg: Training settings; the seed fixes initialization and pair draws

    Returns:
        AdaptResult with the adapted parameters and the per-step loss trace

    Raises:
        NumericError: if the loss becomes NaN or infinite
    """
    cfg.validate()
    if features.shape != pseudo.shape:
        raise StructuralError(f"Features {features.shape} and pseudo-label {pseudo.shape} differ in size")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(features, cfg)
    head = TTTHead(features)
    labels = pseudo.bits.ravel()
    optimizer = AdamOptimizer(cfg.lr)

    use_contrastive = cfg.loss != "ot" and cfg.lam > 0
    skipped = use_contrastive and (labels.all() or not labels.any())
    if skipped:
        logger.warning("Pseudo-label holds a single class; contrastive term skipped")

    result = AdaptResult(params, contrastive_skipped=skipped)
    for epoch in range(cfg.epochs):
        for _ in range(cfg.steps_per_epoch):
            pairs = sample_pairs(labels, cfg.pairs, rng) if use_contrastive and not skipped else None
            losses, grads = ttt_loss(head, params, labels, cfg.lam, cfg.margin, pairs,
                                     use_ot=cfg.loss != "contrastive")
            if not math.isfinite(losses["total"]):
                raise NumericError(
                    f"TTT loss became {losses['total']} at epoch {epoch + 1}; try a smaller learning rate (lr={cfg.lr})"
                )
            result.trace.append(losses)
            params = params.with_trainable(optimizer.step(params.trainable(), grads))
        logger.debug(f"TTT epoch {epoch + 1}/{cfg.epochs}: loss {result.trace[-1]['total']:.6f}")

    if not params.is_finite():
        raise NumericError(f"TTT parameters became non-finite; try a smaller learning rate (lr={cfg.lr})")
    result.params = params
    if cfg.loss == "contrastive":
        result.centroids = embedding_centroids(head.forward(params).z, labels)
    return result


def embedding_centroids(embeddings: np.ndarray,
                        labels: np.ndarray) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    """Mean embedding of the foreground and of the background pixels."""
    labels = np.asarray(labels, dtype=bool).ravel()
    foreground = embeddings[labels].mean(axis=0) if labels.any() else None
    background = embeddings[~labels].mean(axis=0) if not labels.all() else None
    return foreground, background


def predict_proba(features: PixelFeatures, params: HeadParams) -> np.ndarray:
    """(H, W) foreground probabilities of the head."""
    return TTTHead(features).forward(params).prob.reshape(features.shape)


def binarize(features: PixelFeatures, params: HeadParams,
             centroids: Optional[Tuple[Optional[np.ndarray], Optional[np.ndarray]]] = None) -> BinaryMask:
    """Foreground where sigmoid(logit) >= 0.5.

    Given class centroids, a pixel is foreground when its embedding is at
    least as close to the foreground centroid as to the background one; a
    missing centroid makes every pixel the other class.
    """
    if centroids is None:
        return BinaryMask(predict_proba(features, params) >= 0.5)
    foreground, background = centroids
    if foreground is None or background is None:
        return BinaryMask(np.full(features.shape, background is None))
    z = TTTHead(features).forward(params).z
    near_fg = np.linalg.norm(z - foreground, axis=1) <= np.linalg.norm(z - background, axis=1)
    return BinaryMask(near_fg.reshape(features.shape))
