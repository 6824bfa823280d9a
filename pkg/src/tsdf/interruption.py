"""Stage one: a universal perturbation that scrambles extractor features.

The perturbation ``W`` is pushed uphill on

    L_feature = lam * L_enh + L_MSE

where ``L_MSE`` compares perturbed and clean features of every extractor
and ``L_enh`` compares an *enhanced* perturbed feature against the clean
one.  The enhancement adds local, global and structural feature
discrepancies scaled by an exponential amplifier.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numerics import NonFiniteError, Tensor, as_tensor, no_grad, project_linf
from .numerics import ops
from .rng import make_rng

__all__ = [
    "InterruptionConfig",
    "Discrepancies",
    "CraftingError",
    "normalize",
    "attention",
    "compute_discrepancies",
    "adaptive_weights",
    "enhance_features",
    "interruption_loss",
    "ascent_direction",
    "craft_interruption",
]

SPATIAL = (-2, -1)


class CraftingError(FloatingPointError):
    """The objective became non-finite during optimisation."""

    def __init__(self, stage: str, iteration: int):
        self.stage = stage
        self.iteration = iteration
        super().__init__(f"{stage}: non-finite objective at iteration {iteration}")


@dataclass
class InterruptionConfig:
    epsilon: float = 0.05
    gamma: float = 0.001
    lam: float = 0.1
    alpha: float = 1.0
    sigma: float = 1.0
    z: float = 0.1
    weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    iterations: int = 50
    batch_size: int | None = 32  # None: the whole training set each step
    seed: int = 0
    step_rule: str = "pixel_rms"
    enhance: bool = True

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if len(self.weights) != 3 or min(self.weights) < 0:
            raise ValueError(f"weights must be three non-negative numbers, got {self.weights}")
        if self.sigma <= 0 or self.z <= 0:
            raise ValueError("sigma and z must be positive")
        if self.step_rule not in _STEP_RULES:
            raise ValueError(f"step_rule must be one of {sorted(_STEP_RULES)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        return d


@dataclass
class Discrepancies:
    local: Tensor  # feature-shaped
    global_: Tensor  # per channel, (..., C, 1, 1)
    structural: Tensor  # feature-shaped

    def components(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.local, self.global_, self.structural


def normalize(f, z: float) -> Tensor:
    """Per-channel standardisation over spatial positions."""
    f = as_tensor(f)
    mu = ops.mean(f, SPATIAL, keepdims=True)
    sd = ops.std(f, SPATIAL, keepdims=True)
    return (f - mu) / (sd + z)


def attention(f) -> Tensor:
    """Weight ``f`` by a spatial softmax of its channel-mean map."""
    f = as_tensor(f)
    amap = ops.spatial_softmax(ops.mean(f, -3, keepdims=True))
    return f * amap


def compute_discrepancies(feat_pert, feat_clean, z: float) -> Discrepancies:
    feat_pert, feat_clean = as_tensor(feat_pert), as_tensor(feat_clean)
    if feat_pert.shape != feat_clean.shape:
        raise ops.ShapeError("compute_discrepancies", feat_pert.shape, feat_clean.shape)
    if not z > 0:
        raise ValueError(f"z must be positive, got {z}")
    np_, nc = normalize(feat_pert, z), normalize(feat_clean, z)
    local = np_ - nc
    mu_gap = ops.mean(feat_pert, SPATIAL, keepdims=True) - ops.mean(feat_clean, SPATIAL, keepdims=True)
    global_ = mu_gap / (ops.std(feat_clean, SPATIAL, keepdims=True) + z)
    structural = attention(np_) - attention(nc)
    return Discrepancies(local, global_, structural)


def adaptive_weights(delta: Discrepancies) -> Tensor:
    """Per-channel gate ``sigmoid(mean |delta|)`` over components and positions."""
    u_local = ops.mean(ops.abs_(delta.local), SPATIAL, keepdims=True)
    u_global = ops.abs_(delta.global_)
    u_struct = ops.mean(ops.abs_(delta.structural), SPATIAL, keepdims=True)
    return ops.sigmoid((u_local + u_global + u_struct) / 3.0)


def enhance_features(feat_pert, delta: Discrepancies, weights, cfg: InterruptionConfig) -> Tensor:
    """``feat_pert + alpha * exp(||weights * delta|| / sigma) * sum_k w_k delta_k``.

    The norm is taken per sample over all three components; the exponent
    is clamped at 30.
    """
    feat_pert = as_tensor(feat_pert)
    weights = as_tensor(weights)
    sample_axes = tuple(range(-3, 0)) if feat_pert.ndim >= 3 else None
    sq = None
    for comp in delta.components():
        wc = weights * comp
        part = ops.sum_(wc * wc, sample_axes, keepdims=True)
        sq = part if sq is None else sq + part
    amp = ops.exp(ops.clamp(ops.sqrt(sq) / cfg.sigma, -np.inf, 30.0))
    w1, w2, w3 = cfg.weights
    mix = delta.local * w1 + delta.global_ * w2 + delta.structural * w3
    return feat_pert + amp * mix * cfg.alpha


def interruption_loss(x, W, extractors: Sequence, cfg: InterruptionConfig) -> Tensor:
    """``lam * L_enh + L_MSE``, each a sum over extractors of batch-mean MSEs."""
    if not extractors:
        raise ValueError("interruption_loss: no extractors")
    x = as_tensor(x)
    x_hat = ops.clamp(x + W, 0.0, 1.0)
    l_mse = None
    l_enh = None
    for ext in extractors:
        with no_grad():
            f_clean = ext(x)
        f_pert = ext(x_hat)
        term = ops.squared_error(f_pert, f_clean)
        l_mse = term if l_mse is None else l_mse + term
        if cfg.enhance and cfg.lam != 0:
            delta = compute_discrepancies(f_pert, f_clean, cfg.z)
            f_enh = enhance_features(f_pert, delta, adaptive_weights(delta), cfg)
            e = ops.squared_error(f_enh, f_clean)
            l_enh = e if l_enh is None else l_enh + e
    if l_enh is None:
        return l_mse
    return l_enh * cfg.lam + l_mse


def _normalized(g: np.ndarray) -> np.ndarray:
    m = np.abs(g).max()
    return g / m if m > 0 else g


def _rms(g: np.ndarray) -> np.ndarray:
    # scale by the max first so squaring cannot overflow
    g = _normalized(g.astype(np.float64))
    r = np.sqrt(np.mean(g * g))
    return g / r if r > 0 else g


def _pixel_rms(g: np.ndarray) -> np.ndarray:
    # unit RMS length of the per-pixel colour vector
    return _rms(g) / np.sqrt(g.shape[-3] if g.ndim >= 3 else 1)


_STEP_RULES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "pixel_rms": _pixel_rms,
    "rms": _rms,
    "normalized": _normalized,
    "sign": np.sign,
    "raw": lambda g: g,
}


def ascent_direction(grad: np.ndarray, rule: str) -> np.ndarray:
    """Scale a raw gradient into a step direction.

    ``"pixel_rms"`` rescales so the per-pixel colour displacement has unit
    root-mean-square length; a step of ``gamma`` then moves an average
    pixel by ``gamma`` in RGB space whatever the loss scale.  ``"rms"``
    does the same per element; ``"normalized"`` divides by the largest magnitude instead;
    ``"sign"`` is the usual steepest L-infinity direction; ``"raw"``
    leaves the gradient alone.
    """
    try:
        fn = _STEP_RULES[rule]
    except KeyError:
        raise ValueError(f"unknown step rule {rule!r}; expected one of {sorted(_STEP_RULES)}") from None
    return fn(grad).astype(grad.dtype, copy=False)


def _batches(n: int, batch_size: int | None, iterations: int):
    if batch_size is None or batch_size >= n:
        for _ in range(iterations):
            yield slice(None)
        return
    start = 0
    for _ in range(iterations):
        idx = np.arange(start, start + batch_size) % n
        start = (start + batch_size) % n
        yield idx


def craft_interruption(train_images, extractors: Sequence, cfg: InterruptionConfig, callback=None) -> Tensor:
    """Projected gradient ascent for one universal perturbation.

    ``callback(t, W, loss)`` is invoked after every projected update, with
    the loss measured before that update.
    """
    images = np.asarray(getattr(train_images, "data", train_images), dtype=np.float32)
    if cfg.iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = make_rng(cfg.seed, 1)
    eps = cfg.epsilon
    W = Tensor(rng.uniform(-eps / 10, eps / 10, images.shape[1:]))
    for t, idx in enumerate(_batches(len(images), cfg.batch_size, cfg.iterations)):
        leaf = Tensor(W.data, requires_grad=True)
        try:
            loss = interruption_loss(images[idx], leaf, extractors, cfg)
            loss.backward()
        except NonFiniteError:
            raise CraftingError("interruption", t) from None
        if not np.isfinite(loss.item()):
            raise CraftingError("interruption", t)
        step = ascent_direction(leaf.grad, cfg.step_rule)
        W = project_linf(W.data + np.float32(cfg.gamma) * step, eps)
        if callback is not None:
            callback(t, W, loss.item())
    return W
