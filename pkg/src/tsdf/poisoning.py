"""Stage two: a masked perturbation that blinds the attacker's face detectors.

``delta`` lives only where the poison mask is nonzero.  It is pushed
*down* on

    J = L_feat + L_output

``L_feat`` pulls the fused detector features of the protected image
toward the negated clean features plus a mask-shaped margin, and
``L_output`` drives every surviving detection's score to zero and its box
toward a degenerate point at its own centre.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .interruption import CraftingError, ascent_direction
from .numerics import NonFiniteError, Tensor, as_tensor, no_grad
from .numerics import ops
from .zoo.detect import candidate_cells
from .zoo.models import Detection

__all__ = [
    "PoisonConfig",
    "FusedFeatures",
    "fuse_detector_features",
    "mask_to_features",
    "poison_feature_loss",
    "poison_output_loss",
    "output_loss_tensor",
    "poison_total_objective",
    "craft_poison",
]


@dataclass
class PoisonConfig:
    epsilon: float = 0.05
    eta: float = 0.005
    nu: float = 1.0
    fusion_weights: tuple[float, ...] | None = None  # None: uniform
    layer_weights: tuple[float, ...] | None = None  # None: uniform
    iterations: int = 20
    beta: float = 5.0
    tau: float = 0.3
    score_threshold: float = 0.1
    box_scale: float = 1.0  # multiplies pixel box coordinates inside the crafting loss
    batch_size: int | None = None
    step_rule: str = "pixel_rms"
    mask_update: str = "update"  # "update": mask the step; "iterate": mask the iterate

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if not self.epsilon > 0 or self.eta < 0:
            raise ValueError("epsilon must be positive and eta non-negative")
        if self.fusion_weights is not None:
            self.fusion_weights = tuple(float(a) for a in self.fusion_weights)
            if min(self.fusion_weights) < 0 or abs(sum(self.fusion_weights) - 1.0) > 1e-6:
                raise ValueError(f"fusion_weights must be non-negative and sum to 1, got {self.fusion_weights}")
        if self.layer_weights is not None:
            self.layer_weights = tuple(float(w) for w in self.layer_weights)
        if self.mask_update not in ("update", "iterate"):
            raise ValueError(f"mask_update must be 'update' or 'iterate', got {self.mask_update!r}")
        ascent_direction(np.zeros(1, np.float32), self.step_rule)

    def alphas(self, n: int) -> tuple[float, ...]:
        if self.fusion_weights is None:
            return (1.0 / n,) * n
        if len(self.fusion_weights) != n:
            raise ValueError(f"{len(self.fusion_weights)} fusion weights for {n} detectors")
        return self.fusion_weights

    def layer_w(self, n: int) -> tuple[float, ...]:
        if self.layer_weights is None:
            return (1.0 / n,) * n
        if len(self.layer_weights) != n:
            raise ValueError(f"{len(self.layer_weights)} layer weights for {n} tap layers")
        return self.layer_weights

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("fusion_weights", "layer_weights"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d


@dataclass
class FusedFeatures:
    layers: list[Tensor]

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i) -> Tensor:
        return self.layers[i]


def fuse_detector_features(image, detectors: Sequence, cfg: PoisonConfig) -> FusedFeatures:
    """Alpha-weighted sum of tapped detector features.

    Each detector's maps are bilinearly resampled to the spatial shape of
    the first detector's.
    """
    if not detectors:
        raise ValueError("fuse_detector_features: no detectors")
    image = as_tensor(image)
    alphas = cfg.alphas(len(detectors))
    per_det = [d.features(image) for d in detectors]
    n_taps = len(per_det[0])
    if any(len(f) != n_taps for f in per_det):
        raise ValueError(f"tap count mismatch across detectors: {[len(f) for f in per_det]}")
    fused = []
    for k in range(n_taps):
        ref = per_det[0][k].shape
        acc = None
        for a, feats in zip(alphas, per_det):
            f = feats[k]
            if f.shape[:-2] != ref[:-2]:
                raise ops.ShapeError("fuse_detector_features", ref, f.shape, detail=f"tap {k} channels")
            term = ops.resize_bilinear(f, ref[-2:]) * a
            acc = term if acc is None else acc + term
        fused.append(acc)
    return FusedFeatures(fused)


def mask_to_features(mask, shapes) -> list[np.ndarray]:
    """Channel-mean, area-averaged copies of a pixel mask, one per ``(h, w)``."""
    m = np.asarray(getattr(mask, "data", mask), dtype=np.float64)
    m2 = m.mean(axis=0) if m.ndim == 3 else m
    out = []
    for h, w in shapes:
        H, W = m2.shape
        if H % h or W % w:
            raise ops.ShapeError("mask_to_features", m2.shape, (h, w), detail="grid must divide the image")
        pooled = m2.reshape(h, H // h, w, W // w).mean(axis=(1, 3))
        out.append(pooled[None].astype(np.float32))
    return out


def poison_feature_loss(fused_pert: FusedFeatures, fused_clean: FusedFeatures, mask_feat, cfg: PoisonConfig) -> Tensor:
    """``sum_i w_i * ||pert_i - (-clean_i + nu * mask_i)||^2``, averaged over a leading batch axis."""
    if len(fused_pert) != len(fused_clean) or len(fused_pert) != len(mask_feat):
        raise ValueError("poison_feature_loss: layer counts differ")
    weights = cfg.layer_w(len(fused_pert))
    total = None
    for w, fp, fc, m in zip(weights, fused_pert.layers, fused_clean.layers, mask_feat):
        fp, fc = as_tensor(fp), as_tensor(fc)
        if fp.shape != fc.shape:
            raise ops.ShapeError("poison_feature_loss", fp.shape, fc.shape)
        m = np.asarray(getattr(m, "data", m))
        try:
            np.broadcast_shapes(m.shape, fp.shape)
        except ValueError:
            raise ops.ShapeError("poison_feature_loss", fp.shape, m.shape, detail="mask") from None
        target = -fc.data + np.asarray(cfg.nu * m, dtype=fc.data.dtype)
        diff = fp - target
        sq = ops.sum_(diff * diff)
        if fp.ndim == 4:
            sq = sq / float(fp.shape[0])
        term = sq * w
        total = term if total is None else total + term
    return total


def poison_output_loss(detections: Sequence[Detection]) -> float:
    """Mean of ``score^2 + |box - centre point|_1``; zero with no detections."""
    if not detections:
        return 0.0
    vals = []
    for d in detections:
        x0, y0, x1, y1 = d.box
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        vals.append(d.score**2 + abs(x0 - cx) + abs(y0 - cy) + abs(x1 - cx) + abs(y1 - cy))
    return float(np.mean(vals))


def output_loss_tensor(detector, images, score_threshold: float, box_scale: float = 1.0) -> Tensor:
    """Differentiable output loss for a batch, averaged over images.

    Surviving cells are chosen (threshold + NMS) without gradient; their
    score and decoded box then enter the loss with the centre targets held
    fixed.
    """
    images = as_tensor(images)
    scores, raw, _ = detector(images)
    boxes = detector.decode_boxes(raw)
    if box_scale != 1.0:
        boxes = boxes * box_scale
    n = images.shape[0]
    g = scores.shape[-1]
    total = None
    for k in range(n):
        picked = candidate_cells(scores.data[k, 0], boxes.data[k], score_threshold)
        if not picked:
            continue
        cells = np.array([c for c, _ in picked])
        ii, jj = np.divmod(cells, g)
        s = scores[k, 0][ii, jj]
        b = boxes[k][:, ii, jj]
        bd = b.data
        centre = np.stack([(bd[0] + bd[2]) / 2, (bd[1] + bd[3]) / 2] * 2)
        per = s * s + ops.sum_(ops.abs_(b - centre), 0)
        term = ops.mean(per)
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros((), dtype=scores.data.dtype))
    return total / float(n)


def poison_total_objective(image_pert, image_clean, detectors: Sequence, mask, cfg: PoisonConfig) -> Tensor:
    """``J = L_feat + L_output``; the output term is alpha-weighted over detectors."""
    image_pert = as_tensor(image_pert)
    with no_grad():
        clean = fuse_detector_features(image_clean, detectors, cfg)
    pert = fuse_detector_features(image_pert, detectors, cfg)
    mask_feat = mask_to_features(mask, [f.shape[-2:] for f in pert.layers])
    j = poison_feature_loss(pert, clean, mask_feat, cfg)
    for a, det in zip(cfg.alphas(len(detectors)), detectors):
        if a:
            j = j + output_loss_tensor(det, image_pert, cfg.score_threshold, cfg.box_scale) * a
    return j


def _batches(n, batch_size, iterations):
    from .interruption import _batches as b

    return b(n, batch_size, iterations)


def craft_poison(images, W0, detectors: Sequence, mask, cfg: PoisonConfig, callback=None) -> Tensor:
    """Masked projected descent on ``J`` starting from ``delta = 0``.

    The protected image seen by the detectors is
    ``clip(x + clip(W0 + delta, -eps, eps), 0, 1)``.  With
    ``mask_update="update"`` the mask multiplies each step, so ``delta``
    never leaves the mask support and is not shrunk by repeated
    multiplication; ``"iterate"`` multiplies the iterate as the textbook
    update does.  ``callback(t, delta, J)`` runs after each update.
    """
    images = np.asarray(getattr(images, "data", images), dtype=np.float32)
    w0 = np.asarray(getattr(W0, "data", W0), dtype=np.float32)
    m = np.asarray(getattr(mask, "data", mask), dtype=np.float32)
    if w0.shape != images.shape[1:] or m.shape != w0.shape:
        raise ops.ShapeError("craft_poison", images.shape, w0.shape, m.shape)
    eps = np.float32(cfg.epsilon)
    delta = np.zeros_like(w0)
    for t, idx in enumerate(_batches(len(images), cfg.batch_size, cfg.iterations)):
        x = images[idx]
        leaf = Tensor(delta, requires_grad=True)
        try:
            total = ops.clamp(leaf + w0, -eps, eps)
            x_p = ops.clamp(total + x, 0.0, 1.0)
            j = poison_total_objective(x_p, x, detectors, m, cfg)
            j.backward()
        except NonFiniteError:
            raise CraftingError("poisoning", t) from None
        if not np.isfinite(j.item()):
            raise CraftingError("poisoning", t)
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(delta)
        step = np.float32(cfg.eta) * ascent_direction(grad, cfg.step_rule)
        if cfg.mask_update == "update":
            delta = np.clip(delta - step * m, -eps, eps)
        else:
            delta = np.clip(delta - step, -eps, eps) * m
        if callback is not None:
            callback(t, delta, j.item())
    return Tensor(delta)
