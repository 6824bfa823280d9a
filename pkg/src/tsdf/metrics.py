"""Interruption, image-quality and detection metrics.

All functions are pure and accept numpy arrays or Tensors.  Images are
``(3, H, W)`` in ``[0, 1]``; the ``*_batch`` helpers take ``(N, 3, H, W)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .zoo.detect import iou

__all__ = [
    "MetricReport",
    "l2mask",
    "srmask",
    "psnr",
    "ssim",
    "ssim_batch",
    "psnr_batch",
    "detection_counts",
    "detection_f1",
    "dataset_f1",
    "frechet_toy",
    "SRMASK_THRESHOLD",
    "PSNR_CAP",
]

SRMASK_THRESHOLD = 0.05
PSNR_CAP = 99.0
SSIM_WINDOW = 8
C1 = 0.01**2
C2 = 0.03**2
GRAY = np.array([0.299, 0.587, 0.114])


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def l2mask(output_a, output_b, face_box) -> float:
    """Mean squared difference inside ``face_box``.

    Squared differences are averaged over channels per pixel, then over
    the pixels whose centres fall inside the box.
    """
    a, b = _arr(output_a), _arr(output_b)
    _same_shape("l2mask", a, b)
    h, w = a.shape[-2:]
    x0, y0, x1, y1 = face_box
    cols = np.arange(w) + 0.5
    rows = np.arange(h) + 0.5
    inside = ((rows >= y0) & (rows <= y1))[:, None] & ((cols >= x0) & (cols <= x1))[None, :]
    if not inside.any():
        raise ValueError(f"l2mask: face box {tuple(face_box)} contains no pixels")
    per_pixel = ((a - b) ** 2).mean(axis=0)
    return float(per_pixel[inside].mean())


def srmask(values: Sequence[float], threshold: float = SRMASK_THRESHOLD) -> float:
    """Fraction of L2mask values strictly above ``threshold``."""
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("srmask: no values")
    return float((v > threshold).mean())


def psnr(a, b) -> float:
    a, b = _arr(a), _arr(b)
    _same_shape("psnr", a, b)
    mse = float(((a - b) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def psnr_batch(a, b) -> np.ndarray:
    a, b = _arr(a), _arr(b)
    _same_shape("psnr_batch", a, b)
    return np.array([psnr(x, y) for x, y in zip(a, b)])


def _gray(x: np.ndarray) -> np.ndarray:
    return np.tensordot(GRAY, x, axes=([0], [-3]))


def ssim_batch(a, b, window: int = SSIM_WINDOW) -> np.ndarray:
    """Per-image SSIM of two ``(..., 3, H, W)`` stacks."""
    a, b = _arr(a), _arr(b)
    _same_shape("ssim", a, b)
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValueError(f"ssim: image {a.shape[-2:]} smaller than the {window}x{window} window")
    ga, gb = _gray(a), _gray(b)
    wa = sliding_window_view(ga, (window, window), axis=(-2, -1))
    wb = sliding_window_view(gb, (window, window), axis=(-2, -1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa**2).mean(axis=(-2, -1)) - mu_a**2
    var_b = (wb**2).mean(axis=(-2, -1)) - mu_b**2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    return (num / den).mean(axis=(-2, -1))


def ssim(a, b) -> float:
    """Mean SSIM over 8x8 windows (stride 1) of the luma channel."""
    return float(ssim_batch(a, b))


def detection_counts(predictions, truths, iou_threshold: float = 0.5) -> tuple[int, int, int]:
    """Greedy one-to-one matching by descending score; returns ``(tp, fp, fn)``."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    preds = sorted(predictions, key=lambda d: (-d.score, d.box))
    unmatched = list(range(len(truths)))
    tp = 0
    for p in preds:
        best, best_iou = None, -1.0
        for gi in unmatched:
            v = iou(p.box, truths[gi])
            if v >= iou_threshold and v > best_iou:
                best, best_iou = gi, v
        if best is not None:
            unmatched.remove(best)
            tp += 1
    return tp, len(preds) - tp, len(unmatched)


def _f1(tp: int, fp: int, fn: int) -> float:
    if tp + fp + fn == 0:
        return 1.0
    if tp == 0:
        return 0.0
    p = tp / (tp + fp)
    r = tp / (tp + fn)
    return 2 * p * r / (p + r)


def detection_f1(predictions, truths, iou_threshold: float = 0.5) -> float:
    return _f1(*detection_counts(predictions, truths, iou_threshold))


def dataset_f1(predictions_per_image, truths_per_image, iou_threshold: float = 0.5) -> float:
    """F1 from counts pooled over a whole image set."""
    tp = fp = fn = 0
    for preds, truths in zip(predictions_per_image, truths_per_image, strict=True):
        a, b, c = detection_counts(preds, truths, iou_threshold)
        tp, fp, fn = tp + a, fp + b, fn + c
    return _f1(tp, fp, fn)


def frechet_toy(features_a, features_b) -> float:
    """Fréchet distance between diagonal Gaussian fits of two feature batches.

    Rows are samples.  With diagonal covariances the matrix square root is
    elementwise, so the trace term is ``sum((sd_a - sd_b) ** 2)``.
    """
    fa = _arr(features_a).reshape(len(features_a), -1)
    fb = _arr(features_b).reshape(len(features_b), -1)
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise ValueError("frechet_toy: need at least 2 samples per batch")
    if fa.shape[1] != fb.shape[1]:
        raise ValueError(f"frechet_toy: feature sizes differ ({fa.shape[1]} vs {fb.shape[1]})")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    var_a, var_b = fa.var(axis=0, ddof=1), fb.var(axis=0, ddof=1)
    d = float(((mu_a - mu_b) ** 2).sum() + (var_a + var_b - 2 * np.sqrt(var_a * var_b)).sum())
    return max(d, 0.0)


@dataclass
class MetricReport:
    condition: str
    l2mask: float
    srmask: float
    psnr: float
    ssim: float
    f1: float
    frechet: float

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "condition" and not math.isfinite(v):
                raise ValueError(f"MetricReport.{k} is not finite: {v}")
        if not 0.0 <= self.srmask <= 1.0 or not 0.0 <= self.f1 <= 1.0:
            raise ValueError("MetricReport: srmask and f1 must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("l2mask", "srmask", "psnr", "ssim", "f1", "frechet", "condition")}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))
