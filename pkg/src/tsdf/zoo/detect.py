"""Turning score/box maps into detections."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..numerics import as_tensor, no_grad
from .models import Detection, DetectorModel

__all__ = ["iou", "nms", "decode_detections", "decode_batch", "candidate_cells"]


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms(detections: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy non-maximum suppression.

    Ties in score are broken by the lower cell index, so the result does not
    depend on input order.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    order = sorted(detections, key=lambda d: (-d.score, d.cell, d.box))
    kept: list[Detection] = []
    for d in order:
        if all(iou(d.box, k.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def candidate_cells(scores: np.ndarray, boxes: np.ndarray, score_threshold: float, iou_threshold: float = 0.5):
    """NMS survivors for one image as ``[(cell_index, Detection)]``.

    ``scores`` is ``(g, g)``; ``boxes`` is ``(4, g, g)`` pixel corners.
    """
    g = scores.shape[-1]
    flat = scores.reshape(-1)
    dets = []
    for cell in np.flatnonzero(flat >= score_threshold):
        i, j = divmod(int(cell), g)
        box = tuple(float(v) for v in boxes[:, i, j])
        dets.append(Detection(float(flat[cell]), box, int(cell)))
    return [(d.cell, d) for d in nms(dets, iou_threshold)]


def decode_batch(detector: DetectorModel, images, score_threshold: float = 0.5, iou_threshold: float = 0.5):
    """Detections for every image of an ``(N, 3, H, W)`` batch."""
    images = as_tensor(images)
    size = detector.arch["input_size"]
    if images.ndim != 4 or images.shape[1:] != (3, size, size):
        raise ValueError(f"detector expects (N, 3, {size}, {size}) input, got {images.shape}")
    with no_grad():
        scores, raw, _ = detector(images)
        boxes = detector.decode_boxes(raw)
    return [
        [d for _, d in candidate_cells(scores.data[n, 0], boxes.data[n], score_threshold, iou_threshold)]
        for n in range(images.shape[0])
    ]


def decode_detections(detector: DetectorModel, image, score_threshold: float = 0.5) -> list[Detection]:
    """Detections in a single ``(3, H, W)`` image, NMS applied at IoU 0.5."""
    image = as_tensor(image)
    return decode_batch(detector, image.data[None], score_threshold)[0]
