"""Procedural face-like images with ground-truth boxes.

Faces are roughly centred, as in aligned face crops: a skin-tone ellipse
with a hair cap, two eye blobs and a mouth bar, drawn over a smoothly
textured background.  The attribute label is the hair colour class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..rng import make_rng

__all__ = ["SyntheticSample", "synth_dataset", "render_face", "IMAGE_SIZE", "HAIR_COLORS"]

IMAGE_SIZE = 64

# black, blonde, brown
HAIR_COLORS = np.array([[0.08, 0.07, 0.07], [0.85, 0.72, 0.38], [0.42, 0.26, 0.14]])
SKIN_TONES = np.array([[0.94, 0.78, 0.66], [0.84, 0.64, 0.50], [0.66, 0.47, 0.34], [0.45, 0.31, 0.22]])


@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray  # (3, 64, 64) float32 in [0, 1]
    face_box: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max
    face_mask: np.ndarray  # (64, 64) bool
    attribute: int


def _smooth_field(rng, size: int, cells: int) -> np.ndarray:
    """Unit-variance-ish random field with correlation length ``size / cells``."""
    from scipy.ndimage import zoom

    coarse = rng.standard_normal((cells, cells))
    return zoom(coarse, size / cells, order=3)[:size, :size]


def _soft(d: np.ndarray, width: float = 0.8) -> np.ndarray:
    # d < 0 inside; linear ramp across roughly one pixel
    return np.clip(0.5 - d / width, 0.0, 1.0)


def render_face(rng: np.random.Generator, size: int = IMAGE_SIZE) -> SyntheticSample:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    bg_color = rng.uniform(0.15, 0.85, 3)
    img = np.empty((3, size, size))
    for c in range(3):
        field = 0.10 * _smooth_field(rng, size, 6) + 0.04 * _smooth_field(rng, size, 16)
        img[c] = bg_color[c] + field + 0.015 * rng.standard_normal((size, size))

    cx = size / 2 + rng.uniform(-4, 4)
    cy = size / 2 + 2 + rng.uniform(-4, 4)
    ax = rng.uniform(12.5, 17.0)
    ay = ax * rng.uniform(1.15, 1.35)
    ay = min(ay, cy - 1.0, size - cy - 1.0)

    def ellipse_dist(ex, ey, rx, ry):
        r = np.sqrt(((xx - ex) / rx) ** 2 + ((yy - ey) / ry) ** 2)
        return (r - 1.0) * min(rx, ry)

    attribute = int(rng.integers(0, len(HAIR_COLORS)))
    hair = _soft(ellipse_dist(cx, cy - 0.18 * ay, ax * 1.12, ay * 1.0)) * (yy < cy - 0.1 * ay)
    hair_col = HAIR_COLORS[attribute] + rng.uniform(-0.04, 0.04, 3)
    hair_tex = 0.05 * _smooth_field(rng, size, 16)
    for c in range(3):
        img[c] = img[c] * (1 - hair) + (hair_col[c] + hair_tex) * hair

    skin = SKIN_TONES[rng.integers(0, len(SKIN_TONES))] + rng.uniform(-0.05, 0.05, 3)
    face = _soft(ellipse_dist(cx, cy, ax, ay))
    shade = -0.06 * (yy - cy) / ay - 0.04 * (xx - cx) / ax * rng.uniform(-1, 1)
    skin_tex = 0.04 * _smooth_field(rng, size, 16)
    for c in range(3):
        img[c] = img[c] * (1 - face) + (skin[c] + shade + skin_tex) * face

    eye_r = ax * rng.uniform(0.14, 0.19)
    eye_y = cy - 0.2 * ay
    eye_col = rng.uniform(0.02, 0.2)
    for sx in (-1, 1):
        eye = _soft(ellipse_dist(cx + sx * 0.42 * ax, eye_y, eye_r, eye_r * 0.65)) * face
        img = img * (1 - eye) + eye_col * eye

    mw = ax * rng.uniform(0.35, 0.5)
    mh = max(1.2, 0.08 * ay)
    my = cy + 0.5 * ay
    mouth = _soft(np.maximum(np.abs(xx - cx) - mw, np.abs(yy - my) - mh)) * face
    mouth_col = np.array([0.55, 0.12, 0.15]) * rng.uniform(0.6, 1.0)
    for c in range(3):
        img[c] = img[c] * (1 - mouth) + mouth_col[c] * mouth

    box = (
        float(max(cx - ax, 0.0)),
        float(max(cy - ay, 0.0)),
        float(min(cx + ax, size)),
        float(min(cy + ay, size)),
    )
    return SyntheticSample(
        image=np.clip(img, 0, 1).astype(np.float32),
        face_box=box,
        face_mask=face > 0.5,
        attribute=attribute,
    )


def synth_dataset(count: int, seed: int) -> list[SyntheticSample]:
    """Render ``count`` samples, deterministically for a given seed."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = make_rng(seed)
    return [render_face(rng) for _ in range(count)]


def stack_images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)
