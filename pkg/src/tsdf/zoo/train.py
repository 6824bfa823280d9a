"""Training for the toy model zoo.

Minibatch training with a fixed step size (Adam by default, plain SGD
on request), seeded through :func:`tsdf.rng.make_rng`.  Trained models must clear the quality
gates in :class:`TrainConfig` or :class:`TrainingError` is raised.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..numerics import Tensor, no_grad
from ..numerics import ops
from ..rng import make_rng
from .detect import decode_batch
from .models import (
    DetectorModel,
    ExtractorModel,
    GeneratorModel,
    ToyModel,
    build_detector,
    build_generator,
)

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainingError",
    "Optimizer",
    "run_epoch",
    "train_autoencoder",
    "train_detector",
    "detector_loss",
    "reconstruction_psnr",
    "detector_f1",
    "train_toy_models",
]


class TrainingError(RuntimeError):
    """A model missed its quality gate within the epoch budget."""

    def __init__(self, model: str, metric: str, achieved: float, required: float):
        self.model = model
        self.metric = metric
        self.achieved = achieved
        self.required = required
        super().__init__(f"{model}: {metric} {achieved:.4f} did not reach {required:.4f}")


@dataclass
class TrainConfig:
    n_extractors: int = 2
    n_detectors: int = 2
    optimizer: str = "adam"
    ae_epochs: int = 12
    ae_lr: float = 0.003
    det_epochs: int = 15
    det_lr: float = 0.003
    batch_size: int = 16
    negative_fraction: float = 0.15
    holdout: int = 64
    min_psnr: float = 25.0
    min_f1: float = 0.95
    extractor_channels: tuple = (8, 16, 16)
    detector_channels: tuple = (8, 16, 16, 16)
    extra: dict = field(default_factory=dict)


class Optimizer:
    """Fixed-step SGD or Adam over a model's parameter dict."""

    def __init__(self, model: ToyModel, lr: float, kind: str = "adam", betas=(0.9, 0.999), eps: float = 1e-8):
        if kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.model, self.lr, self.kind = model, lr, kind
        self.b1, self.b2, self.eps = betas[0], betas[1], eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for k, g in grads.items():
            if g is None:
                continue
            if self.kind == "sgd":
                upd = self.lr * g
            else:
                self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
                self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
                mh = self.m[k] / (1 - self.b1**self.t)
                vh = self.v[k] / (1 - self.b2**self.t)
                upd = self.lr * mh / (np.sqrt(vh) + self.eps)
            self.model.params[k] = (self.model.params[k] - upd).astype(np.float32)


def run_epoch(opt: Optimizer, loss_fn, n: int, batch_size: int, rng) -> float:
    """One pass over ``n`` samples; ``loss_fn(idx, params)`` returns a scalar Tensor."""
    order = rng.permutation(n)
    total = 0.0
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        leaves = opt.model.leaves(requires_grad=True)
        loss = loss_fn(idx, leaves)
        loss.backward()
        opt.step({k: t.grad for k, t in leaves.items()})
        total += loss.item() * len(idx)
    return total / n


def train_autoencoder(
    gen: GeneratorModel, images: np.ndarray, epochs: int, lr: float, batch_size: int, rng, optimizer: str = "adam"
) -> GeneratorModel:
    """Fit ``gen`` to reconstruct ``images`` in place; returns ``gen``."""
    opt = Optimizer(gen, lr, optimizer)

    def loss_fn(idx, params):
        x = Tensor(images[idx])
        return ops.squared_error(gen(x, params=params), x)

    for epoch in range(epochs):
        loss = run_epoch(opt, loss_fn, len(images), batch_size, rng)
        log.debug("autoencoder epoch %d loss %.5f", epoch, loss)
    return gen


def _detector_targets(det: DetectorModel, boxes: np.ndarray, positive: np.ndarray):
    """Dense score/box targets for an ``(N, 4)`` array of face boxes."""
    n = len(boxes)
    g = det.arch["input_size"] // det.stride
    s = float(det.stride)
    size = float(det.arch["input_size"])
    score_t = np.zeros((n, 1, g, g), np.float32)
    score_w = np.full((n, 1, g, g), 0.1, np.float32)
    box_t = np.zeros((n, 4, g, g), np.float32)
    box_w = np.zeros((n, 4, g, g), np.float32)
    for k in range(n):
        if not positive[k]:
            continue
        x0, y0, x1, y1 = boxes[k]
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        ci, cj = int(min(cy // s, g - 1)), int(min(cx // s, g - 1))
        score_t[k, 0, ci, cj] = 1.0
        score_w[k, 0, ci, cj] = 1.0
        for i in range(max(ci - 1, 0), min(ci + 2, g)):
            for j in range(max(cj - 1, 0), min(cj + 2, g)):
                box_t[k, :, i, j] = (cx / s - j, cy / s - i, (x1 - x0) / size, (y1 - y0) / size)
                box_w[k, :, i, j] = 1.0 if (i, j) == (ci, cj) else 0.3
                if (i, j) != (ci, cj):
                    # neighbours are neither pushed up nor down
                    score_w[k, 0, i, j] = 0.02
    return score_t, score_w, box_t, box_w


def detector_loss(det: DetectorModel, x: Tensor, targets, params=None) -> Tensor:
    score_t, score_w, box_t, box_w = targets
    scores, raw, _ = det(x, params=params)
    n = x.shape[0]
    ds = scores - score_t
    db = raw - box_t
    return (ops.sum_(ds * ds * score_w) + ops.sum_(db * db * box_w)) / float(n)


def train_detector(det: DetectorModel, images: np.ndarray, boxes: np.ndarray, masks: np.ndarray, cfg: TrainConfig, rng) -> DetectorModel:
    """Fit ``det`` in place.  A random share of each batch has its face blacked out."""
    n = len(images)
    opt = Optimizer(det, cfg.det_lr, cfg.optimizer)

    def loss_fn(idx, params):
        x = images[idx].copy()
        positive = rng.random(len(idx)) >= cfg.negative_fraction
        for k in np.flatnonzero(~positive):
            x[k][:, masks[idx[k]]] = 0.0
        targets = _detector_targets(det, boxes[idx], positive)
        return detector_loss(det, Tensor(x), targets, params)

    for epoch in range(cfg.det_epochs):
        loss = run_epoch(opt, loss_fn, n, cfg.batch_size, rng)
        log.debug("detector epoch %d loss %.5f", epoch, loss)
    return det


def reconstruction_psnr(gen: GeneratorModel, images: np.ndarray) -> float:
    from ..metrics import psnr_batch

    with no_grad():
        out = gen(Tensor(images)).data
    return float(psnr_batch(out, images).mean())


def detector_f1(det: DetectorModel, images: np.ndarray, boxes, score_threshold: float = 0.5) -> float:
    from ..metrics import dataset_f1

    preds = decode_batch(det, images, score_threshold)
    return dataset_f1(preds, [[tuple(b)] for b in boxes])


def train_toy_models(dataset, config: TrainConfig | None = None, seed: int = 7):
    """Train extractors, a generator and detectors on a synthetic dataset.

    The last ``config.holdout`` samples are held out for the quality gates.
    Extractor 0 is the generator's own encoder; the remaining extractors
    are encoders of independently seeded autoencoders.

    Returns
    -------
    extractors : list of ExtractorModel
    generator : GeneratorModel
    detectors : list of DetectorModel
    """
    cfg = config or TrainConfig()
    if len(dataset) == 0:
        raise ValueError("train_toy_models: empty dataset")
    if len(dataset) <= cfg.holdout:
        raise ValueError(f"train_toy_models: need more than {cfg.holdout} samples, got {len(dataset)}")
    images = np.stack([s.image for s in dataset]).astype(np.float32)
    boxes = np.array([s.face_box for s in dataset], dtype=np.float32)
    masks = np.stack([s.face_mask for s in dataset])
    tr, ho = slice(0, len(dataset) - cfg.holdout), slice(len(dataset) - cfg.holdout, None)

    autoencoders: list[GeneratorModel] = []
    for m in range(max(cfg.n_extractors, 1)):
        rng = make_rng(seed, 100 + m)
        ae = build_generator(rng, cfg.extractor_channels)
        train_autoencoder(ae, images[tr], cfg.ae_epochs, cfg.ae_lr, cfg.batch_size, rng, cfg.optimizer)
        score = reconstruction_psnr(ae, images[ho])
        log.info("autoencoder %d held-out PSNR %.2f dB", m, score)
        if score < cfg.min_psnr:
            raise TrainingError(f"autoencoder[{m}]", "PSNR", score, cfg.min_psnr)
        autoencoders.append(ae)
    generator = autoencoders[0]
    extractors: list[ExtractorModel] = [ae.encoder_model() for ae in autoencoders[: cfg.n_extractors]]

    detectors: list[DetectorModel] = []
    for m in range(cfg.n_detectors):
        rng = make_rng(seed, 200 + m)
        det = build_detector(rng, cfg.detector_channels)
        train_detector(det, images[tr], boxes[tr], masks[tr], cfg, rng)
        score = detector_f1(det, images[ho], boxes[ho])
        log.info("detector %d held-out F1 %.3f", m, score)
        if score < cfg.min_f1:
            raise TrainingError(f"detector[{m}]", "F1", score, cfg.min_f1)
        detectors.append(det)
    return extractors, generator, detectors
