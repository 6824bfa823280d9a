"""The adaptive attacker: detector-gated data preparation and retraining.

An attacker scrapes a pool of (possibly protected) images, keeps the ones
their face detector fires on, crops and resizes the faces, and fine-tunes
their generator on the result.  The persistence experiment measures how
each defence holds up against that loop.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from ..fusion import TsdfConfig, apply_perturbation, craft_tsdf
from ..interruption import craft_interruption
from ..metrics import frechet_toy, ssim_batch
from ..numerics import Tensor, no_grad
from ..rng import make_rng
from ..zoo.detect import decode_batch
from ..zoo.models import GeneratorModel
from ..zoo.train import TrainConfig, train_autoencoder, train_toy_models
from .synth import synth_dataset

log = logging.getLogger(__name__)

__all__ = [
    "CONDITIONS",
    "CROP_MODES",
    "NoCropsError",
    "PersistenceConfig",
    "PersistenceReport",
    "crop_and_resize",
    "crop_aligned",
    "attacker_prepare_data",
    "retrain_generator",
    "forged_ssim",
    "run_persistence_experiment",
    "reports_to_json",
    "reports_to_csv",
]

CONDITIONS = ("noise", "interruption-only", "tsdf")


class NoCropsError(ValueError):
    """The attacker's pipeline produced no training crops."""


def crop_and_resize(image: np.ndarray, box, size: int = 64, expand: float = 0.1) -> np.ndarray:
    """Bilinear crop of ``box`` grown by ``expand`` of its size, clamped to the image."""
    _, h, w = image.shape
    x0, y0, x1, y1 = box
    gx, gy = (x1 - x0) * expand / 2, (y1 - y0) * expand / 2
    x0, x1 = max(x0 - gx, 0.0), min(x1 + gx, float(w))
    y0, y1 = max(y0 - gy, 0.0), min(y1 + gy, float(h))
    # pixel-centre sample positions, in array index coordinates
    ys = y0 + (np.arange(size) + 0.5) * (y1 - y0) / size - 0.5
    xs = x0 + (np.arange(size) + 0.5) * (x1 - x0) / size - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.stack([map_coordinates(ch, [yy, xx], order=1, mode="nearest") for ch in image])
    return out.astype(np.float32)


def crop_aligned(image: np.ndarray, box, expand: float = 0.1) -> np.ndarray:
    """Keep ``box`` grown by ``expand`` at its native pixels; zero elsewhere.

    The box is snapped outward to whole pixels, so the crop is in register
    with the frame the generator consumes and no resampling takes place.
    """
    _, h, w = image.shape
    x0, y0, x1, y1 = box
    gx, gy = (x1 - x0) * expand / 2, (y1 - y0) * expand / 2
    c0, r0 = int(np.floor(max(x0 - gx, 0.0))), int(np.floor(max(y0 - gy, 0.0)))
    c1, r1 = int(np.ceil(min(x1 + gx, w))), int(np.ceil(min(y1 + gy, h)))
    out = np.zeros_like(image, dtype=np.float32)
    out[:, r0:r1, c0:c1] = image[:, r0:r1, c0:c1]
    return out


CROP_MODES = ("aligned", "resize")


def attacker_prepare_data(images, detector, score_threshold: float = 0.5, size: int = 64, mode: str = "aligned"):
    """Crop the top detection of every image the detector fires on.

    ``mode="resize"`` resamples the grown box to ``size`` squared;
    ``"aligned"`` keeps it in place on a blank frame (see
    :func:`crop_aligned`).  Returns ``(crops, yield)``.
    """
    if mode not in CROP_MODES:
        raise ValueError(f"mode must be one of {CROP_MODES}, got {mode!r}")
    images = np.asarray(getattr(images, "data", images), dtype=np.float32)
    shape = (0, 3, size, size) if mode == "resize" else (0,) + images.shape[1:]
    if len(images) == 0:
        return np.zeros(shape, np.float32), 0.0
    dets = decode_batch(detector, images, score_threshold)
    if mode == "resize":
        crops = [crop_and_resize(img, d[0].box, size) for img, d in zip(images, dets) if d]
    else:
        crops = [crop_aligned(img, d[0].box) for img, d in zip(images, dets) if d]
    stacked = np.stack(crops) if crops else np.zeros(shape, np.float32)
    return stacked, len(crops) / len(images)


def retrain_generator(
    generator: GeneratorModel, crops, epochs: int, seed: int, lr: float = 0.001, batch_size: int = 16
) -> GeneratorModel:
    """Fine-tune a copy of ``generator`` on ``crops``; the input is left untouched."""
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    crops = np.asarray(crops, dtype=np.float32)
    if len(crops) == 0:
        raise NoCropsError("no crops to retrain on")
    g = generator.copy()
    train_autoencoder(g, crops, epochs, lr, batch_size, make_rng(seed, 4))
    return g


def _forward(gen: GeneratorModel, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return gen(Tensor(x)).data


def forged_ssim(gen: GeneratorModel, images: np.ndarray, delta) -> float:
    """Mean SSIM between the generator's outputs on protected and clean images."""
    prot = apply_perturbation(images, delta).data
    return float(ssim_batch(_forward(gen, prot), _forward(gen, images)).mean())


def _quality_frechet(gen, extractor, images) -> float:
    with no_grad():
        a = extractor(Tensor(_forward(gen, images))).data
        b = extractor(Tensor(images)).data
    return frechet_toy(a, b)


@dataclass
class PersistenceConfig:
    n_samples: int = 512
    craft_images: int = 128
    pool: tuple[int, int] = (128, 384)
    eval_images: int = 64
    retrain_epochs: int = 10
    retrain_lr: float = 0.003
    attacker_detector: int = 0
    score_threshold: float = 0.5
    crop_mode: str = "aligned"
    tsdf: TsdfConfig = field(default_factory=TsdfConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class PersistenceReport:
    condition: str
    crop_yield: float
    ssim_before: float
    ssim_after: float
    frechet_before: float
    frechet_after: float
    retrained: bool = True
    epochs: int = 0
    n_crops: int = 0

    def __post_init__(self):
        if not 0.0 <= self.crop_yield <= 1.0:
            raise ValueError(f"crop_yield must lie in [0, 1], got {self.crop_yield}")

    def to_dict(self) -> dict:
        return asdict(self)


def reports_to_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2)


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    names = list(PersistenceReport.__dataclass_fields__)
    w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.to_dict().items()})
    return buf.getvalue()


def run_persistence_experiment(
    cfg: PersistenceConfig | None = None, seed: int = 7, models=None, dataset=None, W0=None, perturbation=None
):
    """Protect an attacker pool three ways and let the attacker retrain on each.

    ``models`` is ``(extractors, generator, detectors)``; they are trained
    from the synthetic dataset when omitted.  ``W0`` reuses an existing
    interruption perturbation; a full ``perturbation`` (a
    :class:`~tsdf.fusion.TsdfPerturbation`) reuses both stages.  Returns one
    :class:`PersistenceReport` per condition, in the order noise,
    interruption-only, tsdf.
    """
    cfg = cfg or PersistenceConfig()
    samples = dataset if dataset is not None else synth_dataset(cfg.n_samples, seed)
    images = np.stack([s.image for s in samples]).astype(np.float32)
    if models is None:
        models = train_toy_models(samples, cfg.train, seed)
    extractors, generator, detectors = models
    craft = images[: cfg.craft_images]
    pool = images[cfg.pool[0] : cfg.pool[1]]
    evals = images[-cfg.eval_images :]
    eps = cfg.tsdf.epsilon

    if perturbation is not None:
        W0, final = perturbation.W0, perturbation.delta_final
    else:
        if W0 is None:
            W0 = craft_interruption(craft, extractors, cfg.tsdf.interruption).data
        W0 = np.asarray(getattr(W0, "data", W0), dtype=np.float32)
        final = craft_tsdf(craft, extractors, detectors, cfg.tsdf, W0=W0).delta_final
    deltas = {
        "noise": make_rng(seed, 3).uniform(-eps, eps, W0.shape).astype(np.float32),
        "interruption-only": W0,
        "tsdf": final,
    }
    attacker = detectors[cfg.attacker_detector]
    reference = extractors[0]
    base_frechet = _quality_frechet(generator, reference, evals)
    reports = []
    for idx, cond in enumerate(CONDITIONS):
        delta = deltas[cond]
        protected = apply_perturbation(pool, delta).data
        crops, yld = attacker_prepare_data(protected, attacker, cfg.score_threshold, mode=cfg.crop_mode)
        before = forged_ssim(generator, evals, delta)
        try:
            g2 = retrain_generator(generator, crops, cfg.retrain_epochs, seed + idx, cfg.retrain_lr)
            retrained = True
        except NoCropsError:
            log.info("%s: attacker pipeline yielded no crops; generator left as is", cond)
            g2, retrained = generator, False
        after = forged_ssim(g2, evals, delta)
        reports.append(
            PersistenceReport(
                condition=cond,
                crop_yield=float(yld),
                ssim_before=before,
                ssim_after=after,
                frechet_before=base_frechet,
                frechet_after=_quality_frechet(g2, reference, evals),
                retrained=retrained,
                epochs=cfg.retrain_epochs if retrained else 0,
                n_crops=int(len(crops)),
            )
        )
        log.info("%s", reports[-1])
    return reports
