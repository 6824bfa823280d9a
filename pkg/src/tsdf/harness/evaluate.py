"""Scoring a perturbation against the toy pipeline."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..fusion import apply_perturbation
from ..metrics import MetricReport, frechet_toy, l2mask, psnr_batch, srmask, ssim_batch
from ..numerics import Tensor, no_grad
from ..zoo.train import detector_f1

__all__ = ["forge", "Imperceptibility", "imperceptibility", "detector_f1s", "interruption_report"]


def forge(generator, images) -> np.ndarray:
    """Generator outputs for a batch, without gradient."""
    with no_grad():
        return generator(Tensor(np.asarray(images, dtype=np.float32))).data


@dataclass
class Imperceptibility:
    psnr: float
    ssim: float

    def to_dict(self) -> dict:
        return asdict(self)


def imperceptibility(images, delta) -> Imperceptibility:
    """Mean PSNR and SSIM of protected against original images."""
    images = np.asarray(images, dtype=np.float32)
    prot = apply_perturbation(images, delta).data
    return Imperceptibility(float(psnr_batch(prot, images).mean()), float(ssim_batch(prot, images).mean()))


def detector_f1s(detectors, images, boxes, delta=None, score_threshold: float = 0.5) -> list[float]:
    """Held-out F1 of every detector on (optionally protected) images."""
    images = np.asarray(images, dtype=np.float32)
    if delta is not None:
        images = apply_perturbation(images, delta).data
    return [detector_f1(d, images, boxes, score_threshold) for d in detectors]


def interruption_report(
    condition: str, generator, extractor, images, boxes, delta, detectors=(), score_threshold: float = 0.5
) -> MetricReport:
    """Forgery distortion caused by ``delta``.

    L2mask, PSNR and SSIM compare ``G(x + delta)`` with ``G(x)``; the
    Fréchet distance compares extractor features of the same two output
    sets.  F1 is the mean over ``detectors`` on the protected images (1.0
    when none are given).
    """
    images = np.asarray(images, dtype=np.float32)
    prot = apply_perturbation(images, delta).data
    out_p, out_c = forge(generator, prot), forge(generator, images)
    l2 = [l2mask(a, b, box) for a, b, box in zip(out_p, out_c, boxes)]
    with no_grad():
        fa = extractor(Tensor(out_p)).data
        fb = extractor(Tensor(out_c)).data
    f1 = float(np.mean(detector_f1s(detectors, prot, boxes, None, score_threshold))) if len(detectors) else 1.0
    return MetricReport(
        condition=condition,
        l2mask=float(np.mean(l2)),
        srmask=srmask(l2),
        psnr=float(psnr_batch(out_p, out_c).mean()),
        ssim=float(ssim_batch(out_p, out_c).mean()),
        f1=f1,
        frechet=frechet_toy(fa, fb),
    )
