"""Intensity separation and the two-stage pipeline.

The interruption perturbation ``W0`` is crafted first.  Its weak elements
(``|W0| < tau``) form the poison mask, the poisoning delta is crafted
inside that mask, and the two are summed and clipped to the budget.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .interruption import InterruptionConfig, craft_interruption
from .numerics import Tensor, as_tensor, clip_range
from .numerics import ops
from .poisoning import PoisonConfig, craft_poison
from .zoo.serialize import FormatError, UnsupportedVersionError

__all__ = [
    "PoisonMask",
    "TsdfConfig",
    "TsdfPerturbation",
    "compute_poison_mask",
    "combine_perturbations",
    "apply_perturbation",
    "craft_tsdf",
    "save_perturbation",
    "load_perturbation",
    "perturbation_to_bytes",
    "perturbation_from_bytes",
]

MAGIC = b"TSDP"
VERSION = 1


@dataclass(frozen=True)
class PoisonMask:
    values: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return self.values > 0


def compute_poison_mask(W0, tau: float, beta: float, scale: float = 1.0) -> PoisonMask:
    """``exp(-beta * a) * [a < tau]`` with ``a = |W0| / scale``.

    ``scale=1`` compares raw magnitudes; passing the budget makes ``tau``
    and ``beta`` act on intensity relative to it.
    """
    if tau < 0 or beta < 0:
        raise ValueError(f"tau and beta must be non-negative, got tau={tau}, beta={beta}")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    w = np.asarray(getattr(W0, "data", W0), dtype=np.float64)
    a = np.abs(w) / scale
    vals = np.where(a < tau, np.exp(-beta * a), 0.0)
    return PoisonMask(vals.astype(np.float32))


def combine_perturbations(W0, delta, epsilon: float) -> Tensor:
    W0, delta = as_tensor(W0), as_tensor(delta)
    if W0.shape != delta.shape:
        raise ops.ShapeError("combine_perturbations", W0.shape, delta.shape)
    return clip_range(Tensor(W0.data + delta.data), -epsilon, epsilon)


def apply_perturbation(image, delta_final) -> Tensor:
    """``clip(image + delta_final, 0, 1)``; ``image`` may carry a leading batch axis."""
    image, delta_final = as_tensor(image), as_tensor(delta_final)
    if image.shape[-delta_final.ndim :] != delta_final.shape:
        raise ops.ShapeError("apply_perturbation", image.shape, delta_final.shape)
    return clip_range(Tensor(image.data + delta_final.data), 0.0, 1.0)


@dataclass
class TsdfConfig:
    interruption: InterruptionConfig = field(default_factory=InterruptionConfig)
    poison: PoisonConfig = field(default_factory=PoisonConfig)
    relative_tau: bool = True  # tau and beta act on |W0| / epsilon

    def __post_init__(self):
        if self.interruption.epsilon != self.poison.epsilon:
            raise ValueError(
                f"interruption and poisoning budgets differ ({self.interruption.epsilon} vs {self.poison.epsilon})"
            )

    @property
    def epsilon(self) -> float:
        return self.interruption.epsilon

    def to_dict(self) -> dict:
        return {
            "interruption": self.interruption.to_dict(),
            "poison": self.poison.to_dict(),
            "relative_tau": self.relative_tau,
        }


@dataclass
class TsdfPerturbation:
    W0: np.ndarray
    delta_poison: np.ndarray
    delta_final: np.ndarray
    epsilon: float
    config: dict = field(default_factory=dict)
    mask: np.ndarray | None = None

    def __post_init__(self):
        if not (self.W0.shape == self.delta_poison.shape == self.delta_final.shape):
            raise ops.ShapeError("TsdfPerturbation", self.W0.shape, self.delta_poison.shape, self.delta_final.shape)
        if np.abs(self.delta_final).max(initial=0.0) > self.epsilon:
            raise ValueError("delta_final exceeds the budget")


def craft_tsdf(
    train_images, extractors, detectors, cfg: TsdfConfig | None = None, W0=None, on_interruption=None, on_poison=None
) -> TsdfPerturbation:
    """Run both stages.  A precomputed ``W0`` skips the interruption stage.

    ``on_interruption`` and ``on_poison`` are forwarded as the per-iteration
    callbacks of the two stages.
    """
    cfg = cfg or TsdfConfig()
    eps = cfg.epsilon
    images = np.asarray(getattr(train_images, "data", train_images), dtype=np.float32)
    if W0 is None:
        W0 = craft_interruption(images, extractors, cfg.interruption, on_interruption)
    w0 = np.asarray(getattr(W0, "data", W0), dtype=np.float32)
    pc = cfg.poison
    mask = compute_poison_mask(w0, pc.tau, pc.beta, scale=eps if cfg.relative_tau else 1.0)
    if mask.support.any():
        delta = craft_poison(images, w0, detectors, mask.values, pc, on_poison).data
    else:
        delta = np.zeros_like(w0)
    final = combine_perturbations(w0, delta, eps).data
    return TsdfPerturbation(w0, delta, final, eps, cfg.to_dict(), mask.values)


# --- perturbation files -----------------------------------------------------

_HEAD = struct.Struct("<4sHf3I")


def perturbation_to_bytes(p: TsdfPerturbation) -> bytes:
    c, h, w = p.W0.shape
    parts = [_HEAD.pack(MAGIC, VERSION, p.epsilon, c, h, w)]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in (p.W0, p.delta_poison, p.delta_final)]
    return b"".join(parts)


def perturbation_from_bytes(buf: bytes) -> TsdfPerturbation:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic (expected b'TSDP')", 0)
    if len(buf) < _HEAD.size:
        raise FormatError(f"truncated header: {len(buf)} of {_HEAD.size} bytes", len(buf))
    _, version, eps, c, h, w = _HEAD.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedVersionError(version)
    n = c * h * w
    need = _HEAD.size + 3 * 4 * n
    if len(buf) < need:
        raise FormatError(f"truncated payload: need {need} bytes, got {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes", need)
    arrs = [
        np.frombuffer(buf, dtype="<f4", count=n, offset=_HEAD.size + 4 * n * k).reshape(c, h, w).astype(np.float32)
        for k in range(3)
    ]
    return TsdfPerturbation(arrs[0], arrs[1], arrs[2], float(eps))


def save_perturbation(path, p: TsdfPerturbation) -> None:
    Path(path).write_bytes(perturbation_to_bytes(p))


def load_perturbation(path) -> TsdfPerturbation:
    return perturbation_from_bytes(Path(path).read_bytes())
