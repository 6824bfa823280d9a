"""Toy extractor, generator and detector networks.

Each model is a JSON-able architecture descriptor plus an ordered dict of
float32 parameter arrays.  Forward passes take an ``(N, 3, H, W)``
:class:`~tsdf.numerics.Tensor` and build a differentiable graph.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from ..numerics import Tensor, as_tensor
from ..numerics import ops

__all__ = [
    "ToyModel",
    "ExtractorModel",
    "GeneratorModel",
    "DetectorModel",
    "Detection",
    "conv_layer",
    "build_extractor",
    "build_generator",
    "build_detector",
]


def conv_layer(cin: int, cout: int, k: int = 3, stride: int = 1, act: str | None = "relu") -> dict:
    return {"type": "conv", "in": cin, "out": cout, "k": k, "stride": stride, "pad": k // 2, "act": act}


def _init_stack(prefix: str, layers: list[dict], rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for i, layer in enumerate(layers):
        if layer["type"] != "conv":
            continue
        fan_in = layer["in"] * layer["k"] ** 2
        std = np.sqrt(2.0 / fan_in) if layer.get("act") == "relu" else np.sqrt(1.0 / fan_in)
        shape = (layer["out"], layer["in"], layer["k"], layer["k"])
        params[f"{prefix}.{i}.w"] = (rng.standard_normal(shape) * std).astype(np.float32)
        params[f"{prefix}.{i}.b"] = np.zeros(layer["out"], dtype=np.float32)
    return params


def _run_stack(x: Tensor, prefix: str, layers: list[dict], params: dict, taps=()) -> tuple[Tensor, list]:
    tapped = []
    for i, layer in enumerate(layers):
        kind = layer["type"]
        if kind == "conv":
            x = ops.conv2d(x, params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"], layer["stride"], layer["pad"])
            act = layer.get("act")
            if act == "relu":
                x = ops.relu(x)
            elif act == "sigmoid":
                x = ops.sigmoid(x)
        elif kind == "up":
            x = ops.upsample_nearest(x, layer["k"])
        elif kind == "shuffle":
            x = ops.pixel_shuffle(x, layer["k"])
            if layer.get("act") == "sigmoid":
                x = ops.sigmoid(x)
        elif kind == "maxpool":
            x = ops.max_pool2d(x, layer["k"])
        elif kind == "avgpool":
            x = ops.avg_pool2d(x, layer["k"])
        else:
            raise ValueError(f"unknown layer type {kind!r}")
        if i in taps:
            tapped.append(x)
    return x, tapped


@dataclass
class ToyModel:
    """Architecture descriptor plus named parameters."""

    arch: dict
    params: dict[str, np.ndarray] = field(default_factory=dict)

    kind = "model"

    def leaves(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def copy(self):
        return type(self)(copy.deepcopy(self.arch), {k: v.copy() for k, v in self.params.items()})

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()

    def _p(self, params):
        return self.params if params is None else params


class ExtractorModel(ToyModel):
    kind = "extractor"

    def forward(self, x, params=None) -> Tensor:
        out, _ = _run_stack(as_tensor(x), "enc", self.arch["encoder"], self._p(params))
        return out

    __call__ = forward

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return tuple(self.arch["feature_shape"])


class GeneratorModel(ToyModel):
    """Encoder/decoder image-to-image network with a sigmoid output."""

    kind = "generator"

    @property
    def attr_dim(self) -> int:
        return int(self.arch.get("attr_dim", 0))

    def encode(self, x, params=None) -> Tensor:
        out, _ = _run_stack(as_tensor(x), "enc", self.arch["encoder"], self._p(params))
        return out

    def decode(self, z, attr=None, params=None) -> Tensor:
        if self.attr_dim:
            n, _, h, w = z.shape
            code = np.zeros((n, self.attr_dim, h, w), dtype=z.data.dtype)
            if attr is not None:
                code[np.arange(n), np.asarray(attr, dtype=int)] = 1.0
            z = ops.concat([z, code], axis=1)
        out, _ = _run_stack(z, "dec", self.arch["decoder"], self._p(params))
        return out

    def forward(self, x, attr=None, params=None) -> Tensor:
        return self.decode(self.encode(x, params), attr, params)

    __call__ = forward

    def encoder_model(self) -> ExtractorModel:
        """The encoder as a standalone extractor sharing these parameters."""
        arch = {"kind": "extractor", "encoder": self.arch["encoder"], "feature_shape": self.arch["feature_shape"]}
        return ExtractorModel(copy.deepcopy(arch), {k: v for k, v in self.params.items() if k.startswith("enc.")})


class DetectorModel(ToyModel):
    """Single-scale grid detector: sigmoid score map plus a 4-channel box map."""

    kind = "detector"

    @property
    def stride(self) -> int:
        return int(self.arch["stride"])

    @property
    def taps(self) -> tuple[int, ...]:
        return tuple(self.arch["taps"])

    def forward(self, x, params=None):
        """Return ``(scores (N,1,g,g), boxes (N,4,g,g), tapped features)``."""
        p = self._p(params)
        feat, tapped = _run_stack(as_tensor(x), "bb", self.arch["backbone"], p, self.taps)
        scores = ops.sigmoid(ops.conv2d(feat, p["score.w"], p["score.b"]))
        raw = ops.conv2d(feat, p["box.w"], p["box.b"])
        return scores, raw, tapped

    __call__ = forward

    def features(self, x, params=None) -> list[Tensor]:
        return self.forward(x, params)[2]

    def decode_boxes(self, raw: Tensor) -> Tensor:
        """Pixel corners ``(N, 4, g, g)`` from raw box-head output.

        Channels are (dx, dy, w, h): centre offset in cell units and size in
        image units.  Sizes are rectified; corners are clamped to the image.
        """
        size = float(self.arch["input_size"])
        s = float(self.stride)
        g = raw.shape[-1]
        jj = np.arange(g, dtype=raw.data.dtype).reshape(1, 1, g)
        ii = np.arange(g, dtype=raw.data.dtype).reshape(1, g, 1)
        cx = (raw[:, 0] + jj) * s
        cy = (raw[:, 1] + ii) * s
        hw = ops.relu(raw[:, 2]) * (size / 2)
        hh = ops.relu(raw[:, 3]) * (size / 2)
        corners = [cx - hw, cy - hh, cx + hw, cy + hh]
        corners = [ops.clamp(c, 0.0, size) for c in corners]
        return ops.concat([ops.reshape(c, (c.shape[0], 1, g, g)) for c in corners], axis=1)


@dataclass(frozen=True)
class Detection:
    score: float
    box: tuple[float, float, float, float]
    cell: int = -1

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if x0 > x1 or y0 > y1:
            raise ValueError(f"degenerate box {self.box}")


def build_extractor(rng: np.random.Generator, channels=(8, 16, 16)) -> ExtractorModel:
    enc = _encoder_layers(channels)
    arch = {"kind": "extractor", "encoder": enc, "feature_shape": [channels[-1], 32, 32]}
    return ExtractorModel(arch, _init_stack("enc", enc, rng))


def _encoder_layers(channels):
    c1, c2, c3 = channels
    return [conv_layer(3, c1, 3, 2), conv_layer(c1, c2, 3, 1), conv_layer(c2, c3, 3, 1)]


def build_generator(rng: np.random.Generator, channels=(8, 16, 16), attr_dim: int = 0) -> GeneratorModel:
    c1, c2, c3 = channels
    enc = _encoder_layers(channels)
    dec = [
        conv_layer(c3 + attr_dim, c2, 3, 1),
        conv_layer(c2, 12, 3, 1, act=None),
        {"type": "shuffle", "k": 2, "act": "sigmoid"},
    ]
    arch = {"kind": "generator", "encoder": enc, "decoder": dec, "attr_dim": attr_dim, "feature_shape": [c3, 32, 32]}
    params = _init_stack("enc", enc, rng)
    params.update(_init_stack("dec", dec, rng))
    return GeneratorModel(arch, params)


def build_detector(rng: np.random.Generator, channels=(8, 16, 16, 16), input_size: int = 64) -> DetectorModel:
    c1, c2, c3, c4 = channels
    bb = [conv_layer(3, c1, 3, 2), conv_layer(c1, c2, 3, 2), conv_layer(c2, c3, 3, 2), conv_layer(c3, c4, 5, 1)]
    arch = {"kind": "detector", "backbone": bb, "stride": 8, "taps": [1, 3], "input_size": input_size}
    params = _init_stack("bb", bb, rng)
    params["score.w"] = (rng.standard_normal((1, c4, 1, 1)) * 0.05).astype(np.float32)
    params["score.b"] = np.array([-3.0], dtype=np.float32)
    params["box.w"] = (rng.standard_normal((4, c4, 1, 1)) * 0.01).astype(np.float32)
    params["box.b"] = np.array([0.5, 0.5, 0.5, 0.5], dtype=np.float32)
    return DetectorModel(arch, params)
