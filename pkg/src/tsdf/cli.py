"""Command-line entry point: ``tsdf <command> [flags]``.

Every command reads an optional JSON run configuration (``--config``),
applies flag overrides on top, and writes its artifacts under ``--out``.
Failures print one line, ``tsdf-error: <kind>: <message>``, to stderr and
exit with status 2 (bad input) or 1 (runtime failure).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from .fusion import (
    TsdfConfig,
    TsdfPerturbation,
    apply_perturbation,
    craft_tsdf,
    load_perturbation,
    save_perturbation,
)
from .harness.attacker import PersistenceConfig, attacker_prepare_data, reports_to_csv, reports_to_json
from .harness.attacker import run_persistence_experiment
from .harness.evaluate import detector_f1s, imperceptibility, interruption_report
from .harness.synth import SyntheticSample, synth_dataset
from .interruption import _STEP_RULES, CraftingError, InterruptionConfig
from .poisoning import PoisonConfig
from .rng import make_rng
from .zoo.serialize import FormatError, load_model, save_model
from .zoo.train import TrainConfig, TrainingError, detector_f1, reconstruction_psnr, train_toy_models

log = logging.getLogger("tsdf")

__all__ = ["RunConfig", "ConfigError", "parse_config", "parse_config_text", "sweep_tau", "main"]

DEFAULT_TAUS = (0.0, 0.2, 0.3, 0.4, 0.5)


class ConfigError(ValueError):
    """Invalid run configuration."""


class CommandError(RuntimeError):
    """A command could not run with the inputs it was given."""


@dataclass
class RunConfig:
    seed: int = 7
    out: str = "runs"
    data_dir: str | None = None
    model_dir: str | None = None
    perturbation: str | None = None
    input_dir: str | None = None
    n_samples: int = 512
    craft_images: int = 128
    eval_images: int = 64
    # interruption
    epsilon: float = 0.05
    gamma: float = 0.001
    lam: float = 0.1
    alpha: float = 1.0
    sigma: float = 1.0
    z: float = 0.1
    weights: list = field(default_factory=lambda: [1 / 3, 1 / 3, 1 / 3])
    iters_int: int = 50
    batch_int: int | None = 32
    step_rule: str = "pixel_rms"
    enhance: bool = True
    # poisoning
    eta: float = 0.005
    nu: float = 1.0
    fusion_weights: list | None = None
    layer_weights: list | None = None
    iters_poi: int = 20
    beta: float = 5.0
    tau: float = 0.3
    poison_threshold: float = 0.1
    batch_poi: int | None = None
    poison_step_rule: str = "pixel_rms"
    mask_update: str = "update"
    relative_tau: bool = True
    # evaluation and the attacker
    detect_threshold: float = 0.5
    retrain_epochs: int = 10
    retrain_lr: float = 0.003
    crop_mode: str = "aligned"
    taus: list = field(default_factory=lambda: list(DEFAULT_TAUS))
    # training
    ae_epochs: int = 12
    det_epochs: int = 15

    def __post_init__(self):
        for f in fields(self):
            _check_field(f.name, getattr(self, f.name))
        if self.n_samples < self.craft_images or self.n_samples < self.eval_images:
            raise ConfigError(f"n_samples = {self.n_samples} must be >= craft_images and eval_images")

    # --- module configs ---------------------------------------------------

    def interruption(self) -> InterruptionConfig:
        return InterruptionConfig(
            epsilon=self.epsilon,
            gamma=self.gamma,
            lam=self.lam,
            alpha=self.alpha,
            sigma=self.sigma,
            z=self.z,
            weights=tuple(self.weights),
            iterations=self.iters_int,
            batch_size=self.batch_int,
            seed=self.seed,
            step_rule=self.step_rule,
            enhance=self.enhance,
        )

    def poison(self, tau: float | None = None) -> PoisonConfig:
        return PoisonConfig(
            epsilon=self.epsilon,
            eta=self.eta,
            nu=self.nu,
            fusion_weights=None if self.fusion_weights is None else tuple(self.fusion_weights),
            layer_weights=None if self.layer_weights is None else tuple(self.layer_weights),
            iterations=self.iters_poi,
            beta=self.beta,
            tau=self.tau if tau is None else tau,
            score_threshold=self.poison_threshold,
            batch_size=self.batch_poi,
            step_rule=self.poison_step_rule,
            mask_update=self.mask_update,
        )

    def tsdf(self, tau: float | None = None) -> TsdfConfig:
        return TsdfConfig(self.interruption(), self.poison(tau), self.relative_tau)

    def train(self) -> TrainConfig:
        return TrainConfig(ae_epochs=self.ae_epochs, det_epochs=self.det_epochs)

    def persistence(self) -> PersistenceConfig:
        n = self.n_samples
        pool = (self.craft_images, max(self.craft_images, n - self.eval_images))
        return PersistenceConfig(
            n_samples=n,
            craft_images=self.craft_images,
            pool=pool,
            eval_images=self.eval_images,
            retrain_epochs=self.retrain_epochs,
            retrain_lr=self.retrain_lr,
            score_threshold=self.detect_threshold,
            crop_mode=self.crop_mode,
            tsdf=self.tsdf(),
            train=self.train(),
        )

    # --- paths --------------------------------------------------------------

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def models_path(self) -> Path:
        return Path(self.model_dir) if self.model_dir else self.out_dir / "models"

    @property
    def perturbation_path(self) -> Path:
        return Path(self.perturbation) if self.perturbation else self.out_dir / "perturbation.tsdp"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


# --- validation ------------------------------------------------------------

_POS_INT = ("n_samples", "craft_images", "eval_images", "iters_int", "iters_poi", "retrain_epochs", "ae_epochs", "det_epochs")
_UNIT = ("tau", "poison_threshold", "detect_threshold")
_NONNEG = ("gamma", "lam", "alpha", "eta", "beta")
_POSITIVE = ("sigma", "z", "retrain_lr")
_CHOICES = {
    "step_rule": tuple(sorted(_STEP_RULES)),
    "poison_step_rule": tuple(sorted(_STEP_RULES)),
    "mask_update": ("update", "iterate"),
    "crop_mode": ("aligned", "resize"),
}
_PATHS = ("data_dir", "model_dir", "perturbation", "input_dir")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)


def _bad(name, value, bound):
    raise ConfigError(f"{name} = {value!r} out of range: {bound}")


def _check_field(name: str, v) -> None:
    if name == "seed":
        if not _is_int(v) or not 0 <= v < 2**63:
            _bad(name, v, "must be an integer in [0, 2^63)")
    elif name in _POS_INT:
        if not _is_int(v) or v < 1:
            _bad(name, v, "must be an integer >= 1")
    elif name in ("batch_int", "batch_poi"):
        if v is not None and (not _is_int(v) or v < 1):
            _bad(name, v, "must be null or an integer >= 1")
    elif name == "epsilon":
        if not _is_num(v) or not 0 < v <= 1:
            _bad(name, v, "must lie in (0, 1]")
    elif name in _UNIT:
        if not _is_num(v) or not 0 <= v <= 1:
            _bad(name, v, "must lie in [0, 1]")
    elif name in _NONNEG:
        if not _is_num(v) or v < 0:
            _bad(name, v, "must be >= 0")
    elif name in _POSITIVE:
        if not _is_num(v) or v <= 0:
            _bad(name, v, "must be > 0")
    elif name == "nu":
        if not _is_num(v):
            _bad(name, v, "must be a finite number")
    elif name == "weights":
        if not isinstance(v, (list, tuple)) or len(v) != 3 or not all(_is_num(w) and w >= 0 for w in v):
            _bad(name, v, "must be three numbers >= 0")
    elif name in ("fusion_weights", "layer_weights"):
        if v is not None and (not isinstance(v, (list, tuple)) or not v or not all(_is_num(w) and w >= 0 for w in v)):
            _bad(name, v, "must be null or a nonempty list of numbers >= 0")
        if name == "fusion_weights" and v is not None and abs(sum(v) - 1.0) > 1e-6:
            _bad(name, v, "must sum to 1")
    elif name == "taus":
        if not isinstance(v, (list, tuple)) or not v or not all(_is_num(t) and 0 <= t <= 1 for t in v):
            _bad(name, v, "must be a nonempty list of numbers in [0, 1]")
    elif name in _CHOICES:
        if v not in _CHOICES[name]:
            _bad(name, v, f"must be one of {list(_CHOICES[name])}")
    elif name in ("enhance", "relative_tau"):
        if not isinstance(v, bool):
            _bad(name, v, "must be true or false")
    elif name == "out":
        if not isinstance(v, str) or not v:
            _bad(name, v, "must be a nonempty path")
    elif name in _PATHS:
        if v is not None and not isinstance(v, str):
            _bad(name, v, "must be null or a path")


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Validate a JSON object against :class:`RunConfig`; missing keys take defaults."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{source}: unknown keys: {', '.join(unknown)}")
    return RunConfig(**data)


def parse_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"{p}: no such config file") from None
    except UnicodeDecodeError as e:
        raise ConfigError(f"{p}: not UTF-8 ({e.reason} at byte {e.start})") from None
    return parse_config_text(text, str(p))


# --- image and dataset IO --------------------------------------------------


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_png(path: Path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), "RGB").save(path, format="PNG")


def read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise CommandError(f"{path}: cannot read image ({e})") from None
    return arr.transpose(2, 0, 1).copy()


def save_dataset(samples, root: Path) -> None:
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    meta = []
    for i, s in enumerate(samples):
        name = f"{i:05d}.png"
        write_png(root / "images" / name, s.image)
        Image.fromarray(s.face_mask.astype(np.uint8) * 255, "L").save(root / "masks" / name, format="PNG")
        meta.append({"file": name, "face_box": [float(v) for v in s.face_box], "attribute": int(s.attribute)})
    (root / "samples.json").write_text(json.dumps(meta, indent=1))


def load_dataset(root: Path) -> list[SyntheticSample]:
    index = root / "samples.json"
    if not index.exists():
        raise CommandError(f"{root}: not a dataset directory (missing samples.json)")
    out = []
    for m in json.loads(index.read_text()):
        with Image.open(root / "masks" / m["file"]) as im:
            mask = np.asarray(im) > 127
        out.append(SyntheticSample(read_png(root / "images" / m["file"]), tuple(m["face_box"]), mask, m["attribute"]))
    return out


def dataset_for(cfg: RunConfig) -> list[SyntheticSample]:
    if cfg.data_dir:
        samples = load_dataset(Path(cfg.data_dir))
        if len(samples) < max(cfg.craft_images, cfg.eval_images):
            raise CommandError(f"{cfg.data_dir}: {len(samples)} samples is too few for the configured splits")
        return samples
    return synth_dataset(cfg.n_samples, cfg.seed)


def splits(samples, cfg: RunConfig):
    """``(craft images, eval images, eval boxes)``; the two never overlap when the set is large enough."""
    images = np.stack([s.image for s in samples]).astype(np.float32)
    boxes = [tuple(s.face_box) for s in samples[-cfg.eval_images :]]
    return images[: cfg.craft_images], images[-cfg.eval_images :], boxes


def save_models(root: Path, extractors, generator, detectors) -> None:
    root.mkdir(parents=True, exist_ok=True)
    for i, e in enumerate(extractors):
        save_model(root / f"extractor_{i}.tsdm", e)
    save_model(root / "generator.tsdm", generator)
    for i, d in enumerate(detectors):
        save_model(root / f"detector_{i}.tsdm", d)


def load_models(root: Path):
    gen = root / "generator.tsdm"
    if not gen.exists():
        raise CommandError(f"{root}: no trained models (run train-models first)")
    extractors = [load_model(p) for p in sorted(root.glob("extractor_*.tsdm"))]
    detectors = [load_model(p) for p in sorted(root.glob("detector_*.tsdm"))]
    if not extractors or not detectors:
        raise CommandError(f"{root}: need at least one extractor and one detector")
    return extractors, load_model(gen), detectors


def load_crafted(cfg: RunConfig) -> TsdfPerturbation:
    path = cfg.perturbation_path
    if not path.exists():
        raise CommandError(f"{path}: no perturbation file (run craft first)")
    p = load_perturbation(path)
    if p.epsilon != np.float32(cfg.epsilon):
        log.warning("perturbation budget %.4g differs from configured epsilon %.4g", p.epsilon, cfg.epsilon)
    return p


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def write_csv(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    path.write_text(buf.getvalue())


def noise_like(shape, epsilon: float, seed: int) -> np.ndarray:
    """Same-budget uniform noise, the unoptimised baseline."""
    return make_rng(seed, 3).uniform(-epsilon, epsilon, shape).astype(np.float32)


# --- the sweep -------------------------------------------------------------


def sweep_tau(taus, cfg: RunConfig | None = None, seed: int | None = None, models=None, dataset=None, W0=None):
    """One row of interruption and detection metrics per threshold.

    The interruption perturbation is crafted once and shared by every
    threshold, so rows differ only in the poisoning stage.
    """
    cfg = cfg or RunConfig()
    if seed is not None and seed != cfg.seed:
        cfg = RunConfig(**{**asdict(cfg), "seed": seed})
    taus = [float(t) for t in taus]
    if not taus:
        raise ValueError("sweep_tau: no thresholds")
    for t in taus:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"sweep_tau: tau must lie in [0, 1], got {t}")
    samples = dataset if dataset is not None else dataset_for(cfg)
    extractors, generator, detectors = models if models is not None else train_toy_models(samples, cfg.train(), cfg.seed)
    craft, evals, boxes = splits(samples, cfg)
    if W0 is None:
        W0 = craft_tsdf(craft, extractors, detectors, cfg.tsdf(0.0)).W0
    rows = []
    for t in taus:
        p = craft_tsdf(craft, extractors, detectors, cfg.tsdf(t), W0=W0)
        rep = interruption_report(f"tau={t:g}", generator, extractors[0], evals, boxes, p.delta_final)
        f1 = detector_f1s(detectors, evals, boxes, p.delta_final, cfg.detect_threshold)
        rows.append(
            {
                "tau": t,
                "l2mask": rep.l2mask,
                "srmask": rep.srmask,
                "psnr": rep.psnr,
                "ssim": rep.ssim,
                "f1": float(np.mean(f1)),
                **{f"f1_detector_{i}": v for i, v in enumerate(f1)},
                "mask_support": float((p.mask > 0).mean()),
            }
        )
        log.info("tau=%g %s", t, rows[-1])
    return rows


# --- commands --------------------------------------------------------------


def cmd_synth_data(cfg: RunConfig) -> str:
    root = Path(cfg.data_dir) if cfg.data_dir else cfg.out_dir / "data"
    samples = synth_dataset(cfg.n_samples, cfg.seed)
    save_dataset(samples, root)
    return f"wrote {len(samples)} samples to {root}"


def cmd_train_models(cfg: RunConfig) -> str:
    samples = dataset_for(cfg)
    tc = cfg.train()
    extractors, generator, detectors = train_toy_models(samples, tc, cfg.seed)
    save_models(cfg.models_path, extractors, generator, detectors)
    held = samples[-tc.holdout :]
    images = np.stack([s.image for s in held]).astype(np.float32)
    boxes = [s.face_box for s in held]
    write_json(
        cfg.out_dir / "train.json",
        {
            "seed": cfg.seed,
            "generator_psnr": reconstruction_psnr(generator, images),
            "detector_f1": [detector_f1(d, images, boxes) for d in detectors],
        },
    )
    return f"wrote {len(extractors)} extractors, 1 generator, {len(detectors)} detectors to {cfg.models_path}"


def cmd_craft(cfg: RunConfig) -> str:
    samples = dataset_for(cfg)
    extractors, _, detectors = load_models(cfg.models_path)
    craft, _, _ = splits(samples, cfg)
    trace_int, trace_poi = [], []
    p = craft_tsdf(
        craft,
        extractors,
        detectors,
        cfg.tsdf(),
        on_interruption=lambda t, W, loss: trace_int.append(loss),
        on_poison=lambda t, d, j: trace_poi.append(j),
    )
    path = cfg.perturbation_path
    path.parent.mkdir(parents=True, exist_ok=True)
    save_perturbation(path, p)
    write_json(
        cfg.out_dir / "craft.json",
        {
            "config": p.config,
            "interruption_loss": trace_int,
            "poison_objective": trace_poi,
            "mask_support": float((p.mask > 0).mean()),
            "linf": float(np.abs(p.delta_final).max()),
        },
    )
    return f"wrote {path}"


def cmd_protect(cfg: RunConfig) -> str:
    p = load_crafted(cfg)
    if cfg.input_dir:
        files = sorted(Path(cfg.input_dir).glob("*.png"))
        if not files:
            raise CommandError(f"{cfg.input_dir}: no PNG images")
        names = [f.name for f in files]
        images = np.stack([read_png(f) for f in files])
    else:
        _, images, _ = splits(dataset_for(cfg), cfg)
        names = [f"{i:05d}.png" for i in range(len(images))]
    if images.shape[1:] != p.delta_final.shape:
        raise CommandError(f"image shape {images.shape[1:]} does not match perturbation {p.delta_final.shape}")
    out = cfg.out_dir / "protected"
    out.mkdir(parents=True, exist_ok=True)
    prot = apply_perturbation(images, p.delta_final).data
    for name, img in zip(names, prot):
        write_png(out / name, img)
    write_json(cfg.out_dir / "protect.json", imperceptibility(images, p.delta_final).to_dict())
    return f"wrote {len(names)} protected images to {out}"


def _conditions(cfg: RunConfig, p: TsdfPerturbation) -> dict[str, np.ndarray]:
    return {
        "clean": np.zeros_like(p.W0),
        "noise": noise_like(p.W0.shape, p.epsilon, cfg.seed),
        "interruption-only": p.W0,
        "tsdf": p.delta_final,
    }


def cmd_eval_interruption(cfg: RunConfig) -> str:
    extractors, generator, detectors = load_models(cfg.models_path)
    p = load_crafted(cfg)
    _, evals, boxes = splits(dataset_for(cfg), cfg)
    rows = []
    for name, delta in _conditions(cfg, p).items():
        rep = interruption_report(name, generator, extractors[0], evals, boxes, delta, detectors, cfg.detect_threshold)
        rows.append({**rep.to_dict(), "image": imperceptibility(evals, delta).to_dict()})
    write_json(cfg.out_dir / "eval_interruption.json", rows)
    return "\n".join(f"{r['condition']}: ssim {r['ssim']:.4f} l2mask {r['l2mask']:.5f}" for r in rows)


def cmd_eval_poisoning(cfg: RunConfig) -> str:
    _, _, detectors = load_models(cfg.models_path)
    p = load_crafted(cfg)
    _, evals, boxes = splits(dataset_for(cfg), cfg)
    rows = []
    for name, delta in _conditions(cfg, p).items():
        f1 = detector_f1s(detectors, evals, boxes, delta, cfg.detect_threshold)
        _, yld = attacker_prepare_data(apply_perturbation(evals, delta).data, detectors[0], cfg.detect_threshold)
        rows.append({"condition": name, "f1": f1, "crop_yield": yld})
    write_json(cfg.out_dir / "eval_poisoning.json", rows)
    return "\n".join(f"{r['condition']}: f1 {[round(v, 4) for v in r['f1']]} yield {r['crop_yield']:.3f}" for r in rows)


def cmd_simulate_retrain(cfg: RunConfig) -> str:
    models = load_models(cfg.models_path)
    samples = dataset_for(cfg)
    path = cfg.perturbation_path
    p = load_perturbation(path) if path.exists() else None
    reports = run_persistence_experiment(cfg.persistence(), cfg.seed, models=models, dataset=samples, perturbation=p)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    (cfg.out_dir / "persistence.json").write_text(reports_to_json(reports) + "\n")
    (cfg.out_dir / "persistence.csv").write_text(reports_to_csv(reports))
    return "\n".join(
        f"{r.condition}: yield {r.crop_yield:.3f} ssim {r.ssim_before:.4f} -> {r.ssim_after:.4f}" for r in reports
    )


def cmd_sweep_tau(cfg: RunConfig) -> str:
    models = load_models(cfg.models_path)
    rows = sweep_tau(cfg.taus, cfg, models=models)
    write_json(cfg.out_dir / "sweep_tau.json", rows)
    write_csv(cfg.out_dir / "sweep_tau.csv", rows)
    return "\n".join(f"tau={r['tau']:g}: l2mask {r['l2mask']:.5f} ssim {r['ssim']:.4f} f1 {r['f1']:.4f}" for r in rows)


COMMANDS = {
    "synth-data": (cmd_synth_data, "render the synthetic face dataset as PNGs"),
    "train-models": (cmd_train_models, "train toy extractors, generator and detectors"),
    "craft": (cmd_craft, "craft the two-stage perturbation"),
    "protect": (cmd_protect, "apply the perturbation to images"),
    "eval-interruption": (cmd_eval_interruption, "score forgery distortion per condition"),
    "eval-poisoning": (cmd_eval_poisoning, "score detector F1 and crop yield per condition"),
    "simulate-retrain": (cmd_simulate_retrain, "run the attacker retraining experiment"),
    "sweep-tau": (cmd_sweep_tau, "evaluate the intensity threshold sweep"),
}


# --- argument handling -----------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--tau", type=float)
    common.add_argument("--epsilon", type=float)
    common.add_argument("--iters-int", type=int, dest="iters_int")
    common.add_argument("--iters-poi", type=int, dest="iters_poi")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="tsdf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, helptext) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=helptext)
    return parser


def config_from_args(args) -> RunConfig:
    base = parse_config(args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k) for k in ("seed", "out", "tau", "epsilon", "iters_int", "iters_poi")}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return RunConfig(**{**asdict(base), **overrides}) if overrides else base


def thread_count() -> int:
    raw = os.environ.get("TSDF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"TSDF_THREADS = {raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError(f"TSDF_THREADS = {n} out of range: must be >= 1")
    return n


def _fail(kind: str, message: str, code: int) -> int:
    print(f"tsdf-error: {kind}: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = config_from_args(args)
        threads = thread_count()
    except ConfigError as e:
        return _fail("config", e, 2)
    except ValueError as e:
        return _fail("config", e, 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    fn, _ = COMMANDS[args.command]
    try:
        with threadpool_limits(threads):
            message = fn(cfg)
    except (CommandError, FormatError) as e:
        return _fail("input", e, 2)
    except TrainingError as e:
        return _fail("training", e, 1)
    except CraftingError as e:
        return _fail("crafting", e, 1)
    except (ValueError, OSError) as e:
        return _fail(type(e).__name__, e, 1)
    print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
