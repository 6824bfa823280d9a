from .attacker import (
    CONDITIONS,
    CROP_MODES,
    NoCropsError,
    PersistenceConfig,
    PersistenceReport,
    attacker_prepare_data,
    crop_aligned,
    crop_and_resize,
    forged_ssim,
    reports_to_csv,
    reports_to_json,
    retrain_generator,
    run_persistence_experiment,
)
from .evaluate import Imperceptibility, detector_f1s, forge, imperceptibility, interruption_report
from .synth import SyntheticSample, render_face, stack_images, synth_dataset

__all__ = [
    "SyntheticSample",
    "synth_dataset",
    "render_face",
    "stack_images",
    "CONDITIONS",
    "CROP_MODES",
    "NoCropsError",
    "PersistenceConfig",
    "PersistenceReport",
    "attacker_prepare_data",
    "crop_aligned",
    "crop_and_resize",
    "retrain_generator",
    "forged_ssim",
    "run_persistence_experiment",
    "reports_to_json",
    "reports_to_csv",
    "Imperceptibility",
    "imperceptibility",
    "detector_f1s",
    "forge",
    "interruption_report",
]
