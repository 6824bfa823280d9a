"""Two-stage interruption + poisoning perturbations against toy deepfake pipelines."""

__version__ = "0.1.0"
